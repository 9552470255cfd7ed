//! Indirect object identification with "BABA" name ordering.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{TaskDataset, TaskExample, Vocabulary};
use crate::error::{Error, Result};

/// Sentence templates; the final `[A]` is the answer and is dropped from the
/// prompt. Punctuation is tokenized separately.
pub const TEMPLATES: [&str; 15] = [
    "Then , [B] and [A] went to the [PLACE] . [B] gave a [OBJECT] to [A]",
    "Then , [B] and [A] had a lot of fun at the [PLACE] . [B] gave a [OBJECT] to [A]",
    "Then , [B] and [A] were working at the [PLACE] . [B] decided to give a [OBJECT] to [A]",
    "Then , [B] and [A] were thinking about going to the [PLACE] . [B] wanted to give a [OBJECT] to [A]",
    "Then , [B] and [A] had a long argument , and afterwards [B] said to [A]",
    "After [B] and [A] went to the [PLACE] , [B] gave a [OBJECT] to [A]",
    "When [B] and [A] got a [OBJECT] at the [PLACE] , [B] decided to give it to [A]",
    "When [B] and [A] got a [OBJECT] at the [PLACE] , [B] decided to give the [OBJECT] to [A]",
    "While [B] and [A] were working at the [PLACE] , [B] gave a [OBJECT] to [A]",
    "While [B] and [A] were commuting to the [PLACE] , [B] gave a [OBJECT] to [A]",
    "After the lunch , [B] and [A] went to the [PLACE] . [B] gave a [OBJECT] to [A]",
    "Afterwards , [B] and [A] went to the [PLACE] . [B] gave a [OBJECT] to [A]",
    "Then , [B] and [A] had a long argument . Afterwards [B] said to [A]",
    "The [PLACE] [B] and [A] went to had a [OBJECT] . [B] gave it to [A]",
    "Friends [B] and [A] found a [OBJECT] at the [PLACE] . [B] gave it to [A]",
];

pub const NAMES: [&str; 87] = [
    "Michael", "Christopher", "Jessica", "Matthew", "Ashley", "Jennifer", "Joshua", "Daniel",
    "David", "James", "Robert", "John", "Joseph", "Andrew", "Ryan", "Brandon", "Justin", "Sarah",
    "William", "Jonathan", "Stephanie", "Brian", "Nicole", "Nicholas", "Heather", "Eric",
    "Elizabeth", "Adam", "Megan", "Melissa", "Kevin", "Steven", "Timothy", "Christina", "Kyle",
    "Rachel", "Laura", "Lauren", "Amber", "Brittany", "Richard", "Kimberly", "Jeffrey", "Amy",
    "Crystal", "Michelle", "Tiffany", "Jeremy", "Mark", "Emily", "Aaron", "Charles", "Rebecca",
    "Jacob", "Stephen", "Patrick", "Kelly", "Samantha", "Nathan", "Sara", "Dustin", "Paul",
    "Angela", "Tyler", "Scott", "Andrea", "Gregory", "Erica", "Mary", "Travis", "Lisa", "Kenneth",
    "Bryan", "Linda", "Jose", "Alexander", "Jesse", "Katie", "Lindsay", "Shannon", "Vanessa",
    "Courtney", "Alicia", "Cody", "Allison", "Bradley", "Samuel",
];

/// Number of leading names used by the generator.
pub const NAME_POOL: usize = 20;

pub const PLACES: [&str; 8] = [
    "store", "garden", "restaurant", "school", "hospital", "office", "house", "station",
];
pub const OBJECTS: [&str; 8] = [
    "ring", "kiss", "bone", "basketball", "computer", "necklace", "drink", "snack",
];

pub fn vocabulary() -> Vocabulary {
    let mut v = Vocabulary::new();
    for n in NAMES {
        v.add(n);
    }
    for w in PLACES.iter().chain(&OBJECTS) {
        v.add(w);
    }
    for t in TEMPLATES {
        for w in t.split_whitespace() {
            if !w.starts_with('[') {
                v.add(w);
            }
        }
    }
    v
}

/// Fill a template, dropping the trailing answer slot. `second_b` replaces
/// the repeated subject mention.
pub fn fill(template: &str, a: &str, b: &str, second_b: &str, place: &str, object: &str) -> String {
    let mut words: Vec<&str> = template.split_whitespace().collect();
    words.pop();
    let mut seen_b = 0;
    words
        .into_iter()
        .map(|w| match w {
            "[A]" => a,
            "[B]" => {
                seen_b += 1;
                if seen_b == 1 {
                    b
                } else {
                    second_b
                }
            }
            "[PLACE]" => place,
            "[OBJECT]" => object,
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn gen_ioi<R: Rng + ?Sized>(vocab: &Vocabulary, count: usize, rng: &mut R) -> Result<TaskDataset> {
    if count == 0 {
        return Err(Error::Input("count must be at least 1".into()));
    }
    let pool = &NAMES[..NAME_POOL];
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let t = rng.random_range(0..TEMPLATES.len());
        let picked: Vec<&str> = pool.choose_multiple(rng, 3).copied().collect();
        let (a, b, c) = (picked[0], picked[1], picked[2]);
        let place = *PLACES.choose(rng).expect("non-empty");
        let object = *OBJECTS.choose(rng).expect("non-empty");
        let prompt = vocab.encode(&fill(TEMPLATES[t], a, b, b, place, object))?;
        let corrupted = vocab.encode(&fill(TEMPLATES[t], a, b, c, place, object))?;
        let (ia, ib) = (vocab.id(a)?, vocab.id(b)?);
        let gold_first = rng.random_bool(0.5);
        examples.push(TaskExample {
            prompt,
            candidates: if gold_first { vec![ia, ib] } else { vec![ib, ia] },
            gold: if gold_first { 0 } else { 1 },
            corrupted,
            template_id: format!("ioi/t{t:02}"),
        });
    }
    Ok(TaskDataset::new(examples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn canonical_example_prompt() {
        let s = fill(TEMPLATES[0], "John", "Mary", "Mary", "store", "drink");
        assert_eq!(s, "Then , Mary and John went to the store . Mary gave a drink to");
        let c = fill(TEMPLATES[0], "John", "Mary", "Katie", "store", "drink");
        assert_eq!(c, "Then , Mary and John went to the store . Katie gave a drink to");
    }

    #[test]
    fn generator_constraints() {
        let v = vocabulary();
        let d = gen_ioi(&v, 500, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        d.validate(v.len()).unwrap();
        for e in &d.examples {
            let a = e.gold_token();
            let b = e.candidates[1 - e.gold];
            assert_ne!(a, b);
            // BABA: B, A, then B again; A only once in the prompt.
            let pos_b: Vec<usize> = (0..e.prompt.len()).filter(|&i| e.prompt[i] == b).collect();
            let pos_a: Vec<usize> = (0..e.prompt.len()).filter(|&i| e.prompt[i] == a).collect();
            assert_eq!(pos_b.len(), 2);
            assert_eq!(pos_a.len(), 1);
            assert!(pos_b[0] < pos_a[0] && pos_a[0] < pos_b[1]);
            // The corruption touches exactly the second B mention.
            let diff: Vec<usize> =
                (0..e.prompt.len()).filter(|&i| e.prompt[i] != e.corrupted[i]).collect();
            assert_eq!(diff, vec![pos_b[1]]);
            assert!(![a, b].contains(&e.corrupted[pos_b[1]]));
        }
        let first = d.examples.iter().filter(|e| e.gold == 0).count();
        assert!((200..=300).contains(&first));
    }

    #[test]
    fn vocabulary_contains_every_template_word() {
        let v = vocabulary();
        for t in TEMPLATES {
            v.encode(&fill(t, "Mary", "John", "John", "store", "ring")).unwrap();
        }
        assert!(v.id("Courtney").is_ok());
    }
}
