//! Anaphor agreement: a subject, a transitive verb, and a reflexive that must
//! agree with the subject in gender (gender frames) or number (number frames).

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{TaskDataset, TaskExample, Vocabulary};
use crate::error::{Error, Result};

pub const FEMALE_NAMES: [&str; 8] = [
    "Katherine", "Susan", "Mary", "Sarah", "Lisa", "Emily", "Laura", "Rachel",
];
pub const MALE_NAMES: [&str; 8] = [
    "John", "David", "Michael", "Robert", "James", "Daniel", "Mark", "Paul",
];
pub const FEMALE_PLURALS: [&str; 4] = ["girls", "women", "ladies", "sisters"];
pub const MALE_PLURALS: [&str; 4] = ["boys", "men", "guys", "brothers"];
pub const VERBS: [&str; 10] = [
    "can't help",
    "revealed",
    "insulted",
    "hurt",
    "praised",
    "admired",
    "hated",
    "described",
    "noticed",
    "blamed",
];
/// `{S}` is the subject slot, `{V}` the verb.
pub const FRAMES: [&str; 3] = ["{S} {V}", "Yesterday , {S} {V}", "Many {S} {V}"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Gender {
    Female,
    Male,
}

impl Gender {
    fn reflexive(self) -> &'static str {
        match self {
            Gender::Female => "herself",
            Gender::Male => "himself",
        }
    }

    fn pronoun(self) -> &'static str {
        match self {
            Gender::Female => "she",
            Gender::Male => "he",
        }
    }

    fn opposite(self) -> Self {
        match self {
            Gender::Female => Gender::Male,
            Gender::Male => Gender::Female,
        }
    }
}

pub fn vocabulary() -> Vocabulary {
    let mut v = Vocabulary::new();
    for w in FEMALE_NAMES.iter().chain(&MALE_NAMES).chain(&FEMALE_PLURALS).chain(&MALE_PLURALS) {
        v.add(w);
    }
    for verb in VERBS {
        v.add_text(verb);
    }
    for f in FRAMES {
        v.add_text(&f.replace("{S}", "").replace("{V}", ""));
    }
    for w in ["herself", "himself", "themselves", "she", "he", "they"] {
        v.add(w);
    }
    v
}

fn render(frame: &str, subject: &str, verb: &str) -> String {
    frame.replace("{S}", subject).replace("{V}", verb)
}

/// Half gender frames (singular names, foil of the opposite gender) and half
/// number frames (singular names or plural nouns, foil of the other number).
/// Plural nouns only appear after "Many"; names never do.
pub fn gen_agreement<R: Rng + ?Sized>(vocab: &Vocabulary, count: usize, rng: &mut R) -> Result<TaskDataset> {
    if count == 0 {
        return Err(Error::Input("count must be at least 1".into()));
    }
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let gender = if rng.random_bool(0.5) { Gender::Female } else { Gender::Male };
        let verb = *VERBS.choose(rng).expect("non-empty");
        let number_frame = i % 2 == 1;
        let plural = number_frame && rng.random_bool(0.5);
        let frame = if plural {
            FRAMES[2]
        } else {
            *FRAMES[..2].choose(rng).expect("non-empty")
        };
        let subject = match (plural, gender) {
            (true, Gender::Female) => *FEMALE_PLURALS.choose(rng).expect("non-empty"),
            (true, Gender::Male) => *MALE_PLURALS.choose(rng).expect("non-empty"),
            (false, Gender::Female) => *FEMALE_NAMES.choose(rng).expect("non-empty"),
            (false, Gender::Male) => *MALE_NAMES.choose(rng).expect("non-empty"),
        };
        let (gold, foil, swap, kind) = if !number_frame {
            (
                gender.reflexive(),
                gender.opposite().reflexive(),
                gender.opposite().pronoun(),
                "gender",
            )
        } else if plural {
            ("themselves", gender.reflexive(), gender.pronoun(), "number-plural")
        } else {
            (gender.reflexive(), "themselves", "they", "number-singular")
        };
        let prompt = vocab.encode(&render(frame, subject, verb))?;
        let corrupted = vocab.encode(&render(frame, swap, verb))?;
        let (g, f) = (vocab.id(gold)?, vocab.id(foil)?);
        let gold_first = rng.random_bool(0.5);
        examples.push(TaskExample {
            prompt,
            candidates: if gold_first { vec![g, f] } else { vec![f, g] },
            gold: if gold_first { 0 } else { 1 },
            corrupted,
            template_id: format!("agreement/{kind}"),
        });
    }
    Ok(TaskDataset::new(examples))
}
