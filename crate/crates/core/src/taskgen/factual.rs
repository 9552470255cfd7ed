//! Synthetic factual recall over a small knowledge base of
//! (subject, relation, object) triples, one object per subject and relation.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SplitFractions, Splits, TaskDataset, TaskExample, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    /// Prompt templates with a `{S}` slot; the object follows the last word.
    pub templates: Vec<String>,
    pub objects: Vec<String>,
    /// Subject to object.
    pub facts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub relations: Vec<Relation>,
}

struct RelationSpec {
    name: &'static str,
    subject_prefix: &'static str,
    templates: [&'static str; 3],
    objects: [&'static str; 8],
}

const RELATIONS: [RelationSpec; 4] = [
    RelationSpec {
        name: "capital",
        subject_prefix: "country",
        templates: [
            "the capital city of {S} is",
            "the seat of government of {S} is",
            "{S} has its capital in",
        ],
        objects: [
            "ottawa", "lima", "oslo", "quito", "hanoi", "nairobi", "dublin", "seoul",
        ],
    },
    RelationSpec {
        name: "language",
        subject_prefix: "author",
        templates: [
            "the mother tongue of {S} is",
            "the native language of {S} is",
            "{S} grew up speaking",
        ],
        objects: [
            "dutch", "french", "spanish", "greek", "polish", "swedish", "turkish", "hindi",
        ],
    },
    RelationSpec {
        name: "continent",
        subject_prefix: "glacier",
        templates: [
            "{S} is located in",
            "{S} can be found in",
            "{S} lies on the continent of",
        ],
        objects: [
            "europe", "asia", "africa", "antarctica", "oceania", "america", "arctica", "zealandia",
        ],
    },
    RelationSpec {
        name: "manufacturer",
        subject_prefix: "vehicle",
        templates: ["{S} is produced by", "{S} is manufactured by", "{S} was built by"],
        objects: [
            "honda", "toyota", "boeing", "airbus", "ford", "volvo", "fiat", "tesla",
        ],
    },
];

impl KnowledgeBase {
    /// `relations` of the built-in relations with `subjects` synthetic
    /// subjects each. Objects are assigned by a seeded shuffle that uses every
    /// object as evenly as possible. `extra` triples `(subject, relation,
    /// object)` are inserted first and must name a built-in relation.
    pub fn generate(
        relations: usize,
        subjects: usize,
        extra: &[(&str, &str, &str)],
        seed: u64,
    ) -> Result<Self> {
        if relations == 0 || relations > RELATIONS.len() {
            return Err(Error::Config(format!(
                "relation count must be in 1..={}, got {relations}",
                RELATIONS.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for spec in &RELATIONS[..relations] {
            let mut facts = BTreeMap::new();
            let mut objects: Vec<String> = spec.objects.iter().map(|s| s.to_string()).collect();
            for &(s, r, o) in extra {
                if r == spec.name {
                    if !objects.iter().any(|x| x == o) {
                        objects.push(o.to_string());
                    }
                    if facts.insert(s.to_string(), o.to_string()).is_some() {
                        return Err(Error::Input(format!("duplicate fact for ({s}, {r})")));
                    }
                }
            }
            let remaining = subjects.saturating_sub(facts.len());
            let mut assignment: Vec<usize> = (0..remaining).map(|i| i % objects.len()).collect();
            assignment.shuffle(&mut rng);
            for (i, &o) in assignment.iter().enumerate() {
                facts.insert(format!("{}{i:02}", spec.subject_prefix), objects[o].clone());
            }
            out.push(Relation {
                name: spec.name.to_string(),
                templates: spec.templates.iter().map(|s| s.to_string()).collect(),
                objects,
                facts,
            });
        }
        for &(_, r, _) in extra {
            if !out.iter().any(|rel| rel.name == r) {
                return Err(Error::Input(format!("unknown relation {r:?}")));
            }
        }
        Ok(KnowledgeBase { relations: out })
    }

    /// Four relations, 24 subjects each, including (canada, capital, ottawa).
    pub fn default_kb() -> Self {
        Self::generate(4, 24, &[("canada", "capital", "ottawa")], 0x5eed)
            .expect("built-in knowledge base is valid")
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut v = Vocabulary::new();
        for r in &self.relations {
            for t in &r.templates {
                v.add_text(&t.replace("{S}", ""));
            }
            for o in &r.objects {
                v.add(o);
            }
            for s in r.facts.keys() {
                v.add(s);
            }
        }
        v
    }

    pub fn prompt(relation: &Relation, template: usize, subject: &str) -> String {
        relation.templates[template].replace("{S}", subject)
    }

    /// One example per (fact, template). Candidates are the relation's
    /// objects in table order; the corrupted prompt swaps in another subject
    /// of the same relation.
    pub fn examples<R: Rng + ?Sized>(&self, vocab: &Vocabulary, rng: &mut R) -> Result<TaskDataset> {
        let mut examples = Vec::new();
        for r in &self.relations {
            let subjects: Vec<&String> = r.facts.keys().collect();
            let candidates = r.objects.iter().map(|o| vocab.id(o)).collect::<Result<Vec<_>>>()?;
            for (s, o) in &r.facts {
                for t in 0..r.templates.len() {
                    let other = loop {
                        let c = *subjects.choose(rng).expect("non-empty");
                        if c != s || subjects.len() == 1 {
                            break c;
                        }
                    };
                    examples.push(TaskExample {
                        prompt: vocab.encode(&Self::prompt(r, t, s))?,
                        candidates: candidates.clone(),
                        gold: r.objects.iter().position(|x| x == o).expect("object listed"),
                        corrupted: vocab.encode(&Self::prompt(r, t, other))?,
                        template_id: format!("factual/{}/t{t}", r.name),
                    });
                }
            }
        }
        Ok(TaskDataset::new(examples))
    }
}

impl KnowledgeBase {
    /// Subject token of a factual prompt, if any.
    pub fn subject_of(&self, vocab: &Vocabulary, prompt: &[usize]) -> Option<usize> {
        prompt.iter().copied().find(|&t| {
            vocab
                .word(t)
                .is_some_and(|w| self.relations.iter().any(|r| r.facts.contains_key(w)))
        })
    }

    /// Split in which every held-out query asks a fact that also appears in
    /// training under a different template. Validation and test take at most
    /// one template per fact.
    pub fn paraphrase_split(
        &self,
        vocab: &Vocabulary,
        dataset: &TaskDataset,
        fractions: SplitFractions,
        seed: u64,
    ) -> Result<Splits> {
        let mut groups: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
        for (i, e) in dataset.examples.iter().enumerate() {
            let subject = self
                .subject_of(vocab, &e.prompt)
                .ok_or_else(|| Error::Input(format!("example {i} has no known subject")))?;
            let relation = e.template_id.rsplit_once('/').map_or("", |(r, _)| r).to_string();
            groups.entry((relation, subject)).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() > 1).collect();
        keys.shuffle(&mut rng);
        let n = dataset.len() as f64;
        let n_val = ((fractions.validation * n).round() as usize).min(keys.len());
        let n_test = ((fractions.test * n).round() as usize).min(keys.len() - n_val);
        let mut role = vec![0u8; dataset.len()];
        for (k, g) in keys.iter().enumerate().take(n_val + n_test) {
            let pick = *g.choose(&mut rng).expect("non-empty group");
            role[pick] = if k < n_val { 1 } else { 2 };
        }
        let take = |r: u8| {
            TaskDataset::new(
                dataset
                    .examples
                    .iter()
                    .zip(&role)
                    .filter(|(_, &x)| x == r)
                    .map(|(e, _)| e.clone())
                    .collect(),
            )
        };
        Ok(Splits {
            train: take(0),
            validation: take(1),
            test: take(2),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canada_example() {
        let kb = KnowledgeBase::default_kb();
        let v = kb.vocabulary();
        let cap = &kb.relations[0];
        assert_eq!(cap.facts["canada"], "ottawa");
        assert_eq!(KnowledgeBase::prompt(cap, 0, "canada"), "the capital city of canada is");
        let d = kb.examples(&v, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let e = d
            .examples
            .iter()
            .find(|e| e.prompt == v.encode("the capital city of canada is").unwrap())
            .unwrap();
        assert_eq!(v.word(e.gold_token()), Some("ottawa"));
        assert_eq!(e.candidates.len(), 8);
    }

    #[test]
    fn unique_objects_and_structure() {
        let kb = KnowledgeBase::default_kb();
        let v = kb.vocabulary();
        let d = kb.examples(&v, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(d.len(), 4 * 24 * 3);
        d.validate(v.len()).unwrap();
        let mut seen: BTreeMap<(Vec<usize>, String), usize> = BTreeMap::new();
        for e in &d.examples {
            let key = (e.prompt.clone(), e.template_id.clone());
            if let Some(prev) = seen.insert(key, e.gold_token()) {
                assert_eq!(prev, e.gold_token());
            }
            let diff: Vec<usize> =
                (0..e.prompt.len()).filter(|&i| e.prompt[i] != e.corrupted[i]).collect();
            assert_eq!(diff.len(), 1);
        }
        for r in &kb.relations {
            assert_eq!(r.facts.len(), 24);
            assert_eq!(r.objects.len(), 8);
        }
        assert!(KnowledgeBase::generate(1, 4, &[("x", "nope", "y")], 0).is_err());
    }

    #[test]
    fn paraphrase_split_holds_out_known_facts() {
        let kb = KnowledgeBase::default_kb();
        let v = kb.vocabulary();
        let d = kb.examples(&v, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s = kb.paraphrase_split(&v, &d, SplitFractions::default(), 3).unwrap();
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), d.len());
        assert_eq!(s.validation.len(), 29);
        for e in s.validation.examples.iter().chain(&s.test.examples) {
            let subj = kb.subject_of(&v, &e.prompt).unwrap();
            assert!(s.train.examples.iter().any(|t| t.candidates == e.candidates
                && kb.subject_of(&v, &t.prompt) == Some(subj)));
        }
    }
}
