//! Synthetic task suites over closed word-level vocabularies, the dataset
//! file format, and base-model pretraining.

pub mod agreement;
pub mod factual;
pub mod ioi;
pub mod pretrain;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;

/// Word-level token table. Ids 0 and 1 are padding and beginning-of-sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        let index = f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens: f.tokens,
            index,
        }
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.add(PAD);
        v.add(BOS);
        v
    }

    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        self.tokens.push(word.to_string());
        self.index.insert(word.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    /// Add every whitespace-separated word of `text`.
    pub fn add_text(&mut self, text: &str) {
        for w in text.split_whitespace() {
            self.add(w);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Input(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// BOS followed by the ids of the whitespace-separated words.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = vec![BOS_ID];
        for w in text.split_whitespace() {
            out.push(self.id(w)?);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != BOS_ID && i != PAD_ID)
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub prompt: Vec<usize>,
    pub candidates: Vec<usize>,
    pub gold: usize,
    pub corrupted: Vec<usize>,
    pub template_id: String,
}

impl TaskExample {
    pub fn gold_token(&self) -> usize {
        self.candidates[self.gold]
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::Input("an example needs at least two candidates".into()));
        }
        if self.gold >= self.candidates.len() {
            return Err(Error::Input(format!(
                "gold index {} out of range for {} candidates",
                self.gold,
                self.candidates.len()
            )));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(c) {
                return Err(Error::Input(format!("duplicate candidate {c}")));
            }
        }
        if self.prompt.is_empty() || self.corrupted.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        let all = self.prompt.iter().chain(&self.corrupted).chain(&self.candidates);
        if let Some(bad) = all.into_iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(())
    }
}

/// An ordered list of examples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskDataset {
    pub examples: Vec<TaskExample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: TaskDataset,
    pub validation: TaskDataset,
    pub test: TaskDataset,
}

impl TaskDataset {
    pub fn new(examples: Vec<TaskExample>) -> Self {
        TaskDataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (i, e) in self.examples.iter().enumerate() {
            e.validate(vocab_size)
                .map_err(|err| Error::Input(format!("example {i}: {err}")))?;
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        self.examples
            .iter()
            .map(|e| e.prompt.len().max(e.corrupted.len()))
            .max()
            .unwrap_or(0)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.examples {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut examples = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TaskExample = serde_json::from_str(&line)
                .map_err(|err| Error::Format(format!("dataset line {}: {err}", n + 1)))?;
            examples.push(e);
        }
        Ok(TaskDataset { examples })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    /// Seeded shuffle into train/validation/test. Examples with identical
    /// prompt and candidates always land in the same split.
    pub fn split(&self, fractions: SplitFractions, seed: u64) -> Result<Splits> {
        let f = fractions;
        if [f.train, f.validation, f.test].iter().any(|&x| !(0.0..=1.0).contains(&x))
            || (f.train + f.validation + f.test - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!("split fractions must sum to 1: {f:?}")));
        }
        let mut groups: BTreeMap<(&[usize], &[usize]), Vec<usize>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            groups.entry((&e.prompt, &e.candidates)).or_default().push(i);
        }
        let mut keys: Vec<Vec<usize>> = groups.into_values().collect();
        keys.sort();
        keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = keys.len();
        let n_train = (f.train * n as f64).round() as usize;
        let n_val = ((f.validation * n as f64).round() as usize).min(n - n_train);
        let pick = |groups: &[Vec<usize>]| {
            let mut idx: Vec<usize> = groups.iter().flatten().copied().collect();
            idx.sort_unstable();
            TaskDataset::new(idx.into_iter().map(|i| self.examples[i].clone()).collect())
        };
        Ok(Splits {
            train: pick(&keys[..n_train]),
            validation: pick(&keys[n_train..n_train + n_val]),
            test: pick(&keys[n_train + n_val..]),
        })
    }
}

/// The three built-in suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Agreement,
    Ioi,
    Factual,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Agreement => "agreement",
            Suite::Ioi => "ioi",
            Suite::Factual => "factual",
        }
    }

    pub fn all() -> [Suite; 3] {
        [Suite::Agreement, Suite::Ioi, Suite::Factual]
    }

    pub fn vocabulary(self) -> Vocabulary {
        match self {
            Suite::Agreement => agreement::vocabulary(),
            Suite::Ioi => ioi::vocabulary(),
            Suite::Factual => factual::KnowledgeBase::default_kb().vocabulary(),
        }
    }

    /// Generate `count` examples (the factual suite enumerates its knowledge
    /// base and ignores `count`).
    pub fn generate(self, count: usize, seed: u64) -> Result<(Vocabulary, TaskDataset)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Suite::Agreement => {
                let v = agreement::vocabulary();
                let d = agreement::gen_agreement(&v, count, &mut rng)?;
                Ok((v, d))
            }
            Suite::Ioi => {
                let v = ioi::vocabulary();
                let d = ioi::gen_ioi(&v, count, &mut rng)?;
                Ok((v, d))
            }
            Suite::Factual => {
                let kb = factual::KnowledgeBase::default_kb();
                let v = kb.vocabulary();
                let d = kb.examples(&v, &mut rng)?;
                Ok((v, d))
            }
        }
    }
}

impl Suite {
    /// The suite's standard split. Factual data uses a paraphrase split so
    /// held-out queries ask facts seen in training under another template.
    pub fn split(
        self,
        vocab: &Vocabulary,
        dataset: &TaskDataset,
        fractions: SplitFractions,
        seed: u64,
    ) -> Result<Splits> {
        match self {
            Suite::Factual => {
                factual::KnowledgeBase::default_kb().paraphrase_split(vocab, dataset, fractions, seed)
            }
            _ => dataset.split(fractions, seed),
        }
    }
}

impl Splits {
    /// Validation and test together.
    pub fn heldout(&self) -> TaskDataset {
        TaskDataset::new(
            self.validation.examples.iter().chain(&self.test.examples).cloned().collect(),
        )
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agreement" => Ok(Suite::Agreement),
            "ioi" => Ok(Suite::Ioi),
            "factual" => Ok(Suite::Factual),
            other => Err(Error::Config(format!("unknown task suite {other:?}"))),
        }
    }
}
