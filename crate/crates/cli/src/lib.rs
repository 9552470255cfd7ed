//! Run configuration and the commands behind the `discogp` binary.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use discogp::evaluator::{
    discover, edge_similarity_experiment, evaluate, head_layer_distribution, heads_csv, importance_csv,
    layer_ablation_importance, overlap_documents, similarity_csv, sparsity_sweep,
};
use discogp::mask::{MaskDocument, MaskMode};
use discogp::taskgen::pretrain::pretrain_base_model;
use discogp::{
    AblationStrategy, Circuit, CircuitDocument, EvalReport, GraphTopology, ModelConfig, ModelParams,
    OverlapReport, PretrainConfig, SplitFractions, Splits, Suite, Sweep, TaskDataset, TrainConfig, Vocabulary,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Environment variable read when neither the config nor the command line
/// gives a seed.
pub const SEED_ENV: &str = "DISCOGP_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] discogp::Error),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Run(e) => e.code(),
        }
    }

    pub fn exit_status(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Transformer shape; the vocabulary size comes from the task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            layers: 4,
            heads: 4,
            d_model: 128,
            d_head: 32,
            d_ff: 256,
            max_seq: 24,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(self, vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_head: self.d_head,
            d_ff: self.d_ff,
            vocab,
            max_seq: self.max_seq,
        }
    }
}

/// Example counts. The factual suite enumerates its knowledge base and
/// ignores the counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pretrain_examples: usize,
    pub discovery_examples: usize,
    pub pretrain_split: SplitFractions,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain_examples: 2000,
            discovery_examples: 800,
            pretrain_split: SplitFractions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub sweep_grid: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            sweep_grid: vec![5.0, 15.0, 60.0, 120.0, 480.0],
        }
    }
}

/// Artifact locations. Relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub model: PathBuf,
    pub output: PathBuf,
    /// Discovery dataset (JSONL); generated from the seed when absent.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Pretraining dataset (JSONL); generated from the seed when absent.
    #[serde(default)]
    pub pretrain_dataset: Option<PathBuf>,
    /// Circuit read by `analyze` and `export-dot`; defaults to the one
    /// `discover` writes.
    #[serde(default)]
    pub circuit: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Suite,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub paths: Paths,
}

/// Independent seed streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
enum Stream {
    PretrainData = 1,
    PretrainSplit,
    PretrainInit,
    DiscoveryData,
    DiscoverySplit,
    Training,
    Analysis,
}

fn derive_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

/// A config with its seed settled and paths made absolute.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.paths.model);
        resolve(&mut config.paths.output);
        for p in [&mut config.paths.dataset, &mut config.paths.pretrain_dataset, &mut config.paths.circuit]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        Ok(config)
    }

    /// Settle the seed: command line, then config, then environment.
    pub fn into_run(self, flag: Option<u64>) -> CliResult<Run> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.parse::<u64>()
                    .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let seed = flag.or(self.seed).or(env).ok_or_else(|| {
            CliError::Usage(format!("no seed: set \"seed\" in the config, pass --seed, or export {SEED_ENV}"))
        })?;
        self.train.validate()?;
        Ok(Run { config: self, seed })
    }
}

impl Run {
    fn vocabulary(&self) -> Vocabulary {
        self.config.task.vocabulary()
    }

    pub fn model_config(&self) -> ModelConfig {
        self.config.model.with_vocab(self.vocabulary().len())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, Stream::Training),
            ..self.config.train.clone()
        }
    }

    fn output_dir(&self) -> CliResult<&Path> {
        let dir = &self.config.paths.output;
        fs::create_dir_all(dir)?;
        Ok(dir)
    }

    fn dataset(&self, path: Option<&PathBuf>, count: usize, stream: Stream) -> CliResult<TaskDataset> {
        match path {
            Some(p) if !p.exists() => Err(CliError::Usage(format!("dataset {} does not exist", p.display()))),
            Some(p) => Ok(TaskDataset::load(p)?),
            None => Ok(self.config.task.generate(count, derive_seed(self.seed, stream))?.1),
        }
    }

    pub fn pretrain_splits(&self) -> CliResult<Splits> {
        let data = self.dataset(
            self.config.paths.pretrain_dataset.as_ref(),
            self.config.data.pretrain_examples,
            Stream::PretrainData,
        )?;
        let seed = derive_seed(self.seed, Stream::PretrainSplit);
        Ok(self.config.task.split(&self.vocabulary(), &data, self.config.data.pretrain_split, seed)?)
    }

    pub fn discovery_splits(&self) -> CliResult<Splits> {
        let data = self.dataset(
            self.config.paths.dataset.as_ref(),
            self.config.data.discovery_examples,
            Stream::DiscoveryData,
        )?;
        let seed = derive_seed(self.seed, Stream::DiscoverySplit);
        Ok(self.config.task.split(&self.vocabulary(), &data, self.config.train.split, seed)?)
    }

    pub fn load_model(&self) -> CliResult<ModelParams> {
        let path = &self.config.paths.model;
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "model file {} does not exist; run `discogp pretrain` first",
                path.display()
            )));
        }
        let params = ModelParams::load(path)?;
        if params.config != self.model_config() {
            return Err(discogp::Error::Config(format!(
                "model file has shape {:?}, config asks for {:?}",
                params.config,
                self.model_config()
            ))
            .into());
        }
        Ok(params)
    }

    fn circuit_path(&self) -> PathBuf {
        self.config
            .paths
            .circuit
            .clone()
            .unwrap_or_else(|| self.config.paths.output.join("circuit.json"))
    }

    pub fn load_circuit(&self, topology: &GraphTopology) -> CliResult<Circuit> {
        let path = self.circuit_path();
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "circuit {} does not exist; run `discogp discover` first",
                path.display()
            )));
        }
        Ok(read_circuit_document(&path)?.circuit(topology)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

pub fn read_circuit_document(path: &Path) -> CliResult<CircuitDocument> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read circuit {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Train the base model and write its weight file and log.
pub fn cmd_pretrain(run: &Run) -> CliResult<f64> {
    let splits = run.pretrain_splits()?;
    let config = PretrainConfig {
        seed: derive_seed(run.seed, Stream::PretrainInit),
        ..run.config.pretrain
    };
    let out = run.output_dir()?;
    let (params, report) = pretrain_base_model(run.model_config(), &splits.train, &splits.heldout(), &config)?;
    if let Some(dir) = run.config.paths.model.parent() {
        fs::create_dir_all(dir)?;
    }
    params.save(&run.config.paths.model)?;
    let mut log = BufWriter::new(fs::File::create(out.join("pretrain_log.jsonl"))?);
    for e in &report.epochs {
        serde_json::to_writer(&mut log, e)?;
        std::io::Write::write_all(&mut log, b"\n")?;
    }
    write_json(&out.join("vocabulary.json"), &run.vocabulary())?;
    Ok(report.heldout_accuracy)
}

/// Files written by `discover`.
#[derive(Clone, Debug)]
pub struct DiscoverOutput {
    pub report: EvalReport,
    pub circuit: PathBuf,
    pub report_text: String,
}

pub fn cmd_discover(run: &Run) -> CliResult<DiscoverOutput> {
    let params = run.load_model()?;
    let topology = GraphTopology::build(&params.config);
    let layout = discogp::WeightLayout::new(&params.config, &topology);
    let splits = run.discovery_splits()?;
    let found = discover(&params, splits, &run.train_config())?;
    let test = &found.outcome.splits.test.examples;
    let report = evaluate(&params, &topology, &found.circuit, &found.masks, test)?;
    let out = run.output_dir()?;
    let circuit_path = out.join("circuit.json");
    write_json(&circuit_path, &CircuitDocument::new(&found.circuit, &topology))?;
    fs::write(out.join("circuit.dot"), found.circuit.to_dot(&topology))?;
    write_json(
        &out.join("masks.json"),
        &MaskDocument::new(&found.outcome.best_checkpoint().logits, &topology, &layout),
    )?;
    let mut text = format!(
        "{} {} circuit, best epoch {}\n",
        run.config.task.name(),
        found.circuit.mode.name(),
        found.outcome.best_checkpoint().epoch
    );
    text.push_str(&report.to_table());
    fs::write(out.join("report.txt"), &text)?;
    write_json(&out.join("report.json"), &report)?;
    found.outcome.write_log(BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?))?;
    Ok(DiscoverOutput {
        report,
        circuit: circuit_path,
        report_text: text,
    })
}

pub fn cmd_compare(a: &Path, b: &Path) -> CliResult<OverlapReport> {
    Ok(overlap_documents(&read_circuit_document(a)?, &read_circuit_document(b)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analysis {
    Heads,
    Importance,
    Edgesim,
    Sweep,
}

impl std::str::FromStr for Analysis {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "heads" => Ok(Analysis::Heads),
            "importance" => Ok(Analysis::Importance),
            "edgesim" => Ok(Analysis::Edgesim),
            "sweep" => Ok(Analysis::Sweep),
            other => Err(CliError::Usage(format!(
                "unknown analysis {other:?} (expected heads, importance, edgesim or sweep)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AnalyzeOptions {
    pub strategy: Option<AblationStrategy>,
    pub grid: Option<Vec<f64>>,
    pub mode: Option<MaskMode>,
}

/// Run one analysis, write its CSV and text table, and return the table.
pub fn cmd_analyze(run: &Run, analysis: Analysis, options: &AnalyzeOptions) -> CliResult<String> {
    let params = run.load_model()?;
    let topology = GraphTopology::build(&params.config);
    let splits = run.discovery_splits()?;
    let test = &splits.test.examples;
    let out = run.output_dir()?.to_path_buf();
    let (name, csv, text) = match analysis {
        Analysis::Heads => {
            let counts = head_layer_distribution(&run.load_circuit(&topology)?, &topology);
            let text = counts
                .iter()
                .enumerate()
                .map(|(l, c)| format!("layer {l}  {c:>3} heads\n"))
                .collect::<String>();
            ("heads".to_string(), heads_csv(&counts), text)
        }
        Analysis::Importance => {
            let drops = layer_ablation_importance(&params, &topology, &run.load_circuit(&topology)?, test)?;
            let text = drops
                .iter()
                .enumerate()
                .map(|(l, d)| format!("layer {l}  accuracy drop {:>7.2}%\n", 100.0 * d))
                .collect::<String>();
            ("importance".to_string(), importance_csv(&drops), text)
        }
        Analysis::Edgesim => {
            let strategies = match options.strategy {
                Some(s) => vec![s],
                None => AblationStrategy::all().to_vec(),
            };
            let seed = derive_seed(run.seed, Stream::Analysis);
            let results = strategies
                .iter()
                .map(|&s| edge_similarity_experiment(&params, &topology, test, s, seed))
                .collect::<discogp::Result<Vec<_>>>()?;
            let text = results
                .iter()
                .map(|r| format!("{:<12} {:.4}\n", r.strategy.name(), r.mean_cosine))
                .collect::<String>();
            let name = match options.strategy {
                Some(s) => format!("edgesim-{}", s.name()),
                None => "edgesim".to_string(),
            };
            (name, similarity_csv(&results), text)
        }
        Analysis::Sweep => {
            let grid = options.grid.clone().unwrap_or_else(|| run.config.analysis.sweep_grid.clone());
            let mut base = run.train_config();
            if let Some(m) = options.mode {
                base.mode = m;
            }
            let sweep: Sweep = sparsity_sweep(&params, &splits, &base, &grid)?;
            write_json(&out.join(format!("sweep-{}.json", base.mode.name())), &sweep)?;
            let mut text = format!("{:>10} {:>8} {:>8} {:>8} {:>9}\n", "lambda_s", "weight", "node", "edge", "accuracy");
            for p in sweep.sorted_by_density() {
                text.push_str(&format!(
                    "{:>10} {:>8.2} {:>8.2} {:>8.2} {:>9.4}\n",
                    p.lambda_s,
                    p.weight_density,
                    p.node_density,
                    p.edge_density,
                    p.accuracy
                ));
            }
            if sweep.violations > 0 {
                text.push_str(&format!("{} monotonicity violations\n", sweep.violations));
            }
            (format!("sweep-{}", base.mode.name()), sweep.to_csv(), text)
        }
    };
    fs::write(out.join(format!("{name}.csv")), &csv)?;
    fs::write(out.join(format!("{name}.txt")), &text)?;
    Ok(text)
}

/// Write the circuit as Graphviz DOT to `out`, or next to the circuit.
pub fn cmd_export_dot(run: &Run, out: Option<&Path>) -> CliResult<PathBuf> {
    let topology = GraphTopology::build(&run.model_config());
    let circuit = run.load_circuit(&topology)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run.circuit_path().with_extension("dot"));
    fs::write(&path, circuit.to_dot(&topology))?;
    Ok(path)
}

pub fn overlap_table(r: &OverlapReport) -> String {
    r.to_table()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path) -> RunConfig {
        RunConfig {
            task: Suite::Agreement,
            seed: Some(3),
            model: ModelShape::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            analysis: AnalysisConfig::default(),
            paths: Paths {
                model: dir.join("m.bin"),
                output: dir.join("out"),
                dataset: None,
                pretrain_dataset: None,
                circuit: None,
            },
        }
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        let a = derive_seed(1, Stream::Training);
        assert_eq!(a, derive_seed(1, Stream::Training));
        assert_ne!(a, derive_seed(1, Stream::Analysis));
        assert_ne!(a, derive_seed(2, Stream::Training));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"task": "ioi", "seed": 4, "paths": {"model": "m.bin", "output": "out"}}"#;
        let path = dir.path().join("run.json");
        fs::write(&path, text).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.paths.model, dir.path().join("m.bin"));
        assert_eq!(c.task, Suite::Ioi);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"task": "ioi", "paths": {"model": "m", "output": "o"}, "sed": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Usage(_))));
    }

    #[test]
    fn seed_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path());
        assert_eq!(c.clone().into_run(Some(9)).unwrap().seed, 9);
        assert_eq!(c.clone().into_run(None).unwrap().seed, 3);
        c.seed = None;
        if std::env::var(SEED_ENV).is_err() {
            assert!(matches!(c.into_run(None), Err(CliError::Usage(_))));
        }
    }

    #[test]
    fn missing_artifacts_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path());
        c.paths.dataset = Some(dir.path().join("absent.jsonl"));
        let run = c.into_run(None).unwrap();
        assert!(matches!(run.load_model(), Err(CliError::Usage(_))));
        assert!(matches!(run.discovery_splits(), Err(CliError::Usage(_))));
        assert_eq!(CliError::Usage(String::new()).exit_status(), 2);
    }

    #[test]
    fn analysis_names() {
        assert_eq!("edgesim".parse::<Analysis>().unwrap(), Analysis::Edgesim);
        assert!(matches!("plot".parse::<Analysis>(), Err(CliError::Usage(_))));
    }
}
