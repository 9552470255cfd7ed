//! DiscoGP: circuit discovery in toy transformers by jointly pruning weights
//! and computation-graph edges with learnable binary masks.

pub mod autodiff;
pub mod error;
pub mod evaluator;
pub mod hexfloat;
pub mod infer;
pub mod mask;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pruner;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
pub use evaluator::{AblationStrategy, Discovery, EdgeSimilarity, EvalReport, OverlapReport, Sweep, SweepPoint};
pub use infer::MaskedModel;
pub use mask::{MaskLogits, MaskMode, SampledMasks};
pub use model::{GraphTopology, ModelConfig, ModelParams, WeightLayout};
pub use pruner::{Circuit, CircuitDocument, DensityReport};
pub use taskgen::pretrain::{PretrainConfig, PretrainReport};
pub use taskgen::{SplitFractions, Splits, Suite, TaskDataset, TaskExample, Vocabulary};
pub use trainer::{NoisePolicy, TrainConfig, TrainOutcome};
