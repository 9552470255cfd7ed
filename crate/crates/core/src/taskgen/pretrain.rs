//! Dense training of the base model on gold completions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TaskDataset;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::infer::MaskedModel;
use crate::model::{graph_forward, Batch, ForwardMasks, GraphTopology, ModelConfig, ModelParams, TapeParams};
use crate::objectives::faith_loss_tape;
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub target_accuracy: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            target_accuracy: 0.97,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    pub heldout_accuracy: f64,
}

/// Train a fresh model until the held-out accuracy reaches the target.
/// Errors with the best accuracy seen if the epoch cap is hit first.
pub fn pretrain_base_model(
    model: ModelConfig,
    train: &TaskDataset,
    heldout: &TaskDataset,
    config: &PretrainConfig,
) -> Result<(ModelParams, PretrainReport)> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Config("pretraining needs non-empty train and held-out sets".into()));
    }
    if config.batch_size == 0 || config.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    train.validate(model.vocab)?;
    heldout.validate(model.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(model, &mut rng)?;
    let topology = GraphTopology::build(&model);
    let mut optims: Vec<Adam> = params
        .tensors()
        .iter()
        .map(|(_, m)| Adam::new(m.len(), AdamConfig::with_lr(config.learning_rate)))
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = PretrainReport {
        epochs: Vec::new(),
        heldout_accuracy: 0.0,
    };
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let examples: Vec<_> = chunk.iter().map(|&i| &train.examples[i]).collect();
            let prompts: Vec<&[usize]> = examples.iter().map(|e| e.prompt.as_slice()).collect();
            let targets: Vec<usize> = examples.iter().map(|e| e.gold_token()).collect();
            let mut tape = Tape::new();
            let tp = TapeParams::trainable(&mut tape, &params);
            let batch = Batch::new(&prompts, &model)?;
            let out = graph_forward(&mut tape, &topology, &tp, &batch, &ForwardMasks::open())?;
            let loss = faith_loss_tape(&mut tape, out.logits, &targets)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("pretraining loss {value}"),
                });
            }
            total += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let vars = tp.all();
            let mut flat: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| grads.get(v).map(|g| g.iter().copied().collect()).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
                .collect();
            if config.clip_norm > 0.0 {
                let norm = flat.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > config.clip_norm {
                    let scale = config.clip_norm / norm;
                    flat.iter_mut().flatten().for_each(|g| *g *= scale);
                }
            }
            for ((opt, tensor), g) in optims.iter_mut().zip(params.tensors_mut()).zip(&flat) {
                opt.step(tensor.as_slice_mut().expect("standard layout"), g);
            }
        }
        let acc = MaskedModel::dense(&params).accuracy(&topology, &heldout.examples)?;
        let loss = total / train.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {loss:.4} held-out accuracy {acc:.4}");
        report.epochs.push(PretrainEpoch {
            epoch,
            loss,
            heldout_accuracy: acc,
        });
        report.heldout_accuracy = acc;
        if acc >= config.target_accuracy {
            return Ok((params, report));
        }
    }
    let best = report.epochs.iter().map(|e| e.heldout_accuracy).fold(0.0, f64::max);
    Err(Error::PretrainingFailed {
        achieved: best,
        target: config.target_accuracy,
    })
}
