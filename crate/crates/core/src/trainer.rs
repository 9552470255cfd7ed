//! Mask-logit optimization: label distillation, the stochastic training step,
//! joint-mode phase alternation and best-checkpoint selection.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape};
use crate::error::{Error, Result};
use crate::infer::MaskedModel;
use crate::mask::{
    deterministic_binarize, reverse, sample_on_tape, LogitVars, MaskLogits, MaskMode, MaskNoise, SampledMasks,
    DEFAULT_INIT_LOGIT, DEFAULT_TEMPERATURE,
};
use crate::model::{graph_forward, Batch, GraphTopology, ModelParams, NodeKind, TapeParams, WeightLayout};
use crate::objectives::{
    complete_loss_tape, faith_loss_tape, sparse_loss_tape, total_loss, LossBreakdown,
    DEFAULT_LAMBDA_C, DEFAULT_LAMBDA_S,
};
use crate::optim::{Adam, AdamConfig};
use crate::taskgen::{SplitFractions, Splits, TaskDataset, TaskExample};

/// How often fresh mask noise is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePolicy {
    /// One sample per example, each on its own tape.
    PerExample,
    /// One sample shared by the whole batch.
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub temperature: f64,
    pub init_logit: f64,
    pub mode: MaskMode,
    pub seed: u64,
    /// Epochs per phase when joint training alternates families.
    pub alternate_period: usize,
    pub checkpoint_every: usize,
    /// First epoch eligible for a saved checkpoint. The final epoch is always
    /// saved.
    pub save_from_epoch: usize,
    pub noise: NoisePolicy,
    pub split: SplitFractions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.1,
            lambda_c: DEFAULT_LAMBDA_C,
            lambda_s: DEFAULT_LAMBDA_S,
            temperature: DEFAULT_TEMPERATURE,
            init_logit: DEFAULT_INIT_LOGIT,
            mode: MaskMode::Joint,
            seed: 0,
            alternate_period: 1,
            checkpoint_every: 1,
            save_from_epoch: 0,
            noise: NoisePolicy::PerExample,
            split: SplitFractions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size == 0
            || self.alternate_period == 0
            || self.checkpoint_every == 0
        {
            return Err(Error::Config(
                "epochs, batch_size, alternate_period and checkpoint_every must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_s", self.lambda_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !self.init_logit.is_finite() {
            return Err(Error::Config("init_logit must be finite".into()));
        }
        Ok(())
    }

    /// Which families move during `epoch`.
    pub fn phase(&self, epoch: usize) -> Phase {
        match self.mode {
            MaskMode::Joint if (epoch / self.alternate_period).is_multiple_of(2) => Phase::Weights,
            MaskMode::Joint => Phase::Edges,
            MaskMode::WeightOnly | MaskMode::NodeShared => Phase::Weights,
            MaskMode::EdgeOnly => Phase::Edges,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            faith_weight: 1.0,
            lambda_c: self.lambda_c,
            lambda_s: self.lambda_s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Weights,
    Edges,
}

/// Coefficients of the training objective. `faith_weight` is 1 in training;
/// setting it to 0 cuts the faithfulness gradient while still reporting it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub faith_weight: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

/// Reference label per example: the full model's argmax candidate index,
/// ties to the lowest token id.
pub fn distill_reference_labels(
    model: &ModelParams,
    topology: &GraphTopology,
    examples: &[TaskExample],
) -> Result<Vec<usize>> {
    MaskedModel::dense(model).predict(topology, examples)
}

/// Treatment of straight-through offsets across evaluations of the objective.
pub enum DetachMode<'a> {
    Live,
    /// Store each example tape's detached values.
    Record(&'a mut Vec<Vec<Matrix>>),
    /// Reuse stored values so the hard threshold is frozen.
    Replay(&'a [Vec<Matrix>]),
}

/// Loss and gradients in stored-logit layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveEval {
    pub losses: LossBreakdown,
    pub weight_grads: Vec<f64>,
    pub edge_grads: Vec<f64>,
    /// Completeness probabilities raised to the floor.
    pub clamped: usize,
}

/// Evaluate the objective on `examples` with frozen `noise` (one entry per
/// example, or a single shared entry), and its gradients for the families
/// selected by `trainable`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    model: &ModelParams,
    topology: &GraphTopology,
    layout: &WeightLayout,
    logits: &MaskLogits,
    examples: &[&TaskExample],
    targets: &[usize],
    noise: &[MaskNoise],
    objective: Objective,
    trainable: (bool, bool),
    mut detach: DetachMode<'_>,
) -> Result<ObjectiveEval> {
    let b = examples.len();
    if b == 0 || targets.len() != b {
        return Err(Error::Input("objective needs a non-empty batch with one target each".into()));
    }
    let groups: Vec<(usize, Vec<usize>)> = if noise.len() == 1 {
        vec![(0, (0..b).collect())]
    } else if noise.len() == b {
        (0..b).map(|i| (i, vec![i])).collect()
    } else {
        return Err(Error::Input(format!("{} noise samples for {b} examples", noise.len())));
    };
    if let DetachMode::Replay(v) = &detach {
        if v.len() != groups.len() {
            return Err(Error::Input("replay values do not match the noise groups".into()));
        }
    }
    let (tw, te) = trainable;
    let mut gw = vec![0.0; logits.weight_logits.len()];
    let mut ge = vec![0.0; logits.edge_logits.len()];
    let (mut faith, mut complete, mut clamped) = (0.0, 0.0, 0);
    for (g, (noise_idx, members)) in groups.iter().enumerate() {
        let mut tape = match &detach {
            DetachMode::Live => Tape::new(),
            DetachMode::Record(_) => Tape::recording_detach(),
            DetachMode::Replay(v) => Tape::replaying_detach(v[g].clone()),
        };
        let share = members.len() as f64 / b as f64;
        let params = TapeParams::constants(&mut tape, model);
        let vars = LogitVars::record(&mut tape, logits, layout, tw, te);
        let masks = sample_on_tape(&mut tape, &vars, logits, &noise[*noise_idx], layout)?;
        let prompts: Vec<&[usize]> = members.iter().map(|&i| examples[i].prompt.as_slice()).collect();
        let batch = Batch::new(&prompts, &model.config)?;
        let circuit = graph_forward(&mut tape, topology, &params, &batch, &masks.circuit)?;
        let tokens: Vec<usize> = members
            .iter()
            .map(|&i| examples[i].candidates[targets[i]])
            .collect();
        let f = faith_loss_tape(&mut tape, circuit.logits, &tokens)?;
        let complement = graph_forward(&mut tape, topology, &params, &batch, &masks.complement)?;
        let cands: Vec<Vec<usize>> = members.iter().map(|&i| examples[i].candidates.clone()).collect();
        let before = tape.clamp_hits();
        let c = complete_loss_tape(&mut tape, complement.logits, &cands)?;
        clamped += tape.clamp_hits() - before;
        faith += share * tape.scalar(f);
        complete += share * tape.scalar(c);
        let wf = tape.affine(f, share * objective.faith_weight, 0.0)?;
        let wc = tape.affine(c, share * objective.lambda_c, 0.0)?;
        let root = tape.add(wf, wc)?;
        if tw || te {
            let grads = tape.backward(root)?;
            let (a, e) = vars.gradients(&tape, &grads, logits);
            gw.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
            ge.iter_mut().zip(&e).for_each(|(x, y)| *x += y);
        }
        if let DetachMode::Record(store) = &mut detach {
            store.push(tape.detached_values().to_vec());
        }
    }
    let mut tape = Tape::new();
    let vars = LogitVars::record(&mut tape, logits, layout, tw, te);
    let s = sparse_loss_tape(&mut tape, &vars, logits.mode, topology, layout)?;
    let sparse = tape.scalar(s);
    if (tw || te) && objective.lambda_s != 0.0 {
        let root = tape.affine(s, objective.lambda_s, 0.0)?;
        let grads = tape.backward(root)?;
        let (a, e) = vars.gradients(&tape, &grads, logits);
        gw.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        ge.iter_mut().zip(&e).for_each(|(x, y)| *x += y);
    }
    let mut losses = total_loss(faith, complete, sparse, objective.lambda_c, objective.lambda_s);
    losses.total = objective.faith_weight * faith + objective.lambda_c * complete + objective.lambda_s * sparse;
    Ok(ObjectiveEval {
        losses,
        weight_grads: gw,
        edge_grads: ge,
        clamped,
    })
}

/// Whether hard masks stack two zero-read layer norms: a normalized node
/// whose read is exactly zero although an in-edge is open, so its only
/// inputs are other zeroed nodes. Each zero read multiplies a perturbation
/// by `1/√ε`, and two of them bend the frozen-offset objective on a scale
/// far below any practical difference step.
pub fn stacked_zero_reads(topology: &GraphTopology, layout: &WeightLayout, masks: &SampledMasks) -> bool {
    let n = topology.num_nodes();
    let mut zero = vec![false; n];
    let weightless = |node: usize| layout.node_range(node).is_some_and(|r| masks.weights[r].iter().all(|&w| w == 0.0));
    for node in 0..n {
        let kind = topology.node(node);
        zero[node] = match kind {
            NodeKind::Input => false,
            NodeKind::AttnOutput { .. } => {
                let [_, _, v] = topology.head_sources(node).expect("head output has sources");
                zero[v] || weightless(node)
            }
            _ => {
                let ins = topology.in_edges(node);
                let read_zero = ins.iter().all(|&e| masks.edges[e] == 0.0 || zero[topology.edges()[e].writer]);
                if read_zero && ins.iter().any(|&e| masks.edges[e] == 1.0) {
                    return true;
                }
                read_zero || weightless(node)
            }
        };
    }
    false
}

/// [`stacked_zero_reads`] for the circuit or complement pass under `noise`.
pub fn degenerate_noise(topology: &GraphTopology, layout: &WeightLayout, logits: &MaskLogits, noise: &MaskNoise) -> bool {
    let hard = noise.hard_masks(logits, topology, layout);
    stacked_zero_reads(topology, layout, &hard) || stacked_zero_reads(topology, layout, &reverse(&hard))
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// Stored-logit index of the worst entry; edges follow the weights.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor of the relative error, so gradients that vanish
/// compare on an absolute scale.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Compare the objective's gradient with central differences of step `h`
/// for every stored logit. Noise and straight-through offsets are frozen at
/// their values for `logits`, so the objective is smooth in each logit.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &ModelParams,
    topology: &GraphTopology,
    layout: &WeightLayout,
    logits: &MaskLogits,
    examples: &[&TaskExample],
    targets: &[usize],
    noise: &[MaskNoise],
    objective: Objective,
    h: f64,
) -> Result<GradientCheck> {
    let (tw, te) = (logits.mode.learns_weights(), logits.mode.learns_edges());
    let mut offsets = Vec::new();
    let base = evaluate_objective(
        model, topology, layout, logits, examples, targets, noise, objective, (tw, te),
        DetachMode::Record(&mut offsets),
    )?;
    let analytic: Vec<f64> = base.weight_grads.iter().chain(&base.edge_grads).copied().collect();
    let nw = logits.weight_logits.len();
    let loss_at = |k: usize, delta: f64| -> Result<f64> {
        let mut l = logits.clone();
        if k < nw {
            l.weight_logits[k] += delta;
        } else {
            l.edge_logits[k - nw] += delta;
        }
        let e = evaluate_objective(
            model, topology, layout, &l, examples, targets, noise, objective, (false, false),
            DetachMode::Replay(&offsets),
        )?;
        Ok(e.losses.total)
    };
    let mut worst = GradientCheck {
        max_relative_error: 0.0,
        worst: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (k, &a) in analytic.iter().enumerate() {
        let learned = if k < nw { tw } else { te };
        if !learned {
            continue;
        }
        let numeric = (loss_at(k, h)? - loss_at(k, -h)?) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
        worst.checked += 1;
        if rel > worst.max_relative_error || worst.checked == 1 {
            worst = GradientCheck {
                max_relative_error: rel,
                worst: k,
                analytic: a,
                numeric,
                checked: worst.checked,
            };
        }
    }
    Ok(worst)
}

/// Mask logits with one optimizer per family.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub logits: MaskLogits,
    weight_opt: Adam,
    edge_opt: Adam,
}

impl TrainState {
    pub fn new(logits: MaskLogits, learning_rate: f64) -> Self {
        let cfg = AdamConfig::with_lr(learning_rate);
        TrainState {
            weight_opt: Adam::new(logits.weight_logits.len(), cfg),
            edge_opt: Adam::new(logits.edge_logits.len(), cfg),
            logits,
        }
    }
}

/// Everything a step needs besides the batch.
pub struct StepContext<'a> {
    pub model: &'a ModelParams,
    pub topology: &'a GraphTopology,
    pub layout: &'a WeightLayout,
    pub objective: Objective,
    pub noise: NoisePolicy,
}

/// One stochastic update of the families active in `phase`. The model is
/// read-only.
pub fn train_step<R: Rng + ?Sized>(
    ctx: &StepContext<'_>,
    state: &mut TrainState,
    examples: &[&TaskExample],
    targets: &[usize],
    phase: Phase,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let draws = match ctx.noise {
        NoisePolicy::PerExample => examples.len(),
        NoisePolicy::PerBatch => 1,
    };
    let noise: Vec<MaskNoise> = (0..draws).map(|_| MaskNoise::draw(&state.logits, rng)).collect();
    let mode = state.logits.mode;
    let tw = phase == Phase::Weights && mode.learns_weights();
    let te = phase == Phase::Edges && mode.learns_edges();
    let eval = evaluate_objective(
        ctx.model,
        ctx.topology,
        ctx.layout,
        &state.logits,
        examples,
        targets,
        &noise,
        ctx.objective,
        (tw, te),
        DetachMode::Live,
    )?;
    if !eval.losses.total.is_finite() {
        return Err(Error::Contract(format!("non-finite loss {:?}", eval.losses)));
    }
    if tw {
        state.weight_opt.step(&mut state.logits.weight_logits, &eval.weight_grads);
    }
    if te {
        state.edge_opt.step(&mut state.logits.edge_logits, &eval.edge_grads);
    }
    Ok(eval.losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub logits: MaskLogits,
    pub validation_accuracy: f64,
    pub losses: LossBreakdown,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub losses: LossBreakdown,
    /// Deterministic-mask densities as fractions.
    pub weight_density: f64,
    pub edge_density: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub best: usize,
    pub log: Vec<TrainRecord>,
    pub splits: Splits,
    pub dense_validation_accuracy: f64,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints[self.best]
    }

    pub fn write_log<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for r in &self.log {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Index of the highest accuracy; ties go to the later entry.
pub fn select_best(accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in accuracies.iter().enumerate() {
        if best.is_none_or(|b| a >= accuracies[b]) {
            best = Some(i);
        }
    }
    best
}

/// Split `dataset` by the config's fractions and seed, then train.
pub fn train(model: &ModelParams, dataset: &TaskDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let splits = dataset.split(config.split, config.seed)?;
    train_on_splits(model, splits, config)
}

pub fn train_on_splits(model: &ModelParams, splits: Splits, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if splits.train.is_empty() || splits.validation.is_empty() || splits.test.is_empty() {
        return Err(Error::Config(format!(
            "every split must be non-empty (train {}, validation {}, test {})",
            splits.train.len(),
            splits.validation.len(),
            splits.test.len()
        )));
    }
    let topology = GraphTopology::build(&model.config);
    let layout = WeightLayout::new(&model.config, &topology);
    for d in [&splits.train, &splits.validation, &splits.test] {
        d.validate(model.config.vocab)?;
    }
    let targets = distill_reference_labels(model, &topology, &splits.train.examples)?;
    let dense_validation_accuracy =
        MaskedModel::dense(model).accuracy(&topology, &splits.validation.examples)?;
    let logits = MaskLogits::new(config.mode, config.temperature, config.init_logit, &topology, &layout)?;
    let mut state = TrainState::new(logits, config.learning_rate);
    let ctx = StepContext {
        model,
        topology: &topology,
        layout: &layout,
        objective: config.objective(),
        noise: config.noise,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let phase = config.phase(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<&TaskExample> = chunk.iter().map(|&i| &splits.train.examples[i]).collect();
            let batch_targets: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let losses = train_step(&ctx, &mut state, &examples, &batch_targets, phase, &mut rng)
                .map_err(|e| match e {
                    Error::Contract(detail) if detail.starts_with("non-finite loss") => {
                        Error::NonFiniteLoss {
                            epoch,
                            step,
                            detail: format!("{detail}; batch {}", dump_batch(&examples)),
                        }
                    }
                    other => other,
                })?;
            let w = chunk.len() as f64 / order.len() as f64;
            sum.faith += w * losses.faith;
            sum.complete += w * losses.complete;
            sum.sparse += w * losses.sparse;
            sum.total += w * losses.total;
            step += 1;
        }
        sum.lambda_c = config.lambda_c;
        sum.lambda_s = config.lambda_s;
        let det = deterministic_binarize(&state.logits, &topology, &layout);
        let last = epoch + 1 == config.epochs;
        let save = last || (epoch >= config.save_from_epoch && (epoch + 1) % config.checkpoint_every == 0);
        let mut record = TrainRecord {
            epoch,
            phase,
            losses: sum,
            weight_density: det.weight_density(),
            edge_density: det.edge_density(),
            validation_accuracy: None,
        };
        if save {
            let circuit = MaskedModel::new(model, Some(&det.weights), Some(&det.edges))?;
            let acc = circuit.accuracy(&topology, &splits.validation.examples)?;
            record.validation_accuracy = Some(acc);
            checkpoints.push(Checkpoint {
                epoch,
                logits: state.logits.clone(),
                validation_accuracy: acc,
                losses: sum,
            });
        }
        log::info!(
            "epoch {epoch} {phase:?}: loss {:.4} (faith {:.4} complete {:.4} sparse {:.4}) density w {:.4} e {:.4} val {:?}",
            sum.total,
            sum.faith,
            sum.complete,
            sum.sparse,
            record.weight_density,
            record.edge_density,
            record.validation_accuracy
        );
        log.push(record);
    }
    let accs: Vec<f64> = checkpoints.iter().map(|c| c.validation_accuracy).collect();
    let best = select_best(&accs).expect("final epoch is always saved");
    Ok(TrainOutcome {
        checkpoints,
        best,
        log,
        splits,
        dense_validation_accuracy,
    })
}

fn dump_batch(examples: &[&TaskExample]) -> String {
    let parts: Vec<String> = examples
        .iter()
        .map(|e| format!("{}:{:?}->{:?}", e.template_id, e.prompt, e.candidates))
        .collect();
    parts.join("; ")
}

/// Flat stored logits as a `1×n` matrix, handy for finite differences.
pub fn as_row(v: &[f64]) -> Matrix {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> (ModelParams, GraphTopology, WeightLayout) {
        let cfg = ModelConfig {
            layers: 1,
            heads: 1,
            d_model: 8,
            d_head: 8,
            d_ff: 8,
            vocab: 6,
            max_seq: 6,
        };
        let p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let t = GraphTopology::build(&cfg);
        let l = WeightLayout::new(&cfg, &t);
        (p, t, l)
    }

    fn examples() -> Vec<TaskExample> {
        (0..6)
            .map(|i| TaskExample {
                prompt: vec![1, 2 + i % 2, 4],
                candidates: vec![2, 3],
                gold: i % 2,
                corrupted: vec![1, 3 - i % 2, 4],
                template_id: "toy".into(),
            })
            .collect()
    }

    #[test]
    fn best_ties_prefer_later() {
        assert_eq!(select_best(&[0.8, 0.9]), Some(1));
        assert_eq!(select_best(&[0.9, 0.8]), Some(0));
        assert_eq!(select_best(&[0.5, 0.7, 0.7]), Some(2));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn joint_phases_alternate() {
        let c = TrainConfig {
            alternate_period: 2,
            ..Default::default()
        };
        let phases: Vec<Phase> = (0..5).map(|e| c.phase(e)).collect();
        use Phase::*;
        assert_eq!(phases, vec![Weights, Weights, Edges, Edges, Weights]);
        let c = TrainConfig {
            mode: MaskMode::EdgeOnly,
            ..Default::default()
        };
        assert_eq!(c.phase(0), Edges);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { lambda_s: -1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn constant_model_distills_lowest_token() {
        let (mut p, t, _) = tiny();
        p.unembed.fill(0.0);
        let mut ex = examples();
        ex[0].candidates = vec![3, 2];
        let y = distill_reference_labels(&p, &t, &ex).unwrap();
        assert_eq!(y[0], 1);
        assert!(y[1..].iter().all(|&k| k == 0));
    }

    #[test]
    fn saturated_logits_do_not_move() {
        let (p, t, l) = tiny();
        let ex = examples();
        let refs: Vec<&TaskExample> = ex.iter().collect();
        let y = distill_reference_labels(&p, &t, &ex).unwrap();
        let logits = MaskLogits::new(MaskMode::WeightOnly, 0.5, 40.0, &t, &l).unwrap();
        let mut state = TrainState::new(logits.clone(), 0.1);
        let ctx = StepContext {
            model: &p,
            topology: &t,
            layout: &l,
            objective: Objective { faith_weight: 1.0, lambda_c: 0.0, lambda_s: 0.0 },
            noise: NoisePolicy::PerExample,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(&ctx, &mut state, &refs, &y, Phase::Weights, &mut rng).unwrap();
        for (a, b) in state.logits.weight_logits.iter().zip(&logits.weight_logits) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn sparsity_alone_lowers_every_logit() {
        let (p, t, l) = tiny();
        let ex = examples();
        let refs: Vec<&TaskExample> = ex.iter().collect();
        let y = distill_reference_labels(&p, &t, &ex).unwrap();
        for mode in [MaskMode::WeightOnly, MaskMode::EdgeOnly, MaskMode::NodeShared] {
            let logits = MaskLogits::new(mode, 0.5, 1.0, &t, &l).unwrap();
            let mut state = TrainState::new(logits.clone(), 0.1);
            let ctx = StepContext {
                model: &p,
                topology: &t,
                layout: &l,
                objective: Objective { faith_weight: 0.0, lambda_c: 0.0, lambda_s: 1.0 },
                noise: NoisePolicy::PerBatch,
            };
            let phase = TrainConfig { mode, ..Default::default() }.phase(0);
            train_step(&ctx, &mut state, &refs, &y, phase, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let moved: Vec<(f64, f64)> = if mode.learns_weights() {
                state.logits.weight_logits.iter().copied().zip(logits.weight_logits.iter().copied()).collect()
            } else {
                state.logits.edge_logits.iter().copied().zip(logits.edge_logits.iter().copied()).collect()
            };
            assert!(!moved.is_empty());
            // Adam's first step is close to lr·sign(g).
            assert!(moved.iter().all(|&(a, b)| a < b && (a - (b - 0.1)).abs() < 1e-3), "{mode:?}");
        }
    }

    #[test]
    fn single_logit_adam_step_matches_hand_arithmetic() {
        let (p, t, l) = tiny();
        let ex = examples();
        let refs: Vec<&TaskExample> = ex[..1].iter().collect();
        let y = distill_reference_labels(&p, &t, &ex[..1]).unwrap();
        let logits = MaskLogits::new(MaskMode::NodeShared, 0.5, 0.3, &t, &l).unwrap();
        let objective = Objective { faith_weight: 1.0, lambda_c: 0.5, lambda_s: 1.0 };
        let noise = vec![MaskNoise::zero(&logits)];
        let eval = evaluate_objective(
            &p, &t, &l, &logits, &refs, &y, &noise, objective, (true, false), DetachMode::Live,
        )
        .unwrap();
        let mut adam = Adam::new(logits.weight_logits.len(), AdamConfig::with_lr(0.1));
        let mut updated = logits.weight_logits.clone();
        adam.step(&mut updated, &eval.weight_grads);
        for (k, (&before, &after)) in logits.weight_logits.iter().zip(&updated).enumerate() {
            let g = eval.weight_grads[k];
            // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps).
            let expect = before - 0.1 * g / (g.abs() + 1e-8);
            assert!((after - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn training_leaves_model_untouched_and_is_deterministic() {
        let (p, _, _) = tiny();
        let mut ex = Vec::new();
        for i in 0..64 {
            let (a, b, c) = (2 + i % 4, 2 + (i / 4) % 4, 2 + i / 16);
            ex.push(TaskExample {
                prompt: vec![1, a, b, c],
                candidates: vec![2, 3],
                gold: (a + b + c) % 2,
                corrupted: vec![1, b, a, c],
                template_id: "toy".into(),
            });
        }
        let d = TaskDataset::new(ex);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let before = p.clone();
        let a = train(&p, &d, &cfg).unwrap();
        assert_eq!(p, before);
        let b = train(&p, &d, &cfg).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.checkpoints.len(), 3);
        let one = train(&p, &d, &TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
        assert_eq!(one.checkpoints.len(), 1);
        assert_eq!(one.best, 0);
        let mut buf = Vec::new();
        a.write_log(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn joint_phase_freezes_the_other_family() {
        let (p, t, l) = tiny();
        let ex = examples();
        let refs: Vec<&TaskExample> = ex.iter().collect();
        let y = distill_reference_labels(&p, &t, &ex).unwrap();
        let logits = MaskLogits::new(MaskMode::Joint, 0.5, 1.0, &t, &l).unwrap();
        let ctx = StepContext {
            model: &p,
            topology: &t,
            layout: &l,
            objective: Objective { faith_weight: 1.0, lambda_c: 0.5, lambda_s: 1.0 },
            noise: NoisePolicy::PerExample,
        };
        let mut state = TrainState::new(logits.clone(), 0.1);
        train_step(&ctx, &mut state, &refs, &y, Phase::Weights, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(state.logits.edge_logits, logits.edge_logits);
        assert_ne!(state.logits.weight_logits, logits.weight_logits);
        let snapshot = state.logits.clone();
        train_step(&ctx, &mut state, &refs, &y, Phase::Edges, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(state.logits.weight_logits, snapshot.weight_logits);
        assert_ne!(state.logits.edge_logits, snapshot.edge_logits);
    }
}
