//! Faithfulness, completeness and sparsity losses, both as plain functions of
//! values and as tape expressions used for training.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{LogitVars, MaskLogits, MaskMode};
use crate::model::{GraphTopology, WeightLayout};

pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_LAMBDA_C: f64 = 0.5;
pub const DEFAULT_LAMBDA_S: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub faith: f64,
    pub complete: f64,
    pub sparse: f64,
    pub total: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

pub fn total_loss(faith: f64, complete: f64, sparse: f64, lambda_c: f64, lambda_s: f64) -> LossBreakdown {
    LossBreakdown {
        faith,
        complete,
        sparse,
        total: faith + lambda_c * complete + lambda_s * sparse,
        lambda_c,
        lambda_s,
    }
}

/// Batch mean of `−log p(ŷ | x)`.
pub fn faith_loss(logprobs: &[f64]) -> f64 {
    if logprobs.is_empty() {
        return 0.0;
    }
    -logprobs.iter().sum::<f64>() / logprobs.len() as f64
}

/// Batch mean of the cross-entropy between the uniform label distribution and
/// each example's label-renormalized probabilities. Returns the loss and the
/// number of probabilities raised to [`PROB_FLOOR`].
pub fn complete_loss(label_probs: &[Vec<f64>]) -> (f64, usize) {
    if label_probs.is_empty() {
        return (0.0, 0);
    }
    let mut clamped = 0;
    let mut total = 0.0;
    for p in label_probs {
        let z: f64 = p.iter().sum();
        let k = p.len() as f64;
        for &v in p {
            let q = v / z;
            let q = if q.is_nan() || q < PROB_FLOOR {
                clamped += 1;
                PROB_FLOOR
            } else {
                q
            };
            total -= q.ln() / k;
        }
    }
    (total / label_probs.len() as f64, clamped)
}

/// Expected weight density plus expected edge density. Families a mode forces
/// open contribute 1.
pub fn sparse_loss(logits: &MaskLogits, topology: &GraphTopology, layout: &WeightLayout) -> f64 {
    let weights = match logits.mode {
        MaskMode::EdgeOnly => 1.0,
        MaskMode::Joint | MaskMode::WeightOnly => mean_sigmoid(&logits.weight_logits),
        MaskMode::NodeShared => {
            let mut acc = 0.0;
            for (k, &node) in topology.weight_owners().iter().enumerate() {
                let n = layout.node_range(node).expect("owner has weights").len();
                acc += n as f64 * sigmoid(logits.weight_logits[k]);
            }
            acc / layout.total() as f64
        }
    };
    let edges = if logits.mode.learns_edges() {
        mean_sigmoid(&logits.edge_logits)
    } else {
        1.0
    };
    weights + edges
}

fn mean_sigmoid(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|&l| sigmoid(l)).sum::<f64>() / v.len() as f64
}

/// `batch×V` logits to the mean negative log-likelihood of `targets`.
pub fn faith_loss_tape(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather_elements(lp, targets.iter().copied().enumerate().collect())?;
    let mean = tape.mean(picked)?;
    tape.affine(mean, -1.0, 0.0)
}

/// Completeness loss over the candidate sets, renormalized per example.
pub fn complete_loss_tape(tape: &mut Tape, logits: Var, candidates: &[Vec<usize>]) -> Result<Var> {
    let b = candidates.len();
    if b == 0 || tape.value(logits).nrows() != b {
        return Err(Error::Input("candidate sets must match the batch".into()));
    }
    let lp = tape.log_softmax(logits)?;
    let pairs: Vec<(usize, usize)> = candidates
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.iter().map(move |&t| (i, t)))
        .collect();
    let n = pairs.len();
    let picked = tape.gather_elements(lp, pairs.clone())?;
    // Per-example log-sum-exp with a constant shift for stability.
    let values = tape.value(picked).clone();
    let mut shift = vec![f64::NEG_INFINITY; b];
    for (r, &(i, _)) in pairs.iter().enumerate() {
        shift[i] = shift[i].max(values[[r, 0]]);
    }
    let group = Array2::from_shape_fn((b, n), |(i, r)| if pairs[r].0 == i { 1.0 } else { 0.0 });
    let shift_rows = Array2::from_shape_fn((n, 1), |(r, _)| shift[pairs[r].0]);
    let shift_rows = tape.constant(shift_rows);
    let centered = tape.sub(picked, shift_rows)?;
    let e = tape.exp(centered)?;
    let group_t = tape.constant(group.t().to_owned());
    let group = tape.constant(group);
    let sums = tape.matmul(group, e)?;
    let log_sums = tape.log(sums)?;
    let shift_col = tape.constant(Array2::from_shape_vec((b, 1), shift).expect("column"));
    let lse = tape.add(log_sums, shift_col)?;
    let lse_rows = tape.matmul(group_t, lse)?;
    let renorm = tape.sub(picked, lse_rows)?;
    let floored = tape.clamp_min(renorm, PROB_FLOOR.ln())?;
    let weights = Array2::from_shape_fn((1, n), |(_, r)| {
        1.0 / (candidates[pairs[r].0].len() as f64 * b as f64)
    });
    let weights = tape.constant(weights);
    let weighted = tape.matmul(weights, floored)?;
    tape.affine(weighted, -1.0, 0.0)
}

/// Sparsity loss over recorded logit vars.
pub fn sparse_loss_tape(
    tape: &mut Tape,
    vars: &LogitVars,
    mode: MaskMode,
    topology: &GraphTopology,
    layout: &WeightLayout,
) -> Result<Var> {
    let weights = match mode {
        MaskMode::EdgeOnly => tape.scalar_constant(1.0),
        MaskMode::Joint | MaskMode::WeightOnly => {
            let mut acc: Option<Var> = None;
            for &v in &vars.weights {
                let s = tape.sigmoid(v)?;
                let s = tape.sum(s)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, s)?,
                    None => s,
                });
            }
            let acc = acc.ok_or_else(|| Error::Contract("no weight logits recorded".into()))?;
            tape.affine(acc, 1.0 / layout.total() as f64, 0.0)?
        }
        MaskMode::NodeShared => {
            let sizes = Array2::from_shape_fn((topology.weight_owners().len(), 1), |(k, _)| {
                let node = topology.weight_owners()[k];
                layout.node_range(node).expect("owner has weights").len() as f64
                    / layout.total() as f64
            });
            let sizes = tape.constant(sizes);
            let s = tape.sigmoid(vars.weights[0])?;
            tape.matmul(s, sizes)?
        }
    };
    let edges = match vars.edges {
        Some(v) => {
            let s = tape.sigmoid(v)?;
            tape.mean(s)?
        }
        None => tape.scalar_constant(1.0),
    };
    tape.add(weights, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference;
    use crate::model::{build_topology, ModelConfig};

    fn setup() -> (GraphTopology, WeightLayout) {
        let c = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 4,
            d_head: 2,
            d_ff: 4,
            vocab: 5,
            max_seq: 4,
        };
        let t = build_topology(&c);
        let l = WeightLayout::new(&c, &t);
        (t, l)
    }

    #[test]
    fn faith_examples() {
        assert_eq!(faith_loss(&[0.0, 0.0]), 0.0);
        assert!((faith_loss(&[(0.1f64).ln()]) - 10f64.ln()).abs() < 1e-12);
        assert!((faith_loss(&[0.5f64.ln(), 0.25f64.ln()]) - 1.0397207708399179).abs() < 1e-12);
    }

    #[test]
    fn complete_examples() {
        let (l, c) = complete_loss(&[vec![0.5, 0.5]]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(c, 0);
        let (l, _) = complete_loss(&[vec![0.9, 0.1]]);
        assert!((l - 1.2039728043259361).abs() < 1e-12);
        assert!(complete_loss(&[vec![0.5, 0.5]]).0 < complete_loss(&[vec![0.99, 0.01]]).0);
        // Unnormalized inputs are renormalized over the labels.
        let (l, _) = complete_loss(&[vec![0.05, 0.05]]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (_, clamped) = complete_loss(&[vec![1.0, 0.0]]);
        assert_eq!(clamped, 1);
    }

    #[test]
    fn sparse_examples() {
        let (t, l) = setup();
        let mut logits = MaskLogits::new(MaskMode::Joint, 0.5, 0.0, &t, &l).unwrap();
        assert!((sparse_loss(&logits, &t, &l) - 1.0).abs() < 1e-15);
        logits.weight_logits.fill(-800.0);
        logits.edge_logits.fill(-800.0);
        assert!(sparse_loss(&logits, &t, &l) < 1e-300);
        let mut logits = MaskLogits::new(MaskMode::Joint, 0.5, 0.0, &t, &l).unwrap();
        for (i, v) in logits.weight_logits.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 2.0 } else { -2.0 };
        }
        assert!((sparse_loss(&logits, &t, &l) - 1.0).abs() < 1e-12);
        let sp = MaskLogits::new(MaskMode::WeightOnly, 0.5, 0.0, &t, &l).unwrap();
        assert!((sparse_loss(&sp, &t, &l) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.7, 2.0, 3.0, 0.0, 0.0).total, 1.7);
        assert!((total_loss(1.0, 2.0, 3.0, 0.5, 0.1).total - 2.3).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.5, 1.0).total, 0.0);
    }

    #[test]
    fn tape_losses_match_value_forms() {
        let logits = ndarray::array![[0.3, -1.0, 2.0, 0.5, 0.0], [1.0, 1.0, -2.0, 0.0, 3.0]];
        let cands = vec![vec![0usize, 2], vec![1, 3, 4]];
        let mut tape = Tape::new();
        let z = tape.param(logits.clone());
        let f = faith_loss_tape(&mut tape, z, &[2, 4]).unwrap();
        let c = complete_loss_tape(&mut tape, z, &cands).unwrap();
        let softmax = |row: usize| {
            let r = logits.row(row);
            let tot: f64 = r.iter().map(|v| v.exp()).sum();
            r.mapv(|v| v.exp() / tot)
        };
        let (p0, p1) = (softmax(0), softmax(1));
        let faith = faith_loss(&[p0[2].ln(), p1[4].ln()]);
        let (comp, _) = complete_loss(&[vec![p0[0], p0[2]], vec![p1[1], p1[3], p1[4]]]);
        assert!((tape.scalar(f) - faith).abs() < 1e-12);
        assert!((tape.scalar(c) - comp).abs() < 1e-12);

        let g = tape.backward(c).unwrap();
        let fd = finite_difference(
            |x| {
                let mut t = Tape::new();
                let z = t.param(x.clone());
                let c = complete_loss_tape(&mut t, z, &cands)?;
                Ok(t.scalar(c))
            },
            &logits,
            1e-5,
        )
        .unwrap();
        let diff = (g.get(z).unwrap() - &fd).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn tape_sparse_matches_value_form() {
        let (t, l) = setup();
        for mode in [MaskMode::Joint, MaskMode::WeightOnly, MaskMode::EdgeOnly, MaskMode::NodeShared] {
            let mut logits = MaskLogits::new(mode, 0.5, 0.0, &t, &l).unwrap();
            for (i, v) in logits.weight_logits.iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin() * 3.0;
            }
            for (i, v) in logits.edge_logits.iter_mut().enumerate() {
                *v = (i as f64 * 0.71).cos() * 2.0;
            }
            let mut tape = Tape::new();
            let vars = LogitVars::record(&mut tape, &logits, &l, true, true);
            let s = sparse_loss_tape(&mut tape, &vars, mode, &t, &l).unwrap();
            assert!((tape.scalar(s) - sparse_loss(&logits, &t, &l)).abs() < 1e-12, "{mode:?}");
            let g = tape.backward(s).unwrap();
            let (gw, ge) = vars.gradients(&tape, &g, &logits);
            // Lowering any learned logit lowers the loss.
            assert!(gw.iter().chain(&ge).all(|&v| v > 0.0));
        }
    }
}
