//! Learnable binary masks over maskable weights and edges.
//!
//! A score is `s = σ((l − log(log U₁ / log U₂)) / τ)` with `U₁, U₂` uniform on
//! the open unit interval. The binary mask is `m = detach(1[s > 0.5] − s) + s`,
//! which is exactly 0 or 1 in the forward pass and carries the gradient of `s`
//! backwards.
//!
//! Tied logits are stored once: under [`MaskMode::NodeShared`] there is one
//! weight logit per weight-owning node, and families a mode forces open store
//! no logits at all.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::hexfloat;
use crate::model::{ForwardMasks, GraphTopology, WeightLayout, WeightMasking};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Joint,
    WeightOnly,
    EdgeOnly,
    NodeShared,
}

impl MaskMode {
    pub fn learns_weights(self) -> bool {
        !matches!(self, MaskMode::EdgeOnly)
    }

    pub fn learns_edges(self) -> bool {
        matches!(self, MaskMode::Joint | MaskMode::EdgeOnly)
    }

    pub fn all() -> [MaskMode; 4] {
        [MaskMode::Joint, MaskMode::WeightOnly, MaskMode::EdgeOnly, MaskMode::NodeShared]
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Joint => "joint",
            MaskMode::WeightOnly => "weight-only",
            MaskMode::EdgeOnly => "edge-only",
            MaskMode::NodeShared => "node-shared",
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(MaskMode::Joint),
            "weight-only" => Ok(MaskMode::WeightOnly),
            "edge-only" => Ok(MaskMode::EdgeOnly),
            "node-shared" => Ok(MaskMode::NodeShared),
            other => Err(Error::Config(format!("unknown mask mode {other:?}"))),
        }
    }
}

pub const DEFAULT_INIT_LOGIT: f64 = 1.0;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Mask logits bound to one topology.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub mode: MaskMode,
    pub temperature: f64,
    /// Per weight scalar (layout order), per owner node under `NodeShared`,
    /// empty under `EdgeOnly`.
    pub weight_logits: Vec<f64>,
    /// Per maskable edge, empty unless the mode learns edges.
    pub edge_logits: Vec<f64>,
    pub fingerprint: String,
}

impl MaskLogits {
    pub fn new(
        mode: MaskMode,
        temperature: f64,
        init: f64,
        topology: &GraphTopology,
        layout: &WeightLayout,
    ) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let weights = match mode {
            MaskMode::Joint | MaskMode::WeightOnly => layout.total(),
            MaskMode::NodeShared => topology.weight_owners().len(),
            MaskMode::EdgeOnly => 0,
        };
        let edges = if mode.learns_edges() { topology.num_edges() } else { 0 };
        Ok(MaskLogits {
            mode,
            temperature,
            weight_logits: vec![init; weights],
            edge_logits: vec![init; edges],
            fingerprint: topology.fingerprint().to_string(),
        })
    }

    pub fn check_topology(&self, topology: &GraphTopology, layout: &WeightLayout) -> Result<()> {
        if self.fingerprint != topology.fingerprint() {
            return Err(Error::TopologyMismatch {
                expected: topology.fingerprint().to_string(),
                found: self.fingerprint.clone(),
            });
        }
        let fresh = MaskLogits::new(self.mode, self.temperature, 0.0, topology, layout)?;
        if fresh.weight_logits.len() != self.weight_logits.len()
            || fresh.edge_logits.len() != self.edge_logits.len()
        {
            return Err(Error::Contract("mask logit cardinalities do not match the topology".into()));
        }
        Ok(())
    }

    /// Per-weight logits after tying, or `None` when weights are forced open.
    pub fn expanded_weight_logits(
        &self,
        topology: &GraphTopology,
        layout: &WeightLayout,
    ) -> Option<Vec<f64>> {
        match self.mode {
            MaskMode::Joint | MaskMode::WeightOnly => Some(self.weight_logits.clone()),
            MaskMode::EdgeOnly => None,
            MaskMode::NodeShared => {
                let mut out = vec![0.0; layout.total()];
                for (k, &node) in topology.weight_owners().iter().enumerate() {
                    let range = layout.node_range(node).expect("owner has weights");
                    out[range].fill(self.weight_logits[k]);
                }
                Some(out)
            }
        }
    }

    /// Per-edge logits, or `None` when edges are forced open.
    pub fn expanded_edge_logits(&self) -> Option<Vec<f64>> {
        self.mode.learns_edges().then(|| self.edge_logits.clone())
    }
}

/// Binary masks expanded to every maskable weight and edge.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledMasks {
    pub mode: MaskMode,
    pub weight_scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub edge_scores: Vec<f64>,
    pub edges: Vec<f64>,
}

impl SampledMasks {
    /// Every mask open.
    pub fn full(mode: MaskMode, topology: &GraphTopology, layout: &WeightLayout) -> Self {
        SampledMasks {
            mode,
            weight_scores: vec![1.0; layout.total()],
            weights: vec![1.0; layout.total()],
            edge_scores: vec![1.0; topology.num_edges()],
            edges: vec![1.0; topology.num_edges()],
        }
    }

    /// Every unconstrained mask closed; forced families stay open.
    pub fn empty(mode: MaskMode, topology: &GraphTopology, layout: &WeightLayout) -> Self {
        reverse(&Self::full(mode, topology, layout))
    }

    pub fn weight_density(&self) -> f64 {
        fraction_open(&self.weights)
    }

    pub fn edge_density(&self) -> f64 {
        fraction_open(&self.edges)
    }
}

fn fraction_open(m: &[f64]) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.iter().filter(|&&v| v == 1.0).count() as f64 / m.len() as f64
}

/// A uniform draw strictly inside (0, 1); endpoints are redrawn.
pub fn draw_open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// `log(log U₁ / log U₂)`.
pub fn noise_term(u1: f64, u2: f64) -> f64 {
    (u1.ln() / u2.ln()).ln()
}

pub fn sample_score(logit: f64, temperature: f64, u1: f64, u2: f64) -> f64 {
    sigmoid((logit - noise_term(u1, u2)) / temperature)
}

/// `1` iff `s > 0.5`.
pub fn binarize(score: f64) -> f64 {
    if score > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// On-tape straight-through binarization of a score array.
pub fn binarize_ste(tape: &mut Tape, score: Var) -> Result<Var> {
    let hard = tape.value(score).mapv(binarize);
    let hard = tape.constant(hard);
    let offset = tape.sub(hard, score)?;
    let offset = tape.detach(offset)?;
    tape.add(offset, score)
}

/// Noise-free evaluation masks: `m = 1` iff `l > 0`.
pub fn deterministic_binarize(
    logits: &MaskLogits,
    topology: &GraphTopology,
    layout: &WeightLayout,
) -> SampledMasks {
    let family = |l: Option<Vec<f64>>, n: usize| match l {
        Some(l) => {
            let scores: Vec<f64> = l.iter().map(|&v| sigmoid(v)).collect();
            let binary = l.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            (scores, binary)
        }
        None => (vec![1.0; n], vec![1.0; n]),
    };
    let (weight_scores, weights) =
        family(logits.expanded_weight_logits(topology, layout), layout.total());
    let (edge_scores, edges) = family(logits.expanded_edge_logits(), topology.num_edges());
    SampledMasks {
        mode: logits.mode,
        weight_scores,
        weights,
        edge_scores,
        edges,
    }
}

/// Effective per-weight and per-edge mask values after mode constraints,
/// given one binary value per stored logit.
pub fn apply_mode(
    mode: MaskMode,
    stored_weights: &[f64],
    stored_edges: &[f64],
    topology: &GraphTopology,
    layout: &WeightLayout,
) -> (Vec<f64>, Vec<f64>) {
    let weights = match mode {
        MaskMode::Joint | MaskMode::WeightOnly => stored_weights.to_vec(),
        MaskMode::EdgeOnly => vec![1.0; layout.total()],
        MaskMode::NodeShared => {
            let mut out = vec![0.0; layout.total()];
            for (k, &node) in topology.weight_owners().iter().enumerate() {
                out[layout.node_range(node).expect("owner has weights")].fill(stored_weights[k]);
            }
            out
        }
    };
    let edges = if mode.learns_edges() {
        stored_edges.to_vec()
    } else {
        vec![1.0; topology.num_edges()]
    };
    (weights, edges)
}

/// Complement masks `1 − m` for each family the mode learns; forced-open
/// families stay open.
pub fn reverse(masks: &SampledMasks) -> SampledMasks {
    let flip = |v: &[f64], learned: bool| -> Vec<f64> {
        if learned {
            v.iter().map(|x| 1.0 - x).collect()
        } else {
            v.to_vec()
        }
    };
    let (w, e) = (masks.mode.learns_weights(), masks.mode.learns_edges());
    SampledMasks {
        mode: masks.mode,
        weight_scores: flip(&masks.weight_scores, w),
        weights: flip(&masks.weights, w),
        edge_scores: flip(&masks.edge_scores, e),
        edges: flip(&masks.edges, e),
    }
}

/// Inverse-CDF sample of the standard logistic law, `ln(u / (1 − u))`.
/// `log(log U₁ / log U₂)` is a difference of two standard Gumbel draws and has
/// exactly this law, so one uniform replaces two.
pub fn logistic_noise(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

/// Frozen noise for one mask sample, shaped like the stored logits.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskNoise {
    /// Standard logistic draw per stored weight logit.
    pub weights: Vec<f64>,
    pub edges: Vec<f64>,
}

impl MaskNoise {
    pub fn draw<R: Rng + ?Sized>(logits: &MaskLogits, rng: &mut R) -> Self {
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| logistic_noise(draw_open_uniform(rng))).collect()
        };
        let weights = draw(logits.weight_logits.len());
        let edges = draw(logits.edge_logits.len());
        MaskNoise { weights, edges }
    }

    /// Binary masks this draw yields for `logits`, expanded by mode.
    pub fn hard_masks(&self, logits: &MaskLogits, topology: &GraphTopology, layout: &WeightLayout) -> SampledMasks {
        let scores = |l: &[f64], n: &[f64]| -> Vec<f64> {
            l.iter().zip(n).map(|(&l, &n)| sigmoid((l - n) / logits.temperature)).collect()
        };
        let ws = scores(&logits.weight_logits, &self.weights);
        let es = scores(&logits.edge_logits, &self.edges);
        let wb: Vec<f64> = ws.iter().map(|&s| binarize(s)).collect();
        let eb: Vec<f64> = es.iter().map(|&s| binarize(s)).collect();
        let (weight_scores, edge_scores) = apply_mode(logits.mode, &ws, &es, topology, layout);
        let (weights, edges) = apply_mode(logits.mode, &wb, &eb, topology, layout);
        SampledMasks {
            mode: logits.mode,
            weight_scores,
            weights,
            edge_scores,
            edges,
        }
    }

    /// No noise: scores are `σ(l/τ)`.
    pub fn zero(logits: &MaskLogits) -> Self {
        MaskNoise {
            weights: vec![0.0; logits.weight_logits.len()],
            edges: vec![0.0; logits.edge_logits.len()],
        }
    }
}

/// Mask logits recorded as tape parameters.
#[derive(Clone, Debug)]
pub struct LogitVars {
    /// One var per maskable matrix (Joint, WeightOnly), a single `1×owners`
    /// row (NodeShared), or empty (EdgeOnly).
    pub weights: Vec<Var>,
    pub edges: Option<Var>,
    mode: MaskMode,
}

impl LogitVars {
    /// `trainable_weights`/`trainable_edges` choose between parameter and
    /// constant leaves, so a frozen family receives no gradient.
    pub fn record(
        tape: &mut Tape,
        logits: &MaskLogits,
        layout: &WeightLayout,
        trainable_weights: bool,
        trainable_edges: bool,
    ) -> Self {
        let mut leaf = |m: Matrix, trainable: bool| {
            if trainable {
                tape.param(m)
            } else {
                tape.constant(m)
            }
        };
        let weights = match logits.mode {
            MaskMode::Joint | MaskMode::WeightOnly => layout
                .matrices()
                .iter()
                .map(|m| {
                    let slice = logits.weight_logits[m.range()].to_vec();
                    let value = Array2::from_shape_vec((m.rows, m.cols), slice)
                        .expect("layout shape matches");
                    leaf(value, trainable_weights)
                })
                .collect(),
            MaskMode::NodeShared => {
                let row = Array2::from_shape_vec(
                    (1, logits.weight_logits.len()),
                    logits.weight_logits.clone(),
                )
                .expect("row shape");
                vec![leaf(row, trainable_weights)]
            }
            MaskMode::EdgeOnly => Vec::new(),
        };
        let edges = logits.mode.learns_edges().then(|| {
            let row = Array2::from_shape_vec((1, logits.edge_logits.len()), logits.edge_logits.clone())
                .expect("row shape");
            leaf(row, trainable_edges)
        });
        LogitVars {
            weights,
            edges,
            mode: logits.mode,
        }
    }

    /// Flatten gradients back into the stored-logit layout. Missing
    /// gradients are zero.
    pub fn gradients(
        &self,
        tape: &Tape,
        grads: &crate::autodiff::Gradients,
        logits: &MaskLogits,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; logits.weight_logits.len()];
        let mut offset = 0;
        for &v in &self.weights {
            let n = tape.value(v).len();
            if let Some(g) = grads.get(v) {
                for (dst, src) in gw[offset..offset + n].iter_mut().zip(g.iter()) {
                    *dst = *src;
                }
            }
            offset += n;
        }
        let mut ge = vec![0.0; logits.edge_logits.len()];
        if let Some(g) = self.edges.and_then(|v| grads.get(v)) {
            for (dst, src) in ge.iter_mut().zip(g.iter()) {
                *dst = *src;
            }
        }
        (gw, ge)
    }
}

/// One sampled mask set on the tape, with its complement. Gate records
/// expose their soft scores through [`Tape::gate_scores`].
#[derive(Clone, Debug)]
pub struct TapeMasks {
    pub weight_gates: Vec<Var>,
    pub edge_gate: Option<Var>,
    pub circuit: ForwardMasks,
    pub complement: ForwardMasks,
}

/// Record scores, straight-through masks and reversed masks for one sample.
pub fn sample_on_tape(
    tape: &mut Tape,
    vars: &LogitVars,
    logits: &MaskLogits,
    noise: &MaskNoise,
    layout: &WeightLayout,
) -> Result<TapeMasks> {
    let tau = logits.temperature;
    let gate = |tape: &mut Tape, logit: Var, noise: Matrix| -> Result<(Var, Var)> {
        let n = tape.constant(noise);
        let m = tape.gate(logit, n, tau)?;
        let c = tape.affine(m, -1.0, 1.0)?;
        Ok((m, c))
    };
    let mut circuit_w = Vec::new();
    let mut complement_w = Vec::new();
    match vars.mode {
        MaskMode::Joint | MaskMode::WeightOnly => {
            for (m, &v) in layout.matrices().iter().zip(&vars.weights) {
                let n = Array2::from_shape_vec((m.rows, m.cols), noise.weights[m.range()].to_vec())
                    .expect("layout shape matches");
                let (b, c) = gate(tape, v, n)?;
                circuit_w.push(b);
                complement_w.push(c);
            }
        }
        MaskMode::NodeShared => {
            let n = Array2::from_shape_vec((1, noise.weights.len()), noise.weights.clone())
                .expect("row shape");
            let (b, c) = gate(tape, vars.weights[0], n)?;
            circuit_w.push(b);
            complement_w.push(c);
        }
        MaskMode::EdgeOnly => {}
    }
    let (circuit_weights, complement_weights) = match vars.mode {
        MaskMode::Joint | MaskMode::WeightOnly => (
            WeightMasking::Matrices(circuit_w.clone()),
            WeightMasking::Matrices(complement_w),
        ),
        MaskMode::NodeShared => (
            WeightMasking::PerNode(circuit_w[0]),
            WeightMasking::PerNode(complement_w[0]),
        ),
        MaskMode::EdgeOnly => (WeightMasking::Open, WeightMasking::Open),
    };
    let (circuit_e, complement_e) = match vars.edges {
        Some(v) => {
            let n = Array2::from_shape_vec((1, noise.edges.len()), noise.edges.clone())
                .expect("row shape");
            let (b, c) = gate(tape, v, n)?;
            (Some(b), Some(c))
        }
        None => (None, None),
    };
    Ok(TapeMasks {
        weight_gates: circuit_w,
        edge_gate: circuit_e,
        circuit: ForwardMasks {
            weights: circuit_weights,
            edges: circuit_e,
        },
        complement: ForwardMasks {
            weights: complement_weights,
            edges: complement_e,
        },
    })
}

/// JSON form of a mask set. Logits are hexadecimal floats; binary masks are
/// strings of `0`/`1` over every maskable weight and edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDocument {
    pub format: String,
    pub mode: MaskMode,
    pub temperature: String,
    pub fingerprint: String,
    pub weight_logits: Vec<String>,
    pub edge_logits: Vec<String>,
    pub weight_mask: String,
    pub edge_mask: String,
}

pub const MASK_FORMAT: &str = "discogp-masks/v1";

pub fn bits_to_string(bits: &[f64]) -> String {
    bits.iter().map(|&b| if b == 1.0 { '1' } else { '0' }).collect()
}

pub fn string_to_bits(s: &str) -> Result<Vec<f64>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(1.0),
            '0' => Ok(0.0),
            other => Err(Error::Format(format!("mask string contains {other:?}"))),
        })
        .collect()
}

impl MaskDocument {
    pub fn new(logits: &MaskLogits, topology: &GraphTopology, layout: &WeightLayout) -> Self {
        let det = deterministic_binarize(logits, topology, layout);
        MaskDocument {
            format: MASK_FORMAT.into(),
            mode: logits.mode,
            temperature: hexfloat::format(logits.temperature),
            fingerprint: logits.fingerprint.clone(),
            weight_logits: logits.weight_logits.iter().map(|&v| hexfloat::format(v)).collect(),
            edge_logits: logits.edge_logits.iter().map(|&v| hexfloat::format(v)).collect(),
            weight_mask: bits_to_string(&det.weights),
            edge_mask: bits_to_string(&det.edges),
        }
    }

    pub fn logits(&self) -> Result<MaskLogits> {
        if self.format != MASK_FORMAT {
            return Err(Error::Format(format!("unsupported mask format {:?}", self.format)));
        }
        let parse_all = |v: &[String]| v.iter().map(|s| hexfloat::parse(s)).collect::<Result<Vec<_>>>();
        Ok(MaskLogits {
            mode: self.mode,
            temperature: hexfloat::parse(&self.temperature)?,
            weight_logits: parse_all(&self.weight_logits)?,
            edge_logits: parse_all(&self.edge_logits)?,
            fingerprint: self.fingerprint.clone(),
        })
    }
}
