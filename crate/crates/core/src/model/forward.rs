//! Forward pass over the computation graph, plus a plain dense reference.
//!
//! A batch is right-padded to a common block length and stacked row-wise, so
//! every node output is a `(batch·block)×width` matrix. Causal attention never
//! lets a real position see the padding that follows it.

use ndarray::{s, Array2};

use super::graph::{GraphTopology, NodeKind};
use super::{ModelConfig, ModelParams};
use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Right-padded token batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    tokens: Vec<usize>,
    positions: Vec<usize>,
    lengths: Vec<usize>,
    block: usize,
}

impl Batch {
    pub fn new<P: AsRef<[usize]>>(prompts: &[P], config: &ModelConfig) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let block = prompts.iter().map(|p| p.as_ref().len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(prompts.len() * block);
        let mut positions = Vec::with_capacity(prompts.len() * block);
        let mut lengths = Vec::with_capacity(prompts.len());
        for p in prompts {
            let p = p.as_ref();
            if p.is_empty() {
                return Err(Error::Input("empty prompt".into()));
            }
            if p.len() > config.max_seq {
                return Err(Error::Input(format!(
                    "prompt of length {} exceeds max_seq {}",
                    p.len(),
                    config.max_seq
                )));
            }
            if let Some(&bad) = p.iter().find(|&&t| t >= config.vocab) {
                return Err(Error::Input(format!(
                    "unknown token id {bad} (vocabulary size {})",
                    config.vocab
                )));
            }
            tokens.extend_from_slice(p);
            tokens.extend(std::iter::repeat_n(0, block - p.len()));
            positions.extend(0..block);
            lengths.push(p.len());
        }
        Ok(Batch {
            tokens,
            positions,
            lengths,
            block,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Stacked row index of each prompt's last real token.
    pub fn final_rows(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &n)| b * self.block + n - 1)
            .collect()
    }
}

/// Model tensors recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeParams {
    pub token_embed: Var,
    pub pos_embed: Var,
    pub attn_norm: Vec<Var>,
    pub mlp_norm: Vec<Var>,
    /// Maskable matrices in weight-layout order.
    pub maskable: Vec<Var>,
    pub final_norm: Var,
    pub unembed: Var,
    heads: usize,
}

impl TapeParams {
    /// Frozen weights: no gradient reaches them.
    pub fn constants(tape: &mut Tape, params: &ModelParams) -> Self {
        Self::record(tape, params, false)
    }

    /// Trainable weights, used for pretraining.
    pub fn trainable(tape: &mut Tape, params: &ModelParams) -> Self {
        Self::record(tape, params, true)
    }

    fn record(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let token_embed = leaf(&params.token_embed);
        let pos_embed = leaf(&params.pos_embed);
        let mut attn_norm = Vec::new();
        let mut mlp_norm = Vec::new();
        let mut maskable = Vec::new();
        for layer in &params.layers {
            attn_norm.push(leaf(&layer.attn_norm));
            for h in &layer.heads {
                for m in [&h.wq, &h.wk, &h.wv, &h.wo] {
                    maskable.push(leaf(m));
                }
            }
            mlp_norm.push(leaf(&layer.mlp_norm));
            maskable.push(leaf(&layer.w_in));
            maskable.push(leaf(&layer.w_out));
        }
        TapeParams {
            token_embed,
            pos_embed,
            attn_norm,
            mlp_norm,
            maskable,
            final_norm: leaf(&params.final_norm),
            unembed: leaf(&params.unembed),
            heads: params.config.heads,
        }
    }

    /// Every tensor in [`ModelParams::tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let per_layer = 4 * self.heads + 2;
        let mut out = vec![self.token_embed, self.pos_embed];
        for (i, (&an, &mn)) in self.attn_norm.iter().zip(&self.mlp_norm).enumerate() {
            let m = &self.maskable[i * per_layer..(i + 1) * per_layer];
            out.push(an);
            out.extend_from_slice(&m[..4 * self.heads]);
            out.push(mn);
            out.extend_from_slice(&m[4 * self.heads..]);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }

    fn matrix_index(&self, layer: usize, kind: NodeKind) -> (usize, usize) {
        let base = layer * (4 * self.heads + 2);
        match kind {
            NodeKind::AttnQuery { head, .. } => (base + 4 * head, 1),
            NodeKind::AttnKey { head, .. } => (base + 4 * head + 1, 1),
            NodeKind::AttnValue { head, .. } => (base + 4 * head + 2, 1),
            NodeKind::AttnOutput { head, .. } => (base + 4 * head + 3, 1),
            NodeKind::Mlp { .. } => (base + 4 * self.heads, 2),
            NodeKind::Input | NodeKind::Output => (0, 0),
        }
    }
}

/// How maskable weights are gated during a forward pass.
#[derive(Clone, Debug)]
pub enum WeightMasking {
    Open,
    /// One same-shape mask per maskable matrix, in weight-layout order.
    Matrices(Vec<Var>),
    /// A `1×owners` row; every weight of a node shares its node's entry.
    PerNode(Var),
}

#[derive(Clone, Debug)]
pub struct ForwardMasks {
    pub weights: WeightMasking,
    /// `1×|E|` edge gates; `None` leaves every edge open.
    pub edges: Option<Var>,
}

impl ForwardMasks {
    pub fn open() -> Self {
        ForwardMasks {
            weights: WeightMasking::Open,
            edges: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphOutputs {
    /// `batch×V` logits at each prompt's final position.
    pub logits: Var,
    /// Full stacked output of every non-Output node.
    pub node_outputs: Vec<Option<Var>>,
    pub final_rows: Vec<usize>,
}

/// Gated sum of the outputs of `reader`'s writers.
pub fn masked_residual_read(
    tape: &mut Tape,
    topology: &GraphTopology,
    reader: usize,
    edges: Option<Var>,
    outputs: &[Option<Var>],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(topology.in_edges(reader).len());
    for &e in topology.in_edges(reader) {
        let writer = topology.edges()[e].writer;
        let out = outputs.get(writer).copied().flatten().ok_or_else(|| {
            Error::TopologicalOrder(format!(
                "{} read before {} was computed",
                topology.node(reader).label(),
                topology.node(writer).label()
            ))
        })?;
        terms.push((e, out));
    }
    if terms.is_empty() {
        return Err(Error::Contract(format!(
            "{} has no residual inputs",
            topology.node(reader).label()
        )));
    }
    match edges {
        Some(gates) => tape.gated_sum(gates, &terms),
        None => {
            let mut acc = terms[0].1;
            for &(_, v) in &terms[1..] {
                acc = tape.add(acc, v)?;
            }
            Ok(acc)
        }
    }
}

fn masked_weight(
    tape: &mut Tape,
    topology: &GraphTopology,
    weights: &WeightMasking,
    node: usize,
    matrix: usize,
    base: Var,
) -> Result<Var> {
    match weights {
        WeightMasking::Open => Ok(base),
        WeightMasking::Matrices(masks) => {
            let m = *masks.get(matrix).ok_or_else(|| {
                Error::Input(format!("missing weight mask for matrix {matrix}"))
            })?;
            tape.mul(base, m)
        }
        WeightMasking::PerNode(gates) => {
            let ordinal = topology
                .owner_ordinal(node)
                .ok_or_else(|| Error::Contract("weight gate for a weightless node".into()))?;
            tape.scale_by_element(base, *gates, ordinal)
        }
    }
}

/// Evaluate the graph in node order with the given masks.
pub fn graph_forward(
    tape: &mut Tape,
    topology: &GraphTopology,
    params: &TapeParams,
    batch: &Batch,
    masks: &ForwardMasks,
) -> Result<GraphOutputs> {
    if let Some(e) = masks.edges {
        let dim = tape.value(e).dim();
        if dim != (1, topology.num_edges()) {
            return Err(Error::Input(format!(
                "edge mask has shape {dim:?}, topology has {} edges",
                topology.num_edges()
            )));
        }
    }
    let final_rows = batch.final_rows();
    let mut outputs: Vec<Option<Var>> = vec![None; topology.num_nodes()];
    let mut logits = None;
    for (id, &kind) in topology.nodes().iter().enumerate() {
        let out = match kind {
            NodeKind::Input => {
                let t = tape.gather_rows(params.token_embed, batch.tokens.clone())?;
                let p = tape.gather_rows(params.pos_embed, batch.positions.clone())?;
                tape.add(t, p)?
            }
            NodeKind::AttnQuery { layer, .. }
            | NodeKind::AttnKey { layer, .. }
            | NodeKind::AttnValue { layer, .. } => {
                let read = masked_residual_read(tape, topology, id, masks.edges, &outputs)?;
                let x = tape.layer_norm(read, params.attn_norm[layer], LN_EPS)?;
                let (m, _) = params.matrix_index(layer, kind);
                let w = masked_weight(tape, topology, &masks.weights, id, m, params.maskable[m])?;
                tape.matmul(x, w)?
            }
            NodeKind::AttnOutput { layer, .. } => {
                let [q, k, v] = topology
                    .head_sources(id)
                    .expect("AttnOutput has sources")
                    .map(|n| outputs[n].expect("sources precede their head output"));
                let a = tape.causal_attention(q, k, v, batch.block())?;
                let (m, _) = params.matrix_index(layer, kind);
                let w = masked_weight(tape, topology, &masks.weights, id, m, params.maskable[m])?;
                tape.matmul(a, w)?
            }
            NodeKind::Mlp { layer } => {
                let read = masked_residual_read(tape, topology, id, masks.edges, &outputs)?;
                let x = tape.layer_norm(read, params.mlp_norm[layer], LN_EPS)?;
                let (m, _) = params.matrix_index(layer, kind);
                let w_in =
                    masked_weight(tape, topology, &masks.weights, id, m, params.maskable[m])?;
                let w_out = masked_weight(
                    tape,
                    topology,
                    &masks.weights,
                    id,
                    m + 1,
                    params.maskable[m + 1],
                )?;
                let h = tape.matmul(x, w_in)?;
                let h = tape.gelu(h)?;
                tape.matmul(h, w_out)?
            }
            NodeKind::Output => {
                let read = masked_residual_read(tape, topology, id, masks.edges, &outputs)?;
                let last = tape.gather_rows(read, final_rows.clone())?;
                let x = tape.layer_norm(last, params.final_norm, LN_EPS)?;
                logits = Some(tape.matmul(x, params.unembed)?);
                continue;
            }
        };
        outputs[id] = Some(out);
    }
    Ok(GraphOutputs {
        logits: logits.expect("topology has an Output node"),
        node_outputs: outputs,
        final_rows,
    })
}

fn dense_layer_norm(x: &Matrix, gain: &Matrix) -> Matrix {
    let mut out = x.clone();
    let m = x.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / m;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.zip_mut_with(&gain.row(0), |v, g| *v = (*v - mean) * inv * g);
    }
    out
}

/// Conventional pre-norm transformer evaluated without the graph machinery.
/// Returns the final-position logits for one prompt.
pub fn dense_forward(params: &ModelParams, tokens: &[usize]) -> Result<Vec<f64>> {
    let c = &params.config;
    Batch::new(&[tokens], c)?;
    let n = tokens.len();
    let mut x = Array2::from_shape_fn((n, c.d_model), |(t, d)| {
        params.token_embed[[tokens[t], d]] + params.pos_embed[[t, d]]
    });
    let scale = 1.0 / (c.d_head as f64).sqrt();
    for layer in &params.layers {
        let h_in = dense_layer_norm(&x, &layer.attn_norm);
        let mut attn = Array2::<f64>::zeros((n, c.d_model));
        for head in &layer.heads {
            let (q, k, v) = (h_in.dot(&head.wq), h_in.dot(&head.wk), h_in.dot(&head.wv));
            let mut z = Array2::<f64>::zeros((n, c.d_head));
            for i in 0..n {
                let scores: Vec<f64> =
                    (0..=i).map(|j| q.row(i).dot(&k.row(j)) * scale).collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    z.row_mut(i).scaled_add(e / total, &v.row(j));
                }
            }
            attn = attn + z.dot(&head.wo);
        }
        x = x + attn;
        let m_in = dense_layer_norm(&x, &layer.mlp_norm);
        let hidden = m_in
            .dot(&layer.w_in)
            .mapv(|v| v * 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)));
        x = x + hidden.dot(&layer.w_out);
    }
    let last = x.slice(s![n - 1..n, ..]).to_owned();
    let logits = dense_layer_norm(&last, &params.final_norm).dot(&params.unembed);
    Ok(logits.row(0).to_vec())
}

/// Full-vocabulary log-softmax gathered at the candidate labels.
pub fn label_logprobs(logits: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() < 2 {
        return Err(Error::Input("need at least two candidate labels".into()));
    }
    for (i, a) in labels.iter().enumerate() {
        if labels[..i].contains(a) {
            return Err(Error::Input(format!("duplicate candidate label {a}")));
        }
        if *a >= logits.len() {
            return Err(Error::Input(format!("label {a} outside vocabulary")));
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(labels.iter().map(|&l| logits[l] - lse).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_topology, HeadParams, LayerParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_head: 4,
            d_ff: 12,
            vocab: 13,
            max_seq: 7,
        }
    }

    fn random_prompt(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Vec<usize> {
        let n = rng.random_range(1..=c.max_seq);
        (0..n).map(|_| rng.random_range(0..c.vocab)).collect()
    }

    fn graph_logits(params: &ModelParams, prompts: &[Vec<usize>], masks: impl Fn(&mut Tape) -> ForwardMasks) -> Matrix {
        let topo = build_topology(&params.config);
        let mut tape = Tape::new();
        let tp = TapeParams::constants(&mut tape, params);
        let batch = Batch::new(prompts, &params.config).unwrap();
        let m = masks(&mut tape);
        let out = graph_forward(&mut tape, &topo, &tp, &batch, &m).unwrap();
        tape.value(out.logits).clone()
    }

    #[test]
    fn open_masks_match_dense_reference() {
        let c = config();
        let params = ModelParams::init(c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let topo = build_topology(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prompts: Vec<Vec<usize>> = (0..100).map(|_| random_prompt(&mut rng, &c)).collect();
        let open = graph_logits(&params, &prompts, |_| ForwardMasks::open());
        let gated = graph_logits(&params, &prompts, |t| ForwardMasks {
            weights: WeightMasking::PerNode(t.constant(Array2::ones((1, topo.weight_owners().len())))),
            edges: Some(t.constant(Array2::ones((1, topo.num_edges())))),
        });
        let mut worst = 0.0f64;
        for (i, p) in prompts.iter().enumerate() {
            let dense = dense_forward(&params, p).unwrap();
            for (v, d) in dense.iter().enumerate() {
                worst = worst.max((open[[i, v]] - d).abs()).max((gated[[i, v]] - d).abs());
            }
        }
        assert!(worst <= 1e-9, "max abs difference {worst}");
    }

    #[test]
    fn closing_output_edges_gives_constant_logits() {
        let c = config();
        let params = ModelParams::init(c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let topo = build_topology(&c);
        let mut gates = Array2::ones((1, topo.num_edges()));
        for &e in topo.in_edges(topo.output()) {
            gates[[0, e]] = 0.0;
        }
        let prompts = vec![vec![1, 2, 3], vec![4], vec![5, 6, 7, 8, 9, 10, 11]];
        let out = graph_logits(&params, &prompts, |t| ForwardMasks {
            weights: WeightMasking::Open,
            edges: Some(t.constant(gates.clone())),
        });
        // Normalizing the zero vector yields zero, so the logits are all zero.
        for row in out.rows() {
            assert_eq!(row, out.row(0));
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn causal_and_padding_invariance() {
        let c = config();
        let params = ModelParams::init(c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let alone = graph_logits(&params, &[vec![3, 1, 4]], |_| ForwardMasks::open());
        let padded = graph_logits(&params, &[vec![3, 1, 4], vec![1, 5, 9, 2, 6, 5]], |_| {
            ForwardMasks::open()
        });
        for v in 0..c.vocab {
            assert!((alone[[0, v]] - padded[[0, v]]).abs() < 1e-12);
        }
        // The final-position logits of a prefix do not see later tokens.
        let a = dense_forward(&params, &[3, 1]).unwrap();
        let full = graph_logits(&params, &[vec![3, 1]], |_| ForwardMasks::open());
        for v in 0..c.vocab {
            assert!((a[v] - full[[0, v]]).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_read_gating() {
        let c = config();
        let topo = build_topology(&c);
        let mut tape = Tape::new();
        let mut outputs = vec![None; topo.num_nodes()];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (id, kind) in topo.nodes().iter().enumerate() {
            if kind.writes_residual() {
                let m = Array2::from_shape_fn((3, 8), |_| rng.random_range(-1.0..1.0));
                outputs[id] = Some(tape.constant(m));
            }
        }
        let reader = topo.mlp_node(1);
        let ne = topo.num_edges();
        let all = tape.constant(Array2::ones((1, ne)));
        let none = tape.constant(Array2::zeros((1, ne)));
        let full = masked_residual_read(&mut tape, &topo, reader, Some(all), &outputs).unwrap();
        let zero = masked_residual_read(&mut tape, &topo, reader, Some(none), &outputs).unwrap();
        assert!(tape.value(zero).iter().all(|&v| v == 0.0));

        // Sum of single-edge reads equals the all-open read.
        let mut acc = Array2::<f64>::zeros((3, 8));
        for &e in topo.in_edges(reader) {
            let mut g = Array2::zeros((1, ne));
            g[[0, e]] = 1.0;
            let g = tape.constant(g);
            let single = masked_residual_read(&mut tape, &topo, reader, Some(g), &outputs).unwrap();
            acc += tape.value(single);
        }
        let diff = (&acc - tape.value(full)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12);

        // Input open, everything else closed: the Input contribution only.
        let mut g = Array2::zeros((1, ne));
        g[[0, topo.edge_index(reader, topo.input()).unwrap()]] = 1.0;
        let g = tape.constant(g);
        let only = masked_residual_read(&mut tape, &topo, reader, Some(g), &outputs).unwrap();
        assert_eq!(tape.value(only), tape.value(outputs[0].unwrap()));

        let missing = vec![None; topo.num_nodes()];
        let err = masked_residual_read(&mut tape, &topo, reader, Some(all), &missing).unwrap_err();
        assert!(matches!(err, Error::TopologicalOrder(_)));
    }

    #[test]
    fn rejects_unknown_tokens_and_long_prompts() {
        let c = config();
        assert!(matches!(Batch::new(&[vec![13]], &c), Err(Error::Input(_))));
        assert!(Batch::new(&[vec![1; 8]], &c).is_err());
        let b = Batch::new(&[vec![1, 2], vec![3, 4, 5]], &c).unwrap();
        assert_eq!(b.final_rows(), vec![1, 5]);
    }

    /// One layer, one head, identity-like weights on a length-2 prompt,
    /// traced by hand.
    #[test]
    fn hand_traced_single_layer() {
        let c = ModelConfig {
            layers: 1,
            heads: 1,
            d_model: 2,
            d_head: 2,
            d_ff: 2,
            vocab: 3,
            max_seq: 2,
        };
        let eye = Array2::eye(2);
        let zero = Array2::zeros((2, 2));
        let params = ModelParams {
            config: c,
            token_embed: ndarray::array![[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]],
            pos_embed: Array2::zeros((2, 2)),
            layers: vec![LayerParams {
                attn_norm: Array2::ones((1, 2)),
                heads: vec![HeadParams {
                    wq: zero.clone(),
                    wk: zero.clone(),
                    wv: eye.clone(),
                    wo: eye.clone(),
                }],
                mlp_norm: Array2::ones((1, 2)),
                w_in: zero.clone(),
                w_out: zero,
            }],
            final_norm: Array2::ones((1, 2)),
            unembed: ndarray::array![[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]],
        };
        // Tokens [0, 1]: embeddings (1,0) and (0,1). Each normalizes to
        // ±a with a = 1/sqrt(1+eps'), eps' = 4·eps. Zero queries give uniform
        // attention over both positions, so the head writes the mean of the
        // two normalized values, which is zero. The MLP writes zero. The final
        // residual is (0,1), normalizing to (-a, a).
        let a = 1.0 / (0.25f64 + LN_EPS).sqrt() * 0.5;
        let expected = [-a, a, -2.0 * a];
        let graph = graph_logits(&params, &[vec![0, 1]], |_| ForwardMasks::open());
        let dense = dense_forward(&params, &[0, 1]).unwrap();
        for v in 0..3 {
            assert!((graph[[0, v]] - expected[v]).abs() < 1e-12, "{v}: {}", graph[[0, v]]);
            assert!((dense[v] - expected[v]).abs() < 1e-12);
        }
    }

    #[test]
    fn label_logprob_cases() {
        let lp = label_logprobs(&[0.0; 10], &[3, 7]).unwrap();
        for v in lp {
            assert!((v - (0.1f64).ln()).abs() < 1e-15);
        }
        let lp = label_logprobs(&[1000.0, 0.0, 0.0], &[0, 1]).unwrap();
        assert!(lp[0].abs() < 1e-12);

        let logits = [0.3, -1.2, 2.5, 0.0, -0.7, 1.1];
        let total: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let lp = label_logprobs(&logits, &[2, 4, 0]).unwrap();
        for (got, &l) in lp.iter().zip(&[2usize, 4, 0]) {
            assert!((got - (logits[l].exp() / total).ln()).abs() < 1e-12);
        }
        assert!(label_logprobs(&logits, &[1, 1]).is_err());
        assert!(label_logprobs(&logits, &[1]).is_err());
    }
}
