//! Circuit evaluation: faithfulness, completeness, label-space KL, overlap,
//! per-layer head statistics, the edge-similarity experiment and sweeps.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::infer::{MaskedModel, EVAL_BATCH};
use crate::mask::{deterministic_binarize, reverse, string_to_bits, SampledMasks};
use crate::model::{graph_forward, Batch, ForwardMasks, GraphTopology, ModelParams, NodeKind, TapeParams, WeightLayout};
use crate::pruner::{prune, Circuit, CircuitDocument, DensityReport};
use crate::taskgen::{Splits, TaskExample, BOS_ID};
use crate::trainer::{train_on_splits, TrainConfig, TrainOutcome};

/// Probability floor applied to the circuit side of the label KL.
pub const KL_FLOOR: f64 = 1e-12;
/// Size of the reference sample behind mean ablation.
pub const MEAN_REFERENCE_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub faithfulness_accuracy: f64,
    pub completeness_accuracy: f64,
    pub kl_label: f64,
    #[serde(flatten)]
    pub densities: DensityReport,
    pub dense_accuracy: f64,
    pub chance_level: f64,
    pub examples: usize,
}

const TABLE_COLUMNS: [&str; 6] = [
    "Weight Density",
    "Node Density",
    "Edge Density",
    "KL",
    "Func. Faith.",
    "Func. Comp.",
];

impl EvalReport {
    /// Aligned text table; densities and accuracies in percent.
    pub fn to_table(&self) -> String {
        let cells = [
            format!("{:.2}", self.densities.weight_density),
            format!("{:.2}", self.densities.node_density),
            format!("{:.2}", self.densities.edge_density),
            format!("{:.4}", self.kl_label),
            format!("{:.2}", 100.0 * self.faithfulness_accuracy),
            format!("{:.2}", 100.0 * self.completeness_accuracy),
        ];
        let mut s = String::new();
        let widths: Vec<usize> = TABLE_COLUMNS.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        let row = |items: &[String]| {
            items
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let header: Vec<String> = TABLE_COLUMNS.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "{}", row(&header));
        let _ = writeln!(s, "{}", row(&cells));
        let _ = writeln!(
            s,
            "dense accuracy {:.2}%, chance {:.2}%, {} test examples",
            100.0 * self.dense_accuracy,
            100.0 * self.chance_level,
            self.examples
        );
        s
    }
}

/// Accuracy of the pruned circuit run in isolation.
pub fn faithfulness(params: &ModelParams, topology: &GraphTopology, circuit: &Circuit, examples: &[TaskExample]) -> Result<f64> {
    circuit.check_topology(topology)?;
    circuit.masked_model(params)?.accuracy(topology, examples)
}

/// Accuracy under the reversed masks `1 − m`.
pub fn completeness(
    params: &ModelParams,
    topology: &GraphTopology,
    full_masks: &SampledMasks,
    examples: &[TaskExample],
) -> Result<f64> {
    let r = reverse(full_masks);
    MaskedModel::new(params, Some(&r.weights), Some(&r.edges))?.accuracy(topology, examples)
}

/// Softmax over the candidate logits: the full-vocabulary softmax
/// renormalized over the labels.
pub fn label_distribution(label_logits: &[f64]) -> Vec<f64> {
    let max = label_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = label_logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `KL(p ‖ q)` with `q` floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let sum: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, &qi)| pi > 0.0 && pi != qi)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum();
    sum.max(0.0)
}

/// Mean label-space KL from the full model to `circuit`.
pub fn kl_label(
    params: &ModelParams,
    topology: &GraphTopology,
    circuit: &MaskedModel,
    examples: &[TaskExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let full = MaskedModel::dense(params).candidate_logits(topology, examples)?;
    let circ = circuit.candidate_logits(topology, examples)?;
    let total: f64 = full
        .iter()
        .zip(&circ)
        .map(|(f, c)| kl_divergence(&label_distribution(f), &label_distribution(c)))
        .sum();
    Ok(total / examples.len() as f64)
}

/// Largest share of any gold index in `examples`.
pub fn chance_level(examples: &[TaskExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let k = examples.iter().map(|e| e.gold + 1).max().unwrap_or(1);
    let mut counts = vec![0usize; k];
    for e in examples {
        counts[e.gold] += 1;
    }
    *counts.iter().max().expect("non-empty") as f64 / examples.len() as f64
}

/// Full evaluation of a circuit on a test split. `full_masks` are the
/// unpruned binary masks whose reversal gives the complement.
pub fn evaluate(
    params: &ModelParams,
    topology: &GraphTopology,
    circuit: &Circuit,
    full_masks: &SampledMasks,
    examples: &[TaskExample],
) -> Result<EvalReport> {
    circuit.check_topology(topology)?;
    let model = circuit.masked_model(params)?;
    Ok(EvalReport {
        faithfulness_accuracy: model.accuracy(topology, examples)?,
        completeness_accuracy: completeness(params, topology, full_masks, examples)?,
        kl_label: kl_label(params, topology, &model, examples)?,
        densities: circuit.densities(topology),
        dense_accuracy: MaskedModel::dense(params).accuracy(topology, examples)?,
        chance_level: chance_level(examples),
        examples: examples.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub edge_overlap_pct: f64,
    pub weight_overlap_pct: f64,
    pub edge_intersection: usize,
    pub edge_union: usize,
    pub weight_intersection: usize,
    pub weight_union: usize,
}

fn intersection_union(a: &[f64], b: &[f64]) -> (usize, usize) {
    a.iter().zip(b).fold((0, 0), |(i, u), (&x, &y)| {
        let (x, y) = (x == 1.0, y == 1.0);
        (i + usize::from(x && y), u + usize::from(x || y))
    })
}

/// Intersection over union of open edges and of open weights.
pub fn overlap(a: &Circuit, b: &Circuit) -> Result<OverlapReport> {
    if a.fingerprint != b.fingerprint || a.edges.len() != b.edges.len() || a.weights.len() != b.weights.len() {
        return Err(Error::Input(format!(
            "circuits come from different topologies ({} vs {})",
            a.fingerprint, b.fingerprint
        )));
    }
    let (ei, eu) = intersection_union(&a.edges, &b.edges);
    let (wi, wu) = intersection_union(&a.weights, &b.weights);
    let pct = |i: usize, u: usize| if u == 0 { 0.0 } else { 100.0 * i as f64 / u as f64 };
    Ok(OverlapReport {
        edge_overlap_pct: pct(ei, eu),
        weight_overlap_pct: pct(wi, wu),
        edge_intersection: ei,
        edge_union: eu,
        weight_intersection: wi,
        weight_union: wu,
    })
}

/// [`overlap`] straight from two circuit files, no topology needed.
pub fn overlap_documents(a: &CircuitDocument, b: &CircuitDocument) -> Result<OverlapReport> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::Input(format!(
            "circuits come from different topologies ({} vs {})",
            a.fingerprint, b.fingerprint
        )));
    }
    let load = |d: &CircuitDocument| -> Result<Circuit> {
        Ok(Circuit {
            mode: d.mode,
            fingerprint: d.fingerprint.clone(),
            weights: string_to_bits(&d.weight_mask)?,
            edges: string_to_bits(&d.edge_mask)?,
            nodes: Vec::new(),
        })
    };
    overlap(&load(a)?, &load(b)?)
}

impl OverlapReport {
    pub fn to_table(&self) -> String {
        format!(
            "edges    {:.2}% ({})\nweights  {:.2}% ({})\n",
            self.edge_overlap_pct, self.edge_intersection, self.weight_overlap_pct, self.weight_intersection
        )
    }
}

/// Retained attention heads per layer.
pub fn head_layer_distribution(circuit: &Circuit, topology: &GraphTopology) -> Vec<usize> {
    let mut counts = vec![0; topology.layers()];
    for (id, kind) in topology.nodes().iter().enumerate() {
        if let NodeKind::AttnOutput { layer, .. } = *kind {
            if circuit.nodes[id] {
                counts[layer] += 1;
            }
        }
    }
    counts
}

/// Accuracy drop of the full model when one layer's retained heads lose
/// every input edge, one entry per layer.
pub fn layer_ablation_importance(
    params: &ModelParams,
    topology: &GraphTopology,
    circuit: &Circuit,
    examples: &[TaskExample],
) -> Result<Vec<f64>> {
    circuit.check_topology(topology)?;
    let dense = MaskedModel::dense(params).accuracy(topology, examples)?;
    let mut drops = Vec::with_capacity(topology.layers());
    for layer in 0..topology.layers() {
        let mut edges = vec![1.0; topology.num_edges()];
        let mut any = false;
        for head in 0..topology.heads() {
            let [q, k, v, o] = topology.head_nodes(layer, head);
            if !circuit.nodes[o] {
                continue;
            }
            any = true;
            for node in [q, k, v] {
                for &e in topology.in_edges(node) {
                    edges[e] = 0.0;
                }
            }
        }
        let drop = if any {
            dense - MaskedModel::new(params, None, Some(&edges))?.accuracy(topology, examples)?
        } else {
            0.0
        };
        drops.push(drop);
    }
    Ok(drops)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationStrategy {
    Mean,
    Interchange,
    Random,
}

impl AblationStrategy {
    pub fn name(self) -> &'static str {
        match self {
            AblationStrategy::Mean => "mean",
            AblationStrategy::Interchange => "interchange",
            AblationStrategy::Random => "random",
        }
    }

    pub fn all() -> [AblationStrategy; 3] {
        [AblationStrategy::Mean, AblationStrategy::Interchange, AblationStrategy::Random]
    }
}

impl std::str::FromStr for AblationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown ablation strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSimilarity {
    pub strategy: AblationStrategy,
    pub mean_cosine: f64,
    /// (example, edge) pairs that entered the mean.
    pub pairs: usize,
    /// Pairs skipped because a vector had zero norm.
    pub skipped: usize,
}

/// `None` when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Final-position output of every node, per prompt: `[prompt][node]`.
/// The output node has no stored state and maps to an empty vector.
pub fn final_node_states<P: AsRef<[usize]>>(
    params: &ModelParams,
    topology: &GraphTopology,
    prompts: &[P],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let tp = TapeParams::constants(&mut tape, params);
        let batch = Batch::new(chunk, &params.config)?;
        let res = graph_forward(&mut tape, topology, &tp, &batch, &ForwardMasks::open())?;
        for &row in &res.final_rows {
            let states = res
                .node_outputs
                .iter()
                .map(|v| v.map(|v| tape.value(v).row(row).to_vec()).unwrap_or_default())
                .collect();
            out.push(states);
        }
    }
    Ok(out)
}

/// Mean cosine between clean and ablated writer states over every maskable
/// edge of every example.
pub fn edge_similarity(
    topology: &GraphTopology,
    clean: &[Vec<Vec<f64>>],
    ablated: &[Vec<Vec<f64>>],
    strategy: AblationStrategy,
) -> EdgeSimilarity {
    let mut fanout = vec![0usize; topology.num_nodes()];
    for e in topology.edges() {
        fanout[e.writer] += 1;
    }
    let (mut sum, mut pairs, mut skipped) = (0.0, 0usize, 0usize);
    for (c, a) in clean.iter().zip(ablated) {
        for (w, &n) in fanout.iter().enumerate() {
            if n == 0 {
                continue;
            }
            match cosine_similarity(&c[w], &a[w]) {
                Some(cos) => {
                    sum += cos * n as f64;
                    pairs += n;
                }
                None => skipped += n,
            }
        }
    }
    if skipped > 0 {
        log::warn!("edge similarity ({}): skipped {skipped} zero-norm pairs", strategy.name());
    }
    EdgeSimilarity {
        strategy,
        mean_cosine: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
        pairs,
        skipped,
    }
}

/// Prompt with every token after the first redrawn uniformly from the
/// non-special vocabulary.
fn random_prompt<R: Rng>(prompt: &[usize], vocab: usize, rng: &mut R) -> Vec<usize> {
    let mut p = prompt.to_vec();
    for t in p.iter_mut().skip(1) {
        *t = rng.random_range(BOS_ID + 1..vocab);
    }
    p
}

/// Clean-vs-ablated edge representation similarity under one strategy.
pub fn edge_similarity_experiment(
    params: &ModelParams,
    topology: &GraphTopology,
    examples: &[TaskExample],
    strategy: AblationStrategy,
    seed: u64,
) -> Result<EdgeSimilarity> {
    if examples.is_empty() {
        return Err(Error::Input("edge similarity needs at least one example".into()));
    }
    let prompts: Vec<&[usize]> = examples.iter().map(|e| e.prompt.as_slice()).collect();
    let clean = final_node_states(params, topology, &prompts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ablated = match strategy {
        AblationStrategy::Mean => {
            let n = MEAN_REFERENCE_SIZE.min(examples.len());
            let idx = rand::seq::index::sample(&mut rng, examples.len(), n);
            let reference: Vec<&[usize]> = idx.iter().map(|i| prompts[i]).collect();
            let states = final_node_states(params, topology, &reference)?;
            let mut mean: Vec<Vec<f64>> = states[0].iter().map(|v| vec![0.0; v.len()]).collect();
            for s in &states {
                for (m, v) in mean.iter_mut().zip(s) {
                    m.iter_mut().zip(v).for_each(|(a, b)| *a += b / n as f64);
                }
            }
            vec![mean; examples.len()]
        }
        AblationStrategy::Interchange => {
            let corrupted: Vec<&[usize]> = examples.iter().map(|e| e.corrupted.as_slice()).collect();
            final_node_states(params, topology, &corrupted)?
        }
        AblationStrategy::Random => {
            let random: Vec<Vec<usize>> = prompts
                .iter()
                .map(|p| random_prompt(p, params.config.vocab, &mut rng))
                .collect();
            final_node_states(params, topology, &random)?
        }
    };
    Ok(edge_similarity(topology, &clean, &ablated, strategy))
}

/// Everything produced by one discovery run.
#[derive(Clone, Debug)]
pub struct Discovery {
    pub outcome: TrainOutcome,
    /// Noise-free binary masks of the best checkpoint, before pruning.
    pub masks: SampledMasks,
    pub circuit: Circuit,
}

/// Train masks, take the best checkpoint, binarize and prune.
pub fn discover(params: &ModelParams, splits: Splits, config: &TrainConfig) -> Result<Discovery> {
    let topology = GraphTopology::build(&params.config);
    let layout = WeightLayout::new(&params.config, &topology);
    let outcome = train_on_splits(params, splits, config)?;
    let masks = deterministic_binarize(&outcome.best_checkpoint().logits, &topology, &layout);
    let circuit = prune(&masks, &topology, &layout)?;
    Ok(Discovery {
        outcome,
        masks,
        circuit,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda_s: f64,
    pub weight_density: f64,
    pub node_density: f64,
    /// Edges left open between kept nodes, whatever the mode.
    pub edge_density: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    /// One point per grid value, in ascending `lambda_s`.
    pub points: Vec<SweepPoint>,
    /// Adjacent grid values whose node or edge density went up.
    pub violations: usize,
}

/// Discover and evaluate one circuit per `lambda_s` in `grid`.
pub fn sparsity_sweep(params: &ModelParams, splits: &Splits, base: &TrainConfig, grid: &[f64]) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::Config("sparsity grid is empty".into()));
    }
    let topology = GraphTopology::build(&params.config);
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(grid.len());
    for &lambda_s in &grid {
        let config = TrainConfig { lambda_s, ..base.clone() };
        let d = discover(params, splits.clone(), &config)?;
        let dens = d.circuit.structural_densities(&topology);
        let accuracy = faithfulness(params, &topology, &d.circuit, &splits.test.examples)?;
        log::info!(
            "sweep {} lambda_s {lambda_s}: node {:.2}% edge {:.2}% accuracy {accuracy:.4}",
            config.mode.name(),
            dens.node_density,
            dens.edge_density
        );
        points.push(SweepPoint {
            lambda_s,
            weight_density: dens.weight_density,
            node_density: dens.node_density,
            edge_density: dens.edge_density,
            accuracy,
        });
    }
    let mut violations = 0;
    for w in points.windows(2) {
        if w[1].node_density > w[0].node_density || w[1].edge_density > w[0].edge_density {
            log::warn!(
                "density rose from lambda_s {} to {}: node {:.2} -> {:.2}, edge {:.2} -> {:.2}",
                w[0].lambda_s,
                w[1].lambda_s,
                w[0].node_density,
                w[1].node_density,
                w[0].edge_density,
                w[1].edge_density
            );
            violations += 1;
        }
    }
    Ok(Sweep { points, violations })
}

impl Sweep {
    /// Points ordered by edge density, then node density.
    pub fn sorted_by_density(&self) -> Vec<SweepPoint> {
        let mut p = self.points.clone();
        p.sort_by(|a, b| a.edge_density.total_cmp(&b.edge_density).then(a.node_density.total_cmp(&b.node_density)));
        p
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda_s,weight_density,node_density,edge_density,accuracy\n");
        for p in self.sorted_by_density() {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{:.6}",
                p.lambda_s, p.weight_density, p.node_density, p.edge_density, p.accuracy
            );
        }
        s
    }

    /// Best accuracy among points with edge density at most `density`.
    pub fn envelope(&self, density: f64) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.edge_density <= density)
            .map(|p| p.accuracy)
            .max_by(f64::total_cmp)
    }

    /// Whether this curve's envelope reaches every point of `other`, less
    /// `tolerance` accuracy, at that point's edge density.
    pub fn weakly_dominates(&self, other: &Sweep, tolerance: f64) -> bool {
        other
            .points
            .iter()
            .all(|p| self.envelope(p.edge_density).is_some_and(|a| a >= p.accuracy - tolerance))
    }
}

pub fn heads_csv(counts: &[usize]) -> String {
    let mut s = String::from("layer,count\n");
    for (l, c) in counts.iter().enumerate() {
        let _ = writeln!(s, "{l},{c}");
    }
    s
}

pub fn importance_csv(drops: &[f64]) -> String {
    let mut s = String::from("layer,accuracy_drop\n");
    for (l, d) in drops.iter().enumerate() {
        let _ = writeln!(s, "{l},{d:.6}");
    }
    s
}

pub fn similarity_csv(results: &[EdgeSimilarity]) -> String {
    let mut s = String::from("strategy,mean_cosine,pairs,skipped\n");
    for r in results {
        let _ = writeln!(s, "{},{:.6},{},{}", r.strategy.name(), r.mean_cosine, r.pairs, r.skipped);
    }
    s
}
