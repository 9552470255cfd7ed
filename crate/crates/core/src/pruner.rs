//! Post-hoc circuit simplification: zero-density node removal followed by
//! reachability pruning, density accounting and DOT export.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::MaskedModel;
use crate::mask::{bits_to_string, string_to_bits, MaskMode, SampledMasks};
use crate::model::{GraphTopology, ModelParams, NodeId, NodeKind, WeightLayout};

/// A pruned binary circuit. Masks are expanded to every maskable weight and
/// edge; anything outside the kept node set is closed.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub mode: MaskMode,
    pub fingerprint: String,
    pub weights: Vec<f64>,
    pub edges: Vec<f64>,
    /// Kept nodes, indexed by node id.
    pub nodes: Vec<bool>,
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub weight_density: f64,
    pub node_density: f64,
    pub edge_density: f64,
}

fn check_binary(v: &[f64]) -> Result<()> {
    match v.iter().find(|&&x| x != 0.0 && x != 1.0) {
        Some(x) => Err(Error::Contract(format!("mask value {x} is not binary"))),
        None => Ok(()),
    }
}

/// Drop zero-density nodes, then keep the nodes that are both reachable from
/// the input and able to reach the output over open edges.
pub fn prune(masks: &SampledMasks, topology: &GraphTopology, layout: &WeightLayout) -> Result<Circuit> {
    if masks.weights.len() != layout.total() || masks.edges.len() != topology.num_edges() {
        return Err(Error::Input("mask lengths do not match the topology".into()));
    }
    check_binary(&masks.weights)?;
    check_binary(&masks.edges)?;
    let n = topology.num_nodes();
    let zero_density = |node: NodeId| {
        layout
            .node_range(node)
            .is_some_and(|r| masks.weights[r].iter().all(|&w| w == 0.0))
    };
    let mut alive: Vec<bool> = (0..n)
        .map(|node| matches!(topology.node(node), NodeKind::AttnOutput { .. }) || !zero_density(node))
        .collect();
    for node in 0..n {
        if let Some(src) = topology.head_sources(node) {
            if zero_density(node) && src.iter().all(|&s| !alive[s]) {
                alive[node] = false;
            }
        }
    }
    loop {
        let fwd = reach(topology, &masks.edges, &alive, true);
        let bwd = reach(topology, &masks.edges, &alive, false);
        let next: Vec<bool> = (0..n).map(|i| alive[i] && fwd[i] && bwd[i]).collect();
        if next == alive {
            break;
        }
        alive = next;
    }
    alive[topology.input()] = true;
    alive[topology.output()] = true;
    Ok(finish(masks, topology, layout, alive))
}

fn finish(masks: &SampledMasks, topology: &GraphTopology, layout: &WeightLayout, nodes: Vec<bool>) -> Circuit {
    let mut weights = masks.weights.clone();
    for (node, &keep) in nodes.iter().enumerate() {
        if !keep {
            if let Some(r) = layout.node_range(node) {
                weights[r].fill(0.0);
            }
        }
    }
    let edges = topology
        .edges()
        .iter()
        .zip(&masks.edges)
        .map(|(e, &m)| if nodes[e.reader] && nodes[e.writer] { m } else { 0.0 })
        .collect();
    Circuit {
        mode: masks.mode,
        fingerprint: topology.fingerprint().to_string(),
        weights,
        edges,
        nodes,
    }
}

/// Reachability from the input (`forward`) or to the output over open edges
/// between alive nodes; Q/K/V→O wiring always counts as open.
fn reach(topology: &GraphTopology, edges: &[f64], alive: &[bool], forward: bool) -> Vec<bool> {
    let n = topology.num_nodes();
    let mut seen = vec![false; n];
    let start = if forward { topology.input() } else { topology.output() };
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(v) = queue.pop_front() {
        let mut next: Vec<NodeId> = Vec::new();
        if forward {
            next.extend(topology.out_edges(v).iter().filter(|&&e| edges[e] == 1.0).map(|&e| topology.edges()[e].reader));
            next.extend(topology.head_sink(v));
        } else {
            next.extend(topology.in_edges(v).iter().filter(|&&e| edges[e] == 1.0).map(|&e| topology.edges()[e].writer));
            if let Some(src) = topology.head_sources(v) {
                next.extend(src);
            }
        }
        for u in next {
            if alive[u] && !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    seen
}

impl Circuit {
    /// Binary masks of this circuit, for re-pruning or reversal.
    pub fn masks(&self) -> SampledMasks {
        SampledMasks {
            mode: self.mode,
            weight_scores: self.weights.clone(),
            weights: self.weights.clone(),
            edge_scores: self.edges.clone(),
            edges: self.edges.clone(),
        }
    }

    pub fn masked_model(&self, params: &ModelParams) -> Result<MaskedModel> {
        MaskedModel::new(params, Some(&self.weights), Some(&self.edges))
    }

    pub fn check_topology(&self, topology: &GraphTopology) -> Result<()> {
        if self.fingerprint != topology.fingerprint() {
            return Err(Error::TopologyMismatch {
                expected: topology.fingerprint().to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn open_edges(&self) -> usize {
        self.edges.iter().filter(|&&e| e == 1.0).count()
    }

    pub fn open_weights(&self) -> usize {
        self.weights.iter().filter(|&&w| w == 1.0).count()
    }

    /// Weight, node and edge density. A family the mode does not learn
    /// reports 100.
    pub fn densities(&self, topology: &GraphTopology) -> DensityReport {
        let pct = |open: usize, total: usize| {
            if total == 0 {
                0.0
            } else {
                100.0 * open as f64 / total as f64
            }
        };
        let owners = topology.weight_owners();
        let kept = owners.iter().filter(|&&o| self.nodes[o]).count();
        DensityReport {
            weight_density: if self.mode.learns_weights() {
                pct(self.open_weights(), self.weights.len())
            } else {
                100.0
            },
            node_density: pct(kept, owners.len()),
            edge_density: if self.mode.learns_edges() {
                pct(self.open_edges(), self.edges.len())
            } else {
                100.0
            },
        }
    }

    /// Densities of what the circuit actually keeps, ignoring the forced
    /// family convention. Edge density here counts edges left open between
    /// kept nodes even when the mode never learned them.
    pub fn structural_densities(&self, topology: &GraphTopology) -> DensityReport {
        let report = self.densities(topology);
        let pct = |open: usize, total: usize| if total == 0 { 0.0 } else { 100.0 * open as f64 / total as f64 };
        DensityReport {
            weight_density: pct(self.open_weights(), self.weights.len()),
            edge_density: pct(self.open_edges(), self.edges.len()),
            ..report
        }
    }

    /// Graphviz rendering: kept nodes, open edges writer → reader, and the
    /// fixed head wiring dashed.
    pub fn to_dot(&self, topology: &GraphTopology) -> String {
        let mut s = String::from("digraph circuit {\n  rankdir=BT;\n");
        for (id, kind) in topology.nodes().iter().enumerate() {
            if self.nodes[id] {
                let _ = writeln!(s, "  n{id} [label=\"{}\"];", kind.label());
            }
        }
        for (k, e) in topology.edges().iter().enumerate() {
            if self.edges[k] == 1.0 {
                let _ = writeln!(s, "  n{} -> n{};", e.writer, e.reader);
            }
        }
        for e in topology.fixed_edges() {
            if self.nodes[e.reader] && self.nodes[e.writer] {
                let _ = writeln!(s, "  n{} -> n{} [style=dashed];", e.writer, e.reader);
            }
        }
        s.push_str("}\n");
        s
    }
}

pub const CIRCUIT_FORMAT: &str = "discogp-circuit/v1";

/// JSON form of a pruned circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitDocument {
    pub format: String,
    pub mode: MaskMode,
    pub fingerprint: String,
    pub nodes: Vec<String>,
    pub densities: DensityReport,
    pub weight_mask: String,
    pub edge_mask: String,
}

impl CircuitDocument {
    pub fn new(circuit: &Circuit, topology: &GraphTopology) -> Self {
        CircuitDocument {
            format: CIRCUIT_FORMAT.into(),
            mode: circuit.mode,
            fingerprint: circuit.fingerprint.clone(),
            nodes: topology
                .nodes()
                .iter()
                .enumerate()
                .filter(|(i, _)| circuit.nodes[*i])
                .map(|(_, k)| k.label())
                .collect(),
            densities: circuit.densities(topology),
            weight_mask: bits_to_string(&circuit.weights),
            edge_mask: bits_to_string(&circuit.edges),
        }
    }

    pub fn circuit(&self, topology: &GraphTopology) -> Result<Circuit> {
        if self.format != CIRCUIT_FORMAT {
            return Err(Error::Format(format!("unsupported circuit format {:?}", self.format)));
        }
        if self.fingerprint != topology.fingerprint() {
            return Err(Error::TopologyMismatch {
                expected: topology.fingerprint().to_string(),
                found: self.fingerprint.clone(),
            });
        }
        let labels: Vec<String> = topology.nodes().iter().map(|k| k.label()).collect();
        let mut nodes = vec![false; labels.len()];
        for name in &self.nodes {
            let i = labels
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| Error::Format(format!("unknown node {name:?}")))?;
            nodes[i] = true;
        }
        let weights = string_to_bits(&self.weight_mask)?;
        let edges = string_to_bits(&self.edge_mask)?;
        if edges.len() != topology.num_edges() {
            return Err(Error::Format("edge mask length does not match the topology".into()));
        }
        Ok(Circuit {
            mode: self.mode,
            fingerprint: self.fingerprint.clone(),
            weights,
            edges,
            nodes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::reverse;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(layers: usize, heads: usize) -> (GraphTopology, WeightLayout) {
        let c = ModelConfig {
            layers,
            heads,
            d_model: 4 * heads,
            d_head: 4,
            d_ff: 8,
            vocab: 7,
            max_seq: 6,
        };
        let t = GraphTopology::build(&c);
        let l = WeightLayout::new(&c, &t);
        (t, l)
    }

    fn random_masks(t: &GraphTopology, l: &WeightLayout, seed: u64, p_open: f64) -> SampledMasks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut full = SampledMasks::full(MaskMode::Joint, t, l);
        // Close whole nodes sometimes so zero-density removal is exercised.
        for &o in t.weight_owners() {
            if rng.random_bool(0.3) {
                full.weights[l.node_range(o).unwrap()].fill(0.0);
            }
        }
        for e in full.edges.iter_mut() {
            *e = if rng.random_bool(p_open) { 1.0 } else { 0.0 };
        }
        full
    }

    #[test]
    fn all_open_is_identity() {
        let (t, l) = setup(2, 2);
        let full = SampledMasks::full(MaskMode::Joint, &t, &l);
        let c = prune(&full, &t, &l).unwrap();
        assert_eq!(c.weights, full.weights);
        assert_eq!(c.edges, full.edges);
        assert!(c.nodes.iter().all(|&k| k));
        let d = c.densities(&t);
        assert_eq!((d.weight_density, d.node_density, d.edge_density), (100.0, 100.0, 100.0));
    }

    #[test]
    fn empty_circuit_densities_are_zero() {
        let (t, l) = setup(2, 2);
        let c = prune(&SampledMasks::empty(MaskMode::Joint, &t, &l), &t, &l).unwrap();
        let d = c.densities(&t);
        assert_eq!((d.weight_density, d.node_density, d.edge_density), (0.0, 0.0, 0.0));
    }

    #[test]
    fn dead_end_node_is_removed() {
        // Only IN→MLP0→OUT and IN→MLP1 are open: MLP1 cannot reach OUT.
        let (t, l) = setup(2, 1);
        let mut m = SampledMasks::full(MaskMode::Joint, &t, &l);
        m.edges.fill(0.0);
        let (a, b) = (t.mlp_node(0), t.mlp_node(1));
        for (r, w) in [(a, t.input()), (t.output(), a), (b, t.input())] {
            m.edges[t.edge_index(r, w).unwrap()] = 1.0;
        }
        let c = prune(&m, &t, &l).unwrap();
        assert!(c.nodes[a]);
        assert!(!c.nodes[b]);
        assert_eq!(c.edges[t.edge_index(b, t.input()).unwrap()], 0.0);
        assert!(l.node_range(b).unwrap().all(|i| c.weights[i] == 0.0));
    }

    #[test]
    fn unreachable_node_loses_out_edges() {
        let (t, l) = setup(2, 1);
        let mut m = SampledMasks::full(MaskMode::Joint, &t, &l);
        let a = t.mlp_node(1);
        for &e in t.in_edges(a) {
            m.edges[e] = 0.0;
        }
        let c = prune(&m, &t, &l).unwrap();
        assert!(!c.nodes[a]);
        assert!(t.out_edges(a).iter().all(|&e| c.edges[e] == 0.0));
    }

    #[test]
    fn attention_output_needs_dead_sources() {
        let (t, l) = setup(1, 1);
        let [q, k, v, o] = t.head_nodes(0, 0);
        let mut m = SampledMasks::full(MaskMode::Joint, &t, &l);
        m.weights[l.node_range(o).unwrap()].fill(0.0);
        assert!(prune(&m, &t, &l).unwrap().nodes[o]);
        for n in [q, k, v] {
            m.weights[l.node_range(n).unwrap()].fill(0.0);
        }
        let c = prune(&m, &t, &l).unwrap();
        assert!(!c.nodes[o] && !c.nodes[q]);
    }

    #[test]
    fn head_counts_via_nodes() {
        let (t, l) = setup(2, 4);
        let mut m = SampledMasks::full(MaskMode::Joint, &t, &l);
        for layer in 0..2 {
            for head in 0..4 {
                if ![(0, 1), (1, 0), (1, 3)].contains(&(layer, head)) {
                    for n in t.head_nodes(layer, head) {
                        m.weights[l.node_range(n).unwrap()].fill(0.0);
                    }
                }
            }
        }
        let c = prune(&m, &t, &l).unwrap();
        let kept: Vec<usize> = (0..2)
            .map(|layer| (0..4).filter(|&h| c.nodes[t.head_nodes(layer, h)[3]]).count())
            .collect();
        assert_eq!(kept, vec![1, 2]);
    }

    #[test]
    fn forced_families_report_full_density() {
        let (t, l) = setup(2, 2);
        let mut sp = SampledMasks::full(MaskMode::WeightOnly, &t, &l);
        sp.weights[l.node_range(t.mlp_node(1)).unwrap()].fill(0.0);
        let d = prune(&sp, &t, &l).unwrap().densities(&t);
        assert_eq!(d.edge_density, 100.0);
        assert!(d.weight_density < 100.0);
        let mut eo = SampledMasks::full(MaskMode::EdgeOnly, &t, &l);
        eo.edges[0] = 0.0;
        let d = prune(&eo, &t, &l).unwrap().densities(&t);
        assert_eq!(d.weight_density, 100.0);
        assert!(d.edge_density < 100.0);
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        let (t, l) = setup(1, 1);
        let mut m = SampledMasks::full(MaskMode::Joint, &t, &l);
        m.edges[0] = 0.5;
        assert!(matches!(prune(&m, &t, &l), Err(Error::Contract(_))));
    }

    #[test]
    fn document_round_trip_and_dot() {
        let (t, l) = setup(2, 2);
        let c = prune(&random_masks(&t, &l, 3, 0.6), &t, &l).unwrap();
        let doc = CircuitDocument::new(&c, &t);
        let json = serde_json::to_string(&doc).unwrap();
        let back: CircuitDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back.circuit(&t).unwrap(), c);
        let dot = c.to_dot(&t);
        assert!(dot.starts_with("digraph circuit {"));
        assert!(dot.contains("label=\"IN\"") && dot.contains("label=\"OUT\""));
        let (t2, _) = setup(1, 2);
        assert!(matches!(back.circuit(&t2), Err(Error::TopologyMismatch { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prune_is_idempotent_and_consistent(seed in any::<u64>(), p in 0.2f64..0.95) {
            let (t, l) = setup(2, 2);
            let c = prune(&random_masks(&t, &l, seed, p), &t, &l).unwrap();
            let again = prune(&c.masks(), &t, &l).unwrap();
            prop_assert_eq!(&again, &c);
            for (k, e) in t.edges().iter().enumerate() {
                if c.edges[k] == 1.0 {
                    prop_assert!(c.nodes[e.reader] && c.nodes[e.writer]);
                }
            }
        }

        #[test]
        fn closing_an_edge_never_raises_density(seed in any::<u64>(), pick in any::<usize>()) {
            let (t, l) = setup(2, 2);
            let m = random_masks(&t, &l, seed, 0.7);
            let before = prune(&m, &t, &l).unwrap().densities(&t);
            let mut closed = m.clone();
            closed.edges[pick % t.num_edges()] = 0.0;
            let after = prune(&closed, &t, &l).unwrap().densities(&t);
            prop_assert!(after.weight_density <= before.weight_density);
            prop_assert!(after.node_density <= before.node_density);
            prop_assert!(after.edge_density <= before.edge_density);
        }

        #[test]
        fn reversal_of_pruned_masks_stays_binary(seed in any::<u64>()) {
            let (t, l) = setup(1, 2);
            let c = prune(&random_masks(&t, &l, seed, 0.5), &t, &l).unwrap();
            let r = reverse(&c.masks());
            prop_assert!(r.weights.iter().chain(&r.edges).all(|&x| x == 0.0 || x == 1.0));
        }
    }
}
