//! Computation-graph view of the transformer.
//!
//! Nodes are the input embedding, the query/key/value/output parts of every
//! attention head, one node per MLP, and the output (unembedding) node. A
//! maskable edge `(reader, writer)` means the reader's residual input contains
//! the writer's output. Q/K/V feed their head's output node through fixed,
//! unmaskable wiring.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Input,
    AttnQuery { layer: usize, head: usize },
    AttnKey { layer: usize, head: usize },
    AttnValue { layer: usize, head: usize },
    AttnOutput { layer: usize, head: usize },
    Mlp { layer: usize },
    Output,
}

impl NodeKind {
    /// DOT/report label: `IN`, `OUT`, `L{i}H{j}.{Q|K|V|O}`, `L{i}.MLP`.
    pub fn label(&self) -> String {
        match *self {
            NodeKind::Input => "IN".into(),
            NodeKind::Output => "OUT".into(),
            NodeKind::AttnQuery { layer, head } => format!("L{layer}H{head}.Q"),
            NodeKind::AttnKey { layer, head } => format!("L{layer}H{head}.K"),
            NodeKind::AttnValue { layer, head } => format!("L{layer}H{head}.V"),
            NodeKind::AttnOutput { layer, head } => format!("L{layer}H{head}.O"),
            NodeKind::Mlp { layer } => format!("L{layer}.MLP"),
        }
    }

    /// Whether the node carries maskable weights.
    pub fn owns_weights(&self) -> bool {
        !matches!(self, NodeKind::Input | NodeKind::Output)
    }

    pub fn layer(&self) -> Option<usize> {
        match *self {
            NodeKind::AttnQuery { layer, .. }
            | NodeKind::AttnKey { layer, .. }
            | NodeKind::AttnValue { layer, .. }
            | NodeKind::AttnOutput { layer, .. }
            | NodeKind::Mlp { layer } => Some(layer),
            NodeKind::Input | NodeKind::Output => None,
        }
    }

    /// Nodes whose output is written into the residual stream.
    pub fn writes_residual(&self) -> bool {
        matches!(
            self,
            NodeKind::Input | NodeKind::AttnOutput { .. } | NodeKind::Mlp { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub reader: NodeId,
    pub writer: NodeId,
}

#[derive(Clone, Debug)]
pub struct GraphTopology {
    layers: usize,
    heads: usize,
    nodes: Vec<NodeKind>,
    edges: Vec<Edge>,
    in_edges: Vec<Vec<usize>>,
    out_edges: Vec<Vec<usize>>,
    fixed_edges: Vec<Edge>,
    owner_ordinal: Vec<Option<usize>>,
    owners: Vec<NodeId>,
    fingerprint: String,
}

impl GraphTopology {
    pub fn build(config: &ModelConfig) -> Self {
        let (layers, heads) = (config.layers, config.heads);
        let mut nodes = vec![NodeKind::Input];
        for layer in 0..layers {
            for head in 0..heads {
                nodes.push(NodeKind::AttnQuery { layer, head });
                nodes.push(NodeKind::AttnKey { layer, head });
                nodes.push(NodeKind::AttnValue { layer, head });
                nodes.push(NodeKind::AttnOutput { layer, head });
            }
            nodes.push(NodeKind::Mlp { layer });
        }
        nodes.push(NodeKind::Output);

        let mut edges = Vec::new();
        let mut fixed_edges = Vec::new();
        for (reader, kind) in nodes.iter().enumerate() {
            let writers: Vec<NodeId> = match *kind {
                NodeKind::Input => Vec::new(),
                NodeKind::AttnQuery { layer, .. }
                | NodeKind::AttnKey { layer, .. }
                | NodeKind::AttnValue { layer, .. } => {
                    Self::writers_where(&nodes, |l| l < layer)
                }
                NodeKind::Mlp { layer } => nodes
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| match **w {
                        NodeKind::Input => true,
                        NodeKind::Mlp { layer: l } => l < layer,
                        NodeKind::AttnOutput { layer: l, .. } => l <= layer,
                        _ => false,
                    })
                    .map(|(i, _)| i)
                    .collect(),
                NodeKind::Output => Self::writers_where(&nodes, |_| true),
                NodeKind::AttnOutput { .. } => {
                    // Q, K, V sit at reader-3, reader-2, reader-1.
                    for w in reader - 3..reader {
                        fixed_edges.push(Edge { reader, writer: w });
                    }
                    Vec::new()
                }
            };
            edges.extend(writers.into_iter().map(|writer| Edge { reader, writer }));
        }

        let mut in_edges = vec![Vec::new(); nodes.len()];
        let mut out_edges = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            in_edges[e.reader].push(i);
            out_edges[e.writer].push(i);
        }
        let mut owner_ordinal = vec![None; nodes.len()];
        let mut owners = Vec::new();
        for (id, kind) in nodes.iter().enumerate() {
            if kind.owns_weights() {
                owner_ordinal[id] = Some(owners.len());
                owners.push(id);
            }
        }

        let mut hasher = Sha256::new();
        hasher.update(
            format!(
                "discogp-topology/v1 L={} H={} d_model={} d_head={} d_ff={} V={} max_seq={}",
                config.layers,
                config.heads,
                config.d_model,
                config.d_head,
                config.d_ff,
                config.vocab,
                config.max_seq
            )
            .as_bytes(),
        );
        for e in &edges {
            hasher.update((e.reader as u64).to_le_bytes());
            hasher.update((e.writer as u64).to_le_bytes());
        }
        let fingerprint = hex::encode(&hasher.finalize()[..16]);

        GraphTopology {
            layers,
            heads,
            nodes,
            edges,
            in_edges,
            out_edges,
            fixed_edges,
            owner_ordinal,
            owners,
            fingerprint,
        }
    }

    fn writers_where(nodes: &[NodeKind], layer_ok: impl Fn(usize) -> bool) -> Vec<NodeId> {
        nodes
            .iter()
            .enumerate()
            .filter(|(_, w)| match **w {
                NodeKind::Input => true,
                NodeKind::AttnOutput { layer, .. } | NodeKind::Mlp { layer } => layer_ok(layer),
                _ => false,
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn nodes(&self) -> &[NodeKind] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> NodeKind {
        self.nodes[id]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Maskable edges in their canonical order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn fixed_edges(&self) -> &[Edge] {
        &self.fixed_edges
    }

    /// Indices of the maskable edges read by `node`.
    pub fn in_edges(&self, node: NodeId) -> &[usize] {
        &self.in_edges[node]
    }

    /// Indices of the maskable edges whose writer is `node`.
    pub fn out_edges(&self, node: NodeId) -> &[usize] {
        &self.out_edges[node]
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    fn layer_base(&self, layer: usize) -> NodeId {
        1 + layer * (4 * self.heads + 1)
    }

    /// `[Q, K, V, O]` node ids of a head.
    pub fn head_nodes(&self, layer: usize, head: usize) -> [NodeId; 4] {
        let b = self.layer_base(layer) + 4 * head;
        [b, b + 1, b + 2, b + 3]
    }

    pub fn mlp_node(&self, layer: usize) -> NodeId {
        self.layer_base(layer) + 4 * self.heads
    }

    /// For an AttnOutput node, its Q, K, V sources.
    pub fn head_sources(&self, output: NodeId) -> Option<[NodeId; 3]> {
        matches!(self.nodes[output], NodeKind::AttnOutput { .. })
            .then(|| [output - 3, output - 2, output - 1])
    }

    /// For a Q/K/V node, its head's AttnOutput node.
    pub fn head_sink(&self, node: NodeId) -> Option<NodeId> {
        match self.nodes[node] {
            NodeKind::AttnQuery { .. } => Some(node + 3),
            NodeKind::AttnKey { .. } => Some(node + 2),
            NodeKind::AttnValue { .. } => Some(node + 1),
            _ => None,
        }
    }

    /// Nodes that own maskable weights, in node order.
    pub fn weight_owners(&self) -> &[NodeId] {
        &self.owners
    }

    /// Position of `node` within [`GraphTopology::weight_owners`].
    pub fn owner_ordinal(&self, node: NodeId) -> Option<usize> {
        self.owner_ordinal[node]
    }

    pub fn edge_index(&self, reader: NodeId, writer: NodeId) -> Option<usize> {
        self.in_edges[reader]
            .iter()
            .copied()
            .find(|&e| self.edges[e].writer == writer)
    }

    /// Hash of the model dimensions and edge list; two artifacts are
    /// compatible iff their fingerprints agree.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

pub fn build_topology(config: &ModelConfig) -> GraphTopology {
    GraphTopology::build(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            layers,
            heads,
            d_model: 4 * heads,
            d_head: 4,
            d_ff: 8,
            vocab: 10,
            max_seq: 8,
        }
    }

    fn edge_count_by_enumeration(l: usize, h: usize) -> usize {
        // Q/K/V read Input plus every earlier-layer head and MLP.
        let qkv: usize = (0..l).map(|i| 3 * h * (1 + i * (h + 1))).sum();
        // MLP i reads Input, earlier MLPs and heads up to and including layer i.
        let mlp: usize = (0..l).map(|i| 1 + i + (i + 1) * h).sum();
        qkv + mlp + 1 + l + l * h
    }

    #[test]
    fn one_layer_one_head_counts() {
        let t = build_topology(&cfg(1, 1));
        assert_eq!(t.num_nodes(), 7);
        assert_eq!(t.num_edges(), 8);
        assert_eq!(t.fixed_edges().len(), 3);
    }

    #[test]
    fn two_by_two_counts() {
        let t = build_topology(&cfg(2, 2));
        assert_eq!(t.num_nodes(), 20);
        assert_eq!(t.num_edges(), edge_count_by_enumeration(2, 2));
        let t = build_topology(&cfg(4, 4));
        assert_eq!(t.num_edges(), edge_count_by_enumeration(4, 4));
        assert_eq!(t.num_edges(), 479);
    }

    #[test]
    fn reader_rules_hold() {
        let t = build_topology(&cfg(3, 2));
        for e in t.edges() {
            let (r, w) = (t.node(e.reader), t.node(e.writer));
            assert!(w.writes_residual(), "{r:?} reads non-writer {w:?}");
            assert!(e.writer < e.reader, "edge must point backwards in node order");
            match (r, w) {
                (NodeKind::AttnQuery { layer, .. }, NodeKind::AttnOutput { layer: l, .. })
                | (NodeKind::AttnKey { layer, .. }, NodeKind::Mlp { layer: l }) => assert!(l < layer),
                (NodeKind::Mlp { layer }, NodeKind::AttnOutput { layer: l, .. }) => assert!(l <= layer),
                (NodeKind::Mlp { layer }, NodeKind::Mlp { layer: l }) => assert!(l < layer),
                _ => {}
            }
        }
        assert_eq!(t.in_edges(t.output()).len(), 1 + 3 + 3 * 2);
        assert!(t.in_edges(t.head_nodes(1, 0)[3]).is_empty());
    }

    #[test]
    fn labels_and_fingerprint() {
        let t = build_topology(&cfg(2, 2));
        assert_eq!(t.node(t.head_nodes(1, 1)[1]).label(), "L1H1.K");
        assert_eq!(t.node(t.mlp_node(0)).label(), "L0.MLP");
        assert_eq!(t.node(t.input()).label(), "IN");
        let mut other = cfg(2, 2);
        other.vocab = 11;
        assert_ne!(t.fingerprint(), build_topology(&other).fingerprint());
        assert_eq!(t.fingerprint(), build_topology(&cfg(2, 2)).fingerprint());
    }
}
