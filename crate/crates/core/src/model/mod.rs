//! Toy decoder-only transformer: configuration, parameters, the weight file
//! format, and the computation-graph forward pass.

mod forward;
pub mod graph;

use std::io::{Read, Write};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub use forward::{
    dense_forward, graph_forward, label_logprobs, masked_residual_read, Batch, ForwardMasks,
    GraphOutputs, TapeParams, WeightMasking, LN_EPS,
};
pub use graph::{build_topology, Edge, GraphTopology, NodeId, NodeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.heads,
            self.d_model,
            self.d_head,
            self.d_ff,
            self.vocab,
            self.max_seq,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.d_model != self.heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model ({}) must equal heads ({}) * d_head ({})",
                self.d_model, self.heads, self.d_head
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Matrix,
    pub heads: Vec<HeadParams>,
    pub mlp_norm: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

/// All model weights. Embeddings, unembedding and norm gains are never
/// masked; every projection matrix belongs to exactly one graph node.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embed: Matrix,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Matrix,
    pub unembed: Matrix,
}

/// One maskable projection matrix and its slice of the flat weight-mask vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskableMatrix {
    pub node: NodeId,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl MaskableMatrix {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat ordering of every maskable weight scalar: node order, then matrix
/// order within the node, then row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightLayout {
    matrices: Vec<MaskableMatrix>,
    node_ranges: Vec<Option<std::ops::Range<usize>>>,
    total: usize,
}

impl WeightLayout {
    pub fn new(config: &ModelConfig, topology: &GraphTopology) -> Self {
        let mut matrices = Vec::new();
        let mut node_ranges = vec![None; topology.num_nodes()];
        let mut offset = 0;
        for (id, kind) in topology.nodes().iter().enumerate() {
            let shapes: Vec<(String, usize, usize)> = match *kind {
                NodeKind::AttnQuery { layer, head } => {
                    vec![(format!("blocks.{layer}.heads.{head}.wq"), config.d_model, config.d_head)]
                }
                NodeKind::AttnKey { layer, head } => {
                    vec![(format!("blocks.{layer}.heads.{head}.wk"), config.d_model, config.d_head)]
                }
                NodeKind::AttnValue { layer, head } => {
                    vec![(format!("blocks.{layer}.heads.{head}.wv"), config.d_model, config.d_head)]
                }
                NodeKind::AttnOutput { layer, head } => {
                    vec![(format!("blocks.{layer}.heads.{head}.wo"), config.d_head, config.d_model)]
                }
                NodeKind::Mlp { layer } => vec![
                    (format!("blocks.{layer}.mlp.w_in"), config.d_model, config.d_ff),
                    (format!("blocks.{layer}.mlp.w_out"), config.d_ff, config.d_model),
                ],
                NodeKind::Input | NodeKind::Output => Vec::new(),
            };
            if shapes.is_empty() {
                continue;
            }
            let start = offset;
            for (name, rows, cols) in shapes {
                matrices.push(MaskableMatrix {
                    node: id,
                    name,
                    rows,
                    cols,
                    offset,
                });
                offset += rows * cols;
            }
            node_ranges[id] = Some(start..offset);
        }
        WeightLayout {
            matrices,
            node_ranges,
            total: offset,
        }
    }

    pub fn matrices(&self) -> &[MaskableMatrix] {
        &self.matrices
    }

    /// Total number of maskable weight scalars.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Slice of the flat weight vector owned by `node`.
    pub fn node_range(&self, node: NodeId) -> Option<std::ops::Range<usize>> {
        self.node_ranges[node].clone()
    }
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

const WEIGHT_MAGIC: &[u8; 8] = b"DISCOGPW";
const WEIGHT_VERSION: u32 = 1;

impl ModelParams {
    /// Random initialization: projections ~ N(0, 1/fan_in), with the residual
    /// write-back projections further scaled by 1/sqrt(2L); unit norm gains.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let resid_scale = 1.0 / (2.0 * c.layers as f64).sqrt();
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
        let token_embed = normal_matrix(rng, c.vocab, c.d_model, 1.0);
        let pos_embed = normal_matrix(rng, c.max_seq, c.d_model, 0.5);
        let mut layers = Vec::with_capacity(c.layers);
        for _ in 0..c.layers {
            let heads = (0..c.heads)
                .map(|_| HeadParams {
                    wq: normal_matrix(rng, c.d_model, c.d_head, inv_sqrt(c.d_model)),
                    wk: normal_matrix(rng, c.d_model, c.d_head, inv_sqrt(c.d_model)),
                    wv: normal_matrix(rng, c.d_model, c.d_head, inv_sqrt(c.d_model)),
                    wo: normal_matrix(rng, c.d_head, c.d_model, inv_sqrt(c.d_model) * resid_scale),
                })
                .collect();
            layers.push(LayerParams {
                attn_norm: Array2::ones((1, c.d_model)),
                heads,
                mlp_norm: Array2::ones((1, c.d_model)),
                w_in: normal_matrix(rng, c.d_model, c.d_ff, inv_sqrt(c.d_model)),
                w_out: normal_matrix(rng, c.d_ff, c.d_model, inv_sqrt(c.d_ff) * resid_scale),
            });
        }
        Ok(ModelParams {
            config: c,
            token_embed,
            pos_embed,
            layers,
            final_norm: Array2::ones((1, c.d_model)),
            unembed: normal_matrix(rng, c.d_model, c.vocab, inv_sqrt(c.d_model)),
        })
    }

    /// Every tensor with its canonical name, in file order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embed.tokens".to_string(), &self.token_embed),
            ("embed.positions".to_string(), &self.pos_embed),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("blocks.{i}.attn_norm.gain"), &layer.attn_norm));
            for (j, h) in layer.heads.iter().enumerate() {
                out.push((format!("blocks.{i}.heads.{j}.wq"), &h.wq));
                out.push((format!("blocks.{i}.heads.{j}.wk"), &h.wk));
                out.push((format!("blocks.{i}.heads.{j}.wv"), &h.wv));
                out.push((format!("blocks.{i}.heads.{j}.wo"), &h.wo));
            }
            out.push((format!("blocks.{i}.mlp_norm.gain"), &layer.mlp_norm));
            out.push((format!("blocks.{i}.mlp.w_in"), &layer.w_in));
            out.push((format!("blocks.{i}.mlp.w_out"), &layer.w_out));
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.token_embed, &mut self.pos_embed];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            for h in &mut layer.heads {
                out.push(&mut h.wq);
                out.push(&mut h.wk);
                out.push(&mut h.wv);
                out.push(&mut h.wo);
            }
            out.push(&mut layer.mlp_norm);
            out.push(&mut layer.w_in);
            out.push(&mut layer.w_out);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    /// Maskable matrices in [`WeightLayout`] order.
    pub fn maskable(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for h in &layer.heads {
                out.extend([&h.wq, &h.wk, &h.wv, &h.wo]);
            }
            out.extend([&layer.w_in, &layer.w_out]);
        }
        out
    }

    fn maskable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for h in &mut layer.heads {
                out.push(&mut h.wq);
                out.push(&mut h.wk);
                out.push(&mut h.wv);
                out.push(&mut h.wo);
            }
            out.push(&mut layer.w_in);
            out.push(&mut layer.w_out);
        }
        out
    }

    /// Copy with every maskable weight multiplied by its entry in `mask`
    /// (flat, [`WeightLayout`] order).
    pub fn with_weight_mask(&self, mask: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        let mut offset = 0;
        for m in out.maskable_mut() {
            let n = m.len();
            let slice = mask.get(offset..offset + n).ok_or_else(|| {
                Error::Input(format!("weight mask has {} entries, model needs more", mask.len()))
            })?;
            for (w, &g) in m.iter_mut().zip(slice) {
                *w *= g;
            }
            offset += n;
        }
        if offset != mask.len() {
            return Err(Error::Input(format!(
                "weight mask has {} entries, model has {offset} maskable weights",
                mask.len()
            )));
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(WEIGHT_MAGIC)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        let c = &self.config;
        for v in [c.layers, c.heads, c.d_model, c.d_head, c.d_ff, c.vocab, c.max_seq] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, m) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.nrows() as u64).to_le_bytes())?;
            w.write_all(&(m.ncols() as u64).to_le_bytes())?;
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != WEIGHT_VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = read_u64(&mut r)? as usize;
        }
        let config = ModelConfig {
            layers: dims[0],
            heads: dims[1],
            d_model: dims[2],
            d_head: dims[3],
            d_ff: dims[4],
            vocab: dims[5],
            max_seq: dims[6],
        };
        config.validate()?;
        let mut params = ModelParams::zeros(config);
        let expected: Vec<(String, (usize, usize))> = params
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.dim()))
            .collect();
        let count = read_u32(&mut r)? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "weight file has {count} tensors, config implies {}",
                expected.len()
            )));
        }
        for ((name, dim), slot) in expected.into_iter().zip(params.tensors_mut()) {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let found = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
            if found != name {
                return Err(Error::Format(format!("expected tensor {name}, found {found}")));
            }
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            if (rows, cols) != dim {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {rows}x{cols}, expected {}x{}",
                    dim.0, dim.1
                )));
            }
            let mut bytes = vec![0u8; rows * cols * 8];
            r.read_exact(&mut bytes)?;
            for (v, chunk) in slot.iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    fn zeros(c: ModelConfig) -> Self {
        let z = |r, k| Array2::zeros((r, k));
        ModelParams {
            config: c,
            token_embed: z(c.vocab, c.d_model),
            pos_embed: z(c.max_seq, c.d_model),
            layers: (0..c.layers)
                .map(|_| LayerParams {
                    attn_norm: z(1, c.d_model),
                    heads: (0..c.heads)
                        .map(|_| HeadParams {
                            wq: z(c.d_model, c.d_head),
                            wk: z(c.d_model, c.d_head),
                            wv: z(c.d_model, c.d_head),
                            wo: z(c.d_head, c.d_model),
                        })
                        .collect(),
                    mlp_norm: z(1, c.d_model),
                    w_in: z(c.d_model, c.d_ff),
                    w_out: z(c.d_ff, c.d_model),
                })
                .collect(),
            final_norm: z(1, c.d_model),
            unembed: z(c.d_model, c.vocab),
        }
    }
}
