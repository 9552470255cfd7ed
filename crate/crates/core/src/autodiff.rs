//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! Every value recorded on a [`Tape`] is a row-major `f64` matrix. Vectors are
//! stored as `1×n` rows and scalars as `1×1`. A tape is rebuilt for every
//! forward pass; records are appended in evaluation order, so the record index
//! is already a topological order and [`Tape::backward`] walks it in reverse.
//!
//! Values created through [`Tape::constant`] and everything produced by
//! [`Tape::detach`] never receive gradient. Only ancestors of a
//! [`Tape::param`] leaf are differentiated.

use std::collections::VecDeque;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set. Parameters that are not tape values live in the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[a, b]`, same shape.
    Add,
    /// `[a, b]`, same shape.
    Sub,
    /// Elementwise product, `[a, b]`, same shape.
    Mul,
    /// `[x (n×m), row (1×m)]`, adds the row to every row of `x`.
    AddRow,
    /// `scale * x + shift`.
    Affine { scale: f64, shift: f64 },
    /// `[a (n×k), b (k×m)]`.
    MatMul,
    Sigmoid,
    Exp,
    Log,
    /// Exact Gaussian-CDF form `x·Φ(x)`.
    Gelu,
    /// Row-wise.
    Softmax,
    /// Row-wise.
    LogSoftmax,
    /// Row-wise normalization times a gain, `[x (n×m), gain (1×m)]`.
    LayerNorm { eps: f64 },
    /// Embedding-style lookup: output row `r` is input row `rows[r]`.
    GatherRows(Vec<usize>),
    /// Output is `n×1` with entry `r` equal to `x[pairs[r]]`.
    GatherElements(Vec<(usize, usize)>),
    /// Sum of all entries, `1×1`.
    Sum,
    /// Mean of all entries, `1×1`.
    Mean,
    /// `[x, s (1×n)]`, multiplies `x` by the scalar `s[0, index]`.
    ScaleByElement(usize),
    /// `[gates (1×n), x_0, .., x_{k-1}]`, returns `Σ gates[0, idx_k] · x_k`.
    GatedSum(Vec<usize>),
    /// `max(x, floor)`; the gradient is zero where the floor is active.
    ClampMin(f64),
    /// Forward identity, no gradient.
    Detach,
    /// `[logit, noise]`, same shape. Straight-through binary gate: the value
    /// is `detach(hard(s) − s) + s` with `s = σ((logit − noise)/τ)` and
    /// `hard(s) = 1` iff `s > 0.5`. The offset takes part in detach
    /// recording and replay.
    Gate { temperature: f64 },
    /// `[q, k, v]` stacked as consecutive blocks of `block` rows; causal
    /// scaled dot-product attention within each block.
    CausalAttention { block: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddRow => "add_row",
            Primitive::Affine { .. } => "affine",
            Primitive::MatMul => "matmul",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Gelu => "gelu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::GatherElements(_) => "gather_elements",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::ScaleByElement(_) => "scale_by_element",
            Primitive::GatedSum(_) => "gated_sum",
            Primitive::ClampMin(_) => "clamp_min",
            Primitive::Detach => "detach",
            Primitive::Gate { .. } => "gate",
            Primitive::CausalAttention { .. } => "causal_attention",
        }
    }
}

#[derive(Debug)]
enum Cache {
    None,
    LayerNorm { xhat: Matrix, inv_std: Vec<f64> },
    Attention { probs: Vec<Matrix> },
    Gate { scores: Matrix },
}

#[derive(Debug)]
enum Provenance {
    Leaf,
    Apply {
        prim: Primitive,
        inputs: Vec<Var>,
        cache: Cache,
    },
}

#[derive(Debug)]
struct Record {
    value: Matrix,
    provenance: Provenance,
    needs_grad: bool,
}

/// Ordered record of every primitive evaluated during one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
    detach_log: Option<Vec<Matrix>>,
    detach_replay: Option<VecDeque<Matrix>>,
    clamp_hits: usize,
}

/// Gradient of a scalar root with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` means the value does not influence the root through any
    /// differentiable path (a zero gradient).
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shapes_of(tape: &Tape, inputs: &[Var]) -> Vec<(usize, usize)> {
    inputs.iter().map(|v| tape.value(*v).dim()).collect()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    stable_sigmoid(x)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn row_log_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that keeps a copy of every detached value so that a later tape
    /// can replay them (see [`Tape::replaying_detach`]).
    pub fn recording_detach() -> Self {
        Tape {
            detach_log: Some(Vec::new()),
            ..Self::default()
        }
    }

    /// A tape whose `detach` records return the given values, in order,
    /// instead of copying their input. Used to freeze straight-through
    /// offsets while probing a loss with finite differences.
    pub fn replaying_detach(values: Vec<Matrix>) -> Self {
        Tape {
            detach_replay: Some(values.into()),
            ..Self::default()
        }
    }

    /// Detached values recorded so far (empty unless built with
    /// [`Tape::recording_detach`]).
    pub fn detached_values(&self) -> &[Matrix] {
        self.detach_log.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of entries floored by `clamp_min` since the tape was created.
    pub fn clamp_hits(&self) -> usize {
        self.clamp_hits
    }

    fn push_leaf(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.records.push(Record {
            value,
            provenance: Provenance::Leaf,
            needs_grad,
        });
        Var(self.records.len() - 1)
    }

    /// A leaf that receives gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.records[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.records[var.0].value[[0, 0]]
    }

    pub fn is_leaf(&self, var: Var) -> bool {
        matches!(self.records[var.0].provenance, Provenance::Leaf)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.records[var.0].needs_grad
    }

    /// The primitive and inputs that produced `var`, or `None` for a leaf.
    pub fn provenance(&self, var: Var) -> Option<(&Primitive, &[Var])> {
        match &self.records[var.0].provenance {
            Provenance::Leaf => None,
            Provenance::Apply { prim, inputs, .. } => Some((prim, inputs.as_slice())),
        }
    }

    /// Evaluate `prim` on `inputs` and record it.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let malformed = |tape: &Tape| Error::MalformedGraph {
            primitive: prim.name(),
            shapes: shapes_of(tape, inputs),
        };
        let arity_ok = match &prim {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::AddRow
            | Primitive::MatMul
            | Primitive::LayerNorm { .. }
            | Primitive::ScaleByElement(_)
            | Primitive::Gate { .. } => inputs.len() == 2,
            Primitive::CausalAttention { .. } => inputs.len() == 3,
            Primitive::GatedSum(idx) => inputs.len() == idx.len() + 1 && !idx.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(malformed(self));
        }
        let mut cache = Cache::None;
        let value = {
            let x = self.value(inputs[0]);
            match &prim {
                Primitive::Add | Primitive::Sub | Primitive::Mul => {
                    let y = self.value(inputs[1]);
                    if x.dim() != y.dim() {
                        return Err(malformed(self));
                    }
                    match prim {
                        Primitive::Add => x + y,
                        Primitive::Sub => x - y,
                        _ => x * y,
                    }
                }
                Primitive::AddRow => {
                    let r = self.value(inputs[1]);
                    if r.nrows() != 1 || r.ncols() != x.ncols() {
                        return Err(malformed(self));
                    }
                    x + r
                }
                Primitive::Affine { scale, shift } => x.mapv(|v| scale * v + shift),
                Primitive::MatMul => {
                    let y = self.value(inputs[1]);
                    if x.ncols() != y.nrows() {
                        return Err(malformed(self));
                    }
                    x.dot(y)
                }
                Primitive::Sigmoid => x.mapv(stable_sigmoid),
                Primitive::Exp => x.mapv(f64::exp),
                Primitive::Log => x.mapv(f64::ln),
                Primitive::Gelu => x.mapv(|v| v * std_normal_cdf(v)),
                Primitive::Softmax => row_softmax(x),
                Primitive::LogSoftmax => row_log_softmax(x),
                Primitive::LayerNorm { eps } => {
                    let gain = self.value(inputs[1]);
                    if gain.nrows() != 1 || gain.ncols() != x.ncols() || x.ncols() == 0 {
                        return Err(malformed(self));
                    }
                    let m = x.ncols() as f64;
                    let mut xhat = x.clone();
                    let mut inv_std = Vec::with_capacity(x.nrows());
                    for mut row in xhat.rows_mut() {
                        let mean = row.sum() / m;
                        row.mapv_inplace(|v| v - mean);
                        let var = row.iter().map(|v| v * v).sum::<f64>() / m;
                        let inv = 1.0 / (var + eps).sqrt();
                        row.mapv_inplace(|v| v * inv);
                        inv_std.push(inv);
                    }
                    let out = &xhat * gain;
                    cache = Cache::LayerNorm { xhat, inv_std };
                    out
                }
                Primitive::GatherRows(rows) => {
                    if rows.iter().any(|&r| r >= x.nrows()) {
                        return Err(malformed(self));
                    }
                    x.select(Axis(0), rows)
                }
                Primitive::GatherElements(pairs) => {
                    if pairs.iter().any(|&(r, c)| r >= x.nrows() || c >= x.ncols()) {
                        return Err(malformed(self));
                    }
                    Array2::from_shape_fn((pairs.len(), 1), |(i, _)| x[pairs[i]])
                }
                Primitive::Sum => Array2::from_elem((1, 1), x.sum()),
                Primitive::Mean => {
                    if x.is_empty() {
                        return Err(malformed(self));
                    }
                    Array2::from_elem((1, 1), x.sum() / x.len() as f64)
                }
                Primitive::ScaleByElement(i) => {
                    let s = self.value(inputs[1]);
                    if s.nrows() != 1 || *i >= s.ncols() {
                        return Err(malformed(self));
                    }
                    let g = s[[0, *i]];
                    x.mapv(|v| v * g)
                }
                Primitive::GatedSum(idx) => {
                    let gates = x;
                    if gates.nrows() != 1 || idx.iter().any(|&i| i >= gates.ncols()) {
                        return Err(malformed(self));
                    }
                    let shape = self.value(inputs[1]).dim();
                    if inputs[1..].iter().any(|v| self.value(*v).dim() != shape) {
                        return Err(malformed(self));
                    }
                    let mut out = Array2::zeros(shape);
                    for (k, &gi) in idx.iter().enumerate() {
                        out.scaled_add(gates[[0, gi]], self.value(inputs[k + 1]));
                    }
                    out
                }
                Primitive::ClampMin(floor) => {
                    let floor = *floor;
                    let hits = x.iter().filter(|&&v| v < floor).count();
                    self.clamp_hits += hits;
                    self.value(inputs[0]).mapv(|v| v.max(floor))
                }
                Primitive::Detach => {
                    let dim = x.dim();
                    let fresh = self.detach_replay.is_none().then(|| x.clone());
                    match fresh {
                        Some(v) => v,
                        None => match self.detach_replay.as_mut().and_then(VecDeque::pop_front) {
                            Some(frozen) if frozen.dim() == dim => frozen,
                            _ => {
                                return Err(Error::Contract(
                                    "detach replay exhausted or shape changed".into(),
                                ))
                            }
                        },
                    }
                }
                Primitive::Gate { temperature } => {
                    let noise = self.value(inputs[1]);
                    if noise.dim() != x.dim() || temperature.is_nan() || *temperature <= 0.0 {
                        return Err(malformed(self));
                    }
                    if self.records[inputs[1].0].needs_grad {
                        return Err(Error::Contract("gate noise must be a constant".into()));
                    }
                    // Same operation order as sub, affine and sigmoid.
                    let scale = 1.0 / *temperature;
                    let scores = Zip::from(x)
                        .and(noise)
                        .map_collect(|&l, &n| stable_sigmoid(scale * (l - n) + 0.0));
                    let offset = match self.detach_replay.as_mut() {
                        None => scores.mapv(|v| {
                            let hard = if v > 0.5 { 1.0 } else { 0.0 };
                            hard - v
                        }),
                        Some(queue) => match queue.pop_front() {
                            Some(frozen) if frozen.dim() == scores.dim() => frozen,
                            _ => {
                                return Err(Error::Contract(
                                    "detach replay exhausted or shape changed".into(),
                                ))
                            }
                        },
                    };
                    if let Some(log) = self.detach_log.as_mut() {
                        log.push(offset.clone());
                    }
                    let out = &offset + &scores;
                    cache = Cache::Gate { scores };
                    out
                }
                Primitive::CausalAttention { block } => {
                    let (q, k, v) = (x, self.value(inputs[1]), self.value(inputs[2]));
                    let block = *block;
                    if block == 0
                        || q.dim() != k.dim()
                        || v.nrows() != q.nrows()
                        || q.nrows() % block != 0
                    {
                        return Err(malformed(self));
                    }
                    let scale = 1.0 / (q.ncols() as f64).sqrt();
                    let mut out = Array2::zeros(v.dim());
                    let mut probs = Vec::with_capacity(q.nrows() / block);
                    for b in 0..q.nrows() / block {
                        let rows = s![b * block..(b + 1) * block, ..];
                        let mut scores = q.slice(rows).dot(&k.slice(rows).t()) * scale;
                        for i in 0..block {
                            for j in i + 1..block {
                                scores[[i, j]] = f64::NEG_INFINITY;
                            }
                        }
                        let p = row_softmax(&scores);
                        out.slice_mut(rows).assign(&p.dot(&v.slice(rows)));
                        probs.push(p);
                    }
                    cache = Cache::Attention { probs };
                    out
                }
            }
        };
        if let (Primitive::Detach, Some(log)) = (&prim, self.detach_log.as_mut()) {
            log.push(value.clone());
        }
        let needs_grad = !matches!(prim, Primitive::Detach)
            && inputs.iter().any(|v| self.records[v.0].needs_grad);
        self.records.push(Record {
            value,
            provenance: Provenance::Apply {
                prim,
                inputs: inputs.to_vec(),
                cache,
            },
            needs_grad,
        });
        Ok(Var(self.records.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.apply(Primitive::AddRow, &[x, row])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Primitive::Affine { scale, shift }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gain])
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::GatherRows(rows), &[x])
    }

    pub fn gather_elements(&mut self, x: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        self.apply(Primitive::GatherElements(pairs), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn scale_by_element(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        self.apply(Primitive::ScaleByElement(index), &[x, s])
    }

    pub fn gated_sum(&mut self, gates: Var, inputs: &[(usize, Var)]) -> Result<Var> {
        let mut args = Vec::with_capacity(inputs.len() + 1);
        args.push(gates);
        args.extend(inputs.iter().map(|(_, v)| *v));
        let idx = inputs.iter().map(|(i, _)| *i).collect();
        self.apply(Primitive::GatedSum(idx), &args)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.apply(Primitive::ClampMin(floor), &[x])
    }

    pub fn gate(&mut self, logit: Var, noise: Var, temperature: f64) -> Result<Var> {
        self.apply(Primitive::Gate { temperature }, &[logit, noise])
    }

    /// Soft scores computed by a [`Primitive::Gate`] record.
    pub fn gate_scores(&self, gate: Var) -> Option<&Matrix> {
        match &self.records[gate.0].provenance {
            Provenance::Apply {
                cache: Cache::Gate { scores },
                ..
            } => Some(scores),
            _ => None,
        }
    }

    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Detach, &[x])
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, block: usize) -> Result<Var> {
        self.apply(Primitive::CausalAttention { block }, &[q, k, v])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be 1x1, got {:?}",
                rv.dim()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.records.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let rec = &self.records[idx];
            if !rec.needs_grad {
                continue;
            }
            let Provenance::Apply { prim, inputs, cache } = &rec.provenance else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(prim, inputs, cache, &rec.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        prim: &Primitive,
        inputs: &[Var],
        cache: &Cache,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let needs = |v: Var| self.records[v.0].needs_grad;
        let val = |v: Var| &self.records[v.0].value;
        let mut acc = |v: Var, contrib: Matrix| match &mut grads[v.0] {
            Some(existing) => *existing += &contrib,
            slot @ None => *slot = Some(contrib),
        };
        match prim {
            Primitive::Add => {
                for &v in inputs {
                    if needs(v) {
                        acc(v, g.clone());
                    }
                }
            }
            Primitive::Sub => {
                if needs(inputs[0]) {
                    acc(inputs[0], g.clone());
                }
                if needs(inputs[1]) {
                    acc(inputs[1], -g);
                }
            }
            Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs(a) {
                    acc(a, g * val(b));
                }
                if needs(b) {
                    acc(b, g * val(a));
                }
            }
            Primitive::AddRow => {
                if needs(inputs[0]) {
                    acc(inputs[0], g.clone());
                }
                if needs(inputs[1]) {
                    acc(inputs[1], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Primitive::Affine { scale, .. } => {
                if needs(inputs[0]) {
                    acc(inputs[0], g * *scale);
                }
            }
            Primitive::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs(a) {
                    acc(a, g.dot(&val(b).t()));
                }
                if needs(b) {
                    acc(b, val(a).t().dot(g));
                }
            }
            Primitive::Sigmoid => acc(inputs[0], Zip::from(g).and(out).map_collect(|g, y| g * y * (1.0 - y))),
            Primitive::Exp => acc(inputs[0], g * out),
            Primitive::Log => acc(inputs[0], g / val(inputs[0])),
            Primitive::Gelu => acc(
                inputs[0],
                Zip::from(g)
                    .and(val(inputs[0]))
                    .map_collect(|g, &x| g * (std_normal_cdf(x) + x * std_normal_pdf(x))),
            ),
            Primitive::Softmax => {
                let mut dx = g * out;
                for (mut row, y) in dx.rows_mut().into_iter().zip(out.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&y).for_each(|d, &y| *d -= y * dot);
                }
                acc(inputs[0], dx);
            }
            Primitive::LogSoftmax => {
                let mut dx = g.clone();
                for (mut row, y) in dx.rows_mut().into_iter().zip(out.rows()) {
                    let total = row.sum();
                    Zip::from(&mut row).and(&y).for_each(|d, &y| *d -= y.exp() * total);
                }
                acc(inputs[0], dx);
            }
            Primitive::LayerNorm { .. } => {
                let Cache::LayerNorm { xhat, inv_std } = cache else {
                    unreachable!("layer norm without cache")
                };
                let gain = val(inputs[1]);
                if needs(inputs[1]) {
                    acc(inputs[1], (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(inputs[0]) {
                    let m = xhat.ncols() as f64;
                    let mut dx = g * gain;
                    for ((mut row, xh), inv) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                        let mean_d = row.sum() / m;
                        let mean_dx = row.iter().zip(xh.iter()).map(|(d, x)| d * x).sum::<f64>() / m;
                        Zip::from(&mut row)
                            .and(&xh)
                            .for_each(|d, &x| *d = inv * (*d - mean_d - x * mean_dx));
                    }
                    acc(inputs[0], dx);
                }
            }
            Primitive::GatherRows(rows) => {
                let mut dx = Array2::zeros(val(inputs[0]).dim());
                for (r, &src) in rows.iter().enumerate() {
                    let mut target = dx.row_mut(src);
                    target += &g.row(r);
                }
                acc(inputs[0], dx);
            }
            Primitive::GatherElements(pairs) => {
                let mut dx = Array2::zeros(val(inputs[0]).dim());
                for (r, &p) in pairs.iter().enumerate() {
                    dx[p] += g[[r, 0]];
                }
                acc(inputs[0], dx);
            }
            Primitive::Sum => acc(inputs[0], Array2::from_elem(val(inputs[0]).dim(), g[[0, 0]])),
            Primitive::Mean => {
                let x = val(inputs[0]);
                acc(inputs[0], Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64));
            }
            Primitive::ScaleByElement(i) => {
                let (x, s) = (inputs[0], inputs[1]);
                if needs(x) {
                    acc(x, g * val(s)[[0, *i]]);
                }
                if needs(s) {
                    let mut ds = Array2::zeros(val(s).dim());
                    ds[[0, *i]] = (g * val(x)).sum();
                    acc(s, ds);
                }
            }
            Primitive::GatedSum(idx) => {
                let gates = inputs[0];
                let gv = val(gates);
                let mut dgates = needs(gates).then(|| Array2::<f64>::zeros(gv.dim()));
                for (k, &gi) in idx.iter().enumerate() {
                    let x = inputs[k + 1];
                    if let Some(dg) = dgates.as_mut() {
                        dg[[0, gi]] += Zip::from(g).and(val(x)).fold(0.0, |a, g, x| a + g * x);
                    }
                    if needs(x) {
                        acc(x, g * gv[[0, gi]]);
                    }
                }
                if let Some(dg) = dgates {
                    acc(gates, dg);
                }
            }
            Primitive::ClampMin(floor) => {
                let floor = *floor;
                acc(
                    inputs[0],
                    Zip::from(g)
                        .and(val(inputs[0]))
                        .map_collect(|&g, &x| if x < floor { 0.0 } else { g }),
                );
            }
            Primitive::Detach => {}
            Primitive::Gate { temperature } => {
                let Cache::Gate { scores } = cache else {
                    unreachable!("gate without cache")
                };
                let scale = 1.0 / *temperature;
                if needs(inputs[0]) {
                    acc(
                        inputs[0],
                        Zip::from(g).and(scores).map_collect(|g, y| g * y * (1.0 - y) * scale),
                    );
                }
            }
            Primitive::CausalAttention { block } => {
                let Cache::Attention { probs } = cache else {
                    unreachable!("attention without cache")
                };
                let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
                let (qv, kv, vv) = (val(q), val(k), val(v));
                let scale = 1.0 / (qv.ncols() as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for (b, p) in probs.iter().enumerate() {
                    let rows = s![b * block..(b + 1) * block, ..];
                    let gb = g.slice(rows);
                    dv.slice_mut(rows).assign(&p.t().dot(&gb));
                    let dp = gb.dot(&vv.slice(rows).t());
                    let mut ds = &dp * p;
                    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&prow).for_each(|d, &pp| *d -= pp * dot);
                    }
                    ds *= scale;
                    dq.slice_mut(rows).assign(&ds.dot(&kv.slice(rows)));
                    dk.slice_mut(rows).assign(&ds.t().dot(&qv.slice(rows)));
                }
                if needs(q) {
                    acc(q, dq);
                }
                if needs(k) {
                    acc(k, dk);
                }
                if needs(v) {
                    acc(v, dv);
                }
            }
        }
    }
}

/// Central-difference estimate of `∂f/∂x` for every coordinate of `x`.
pub fn finite_difference<F>(mut f: F, x: &Matrix, step: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.clone();
    let mut grad = Array2::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let plus = f(&probe)?;
        probe[idx] = orig - step;
        let minus = f(&probe)?;
        probe[idx] = orig;
        grad[idx] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn add_is_elementwise() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0]]);
        let b = t.constant(array![[3.0, 4.0]]);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &array![[4.0, 6.0]]);
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut t = Tape::new();
        let a = t.constant(array![[0.0, 0.0, 0.0]]);
        let s = t.softmax(a).unwrap();
        for v in t.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = t.constant(array![
            [1.0, 0.0, -1.0, 2.0],
            [0.5, 1.0, 0.0, -2.0],
            [2.0, -1.0, 1.0, 0.0]
        ]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).dim(), (2, 4));
        // row 1 · column 3: 4·2 + 5·(−2) + 6·0 = −2
        assert_eq!(t.value(c)[[1, 3]], -2.0);
        // row 0 · column 0: 1 + 1 + 6 = 8
        assert_eq!(t.value(c)[[0, 0]], 8.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        let err = t.matmul(a, b).unwrap_err();
        match err {
            Error::MalformedGraph { primitive, shapes } => {
                assert_eq!(primitive, "matmul");
                assert_eq!(shapes, vec![(2, 3), (2, 3)]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(array![[3.0]]);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn detach_branch_contributes_nothing() {
        let mut t = Tape::new();
        let x = t.param(array![[5.0]]);
        let d = t.detach(x).unwrap();
        let y = t.add(d, x).unwrap();
        assert_eq!(t.scalar(y), 10.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 1.0);
        assert!(g.get(d).is_none());
    }

    fn composed_gate(t: &mut Tape, l: Var, n: Var, tau: f64) -> (Var, Var) {
        let shifted = t.sub(l, n).unwrap();
        let scaled = t.affine(shifted, 1.0 / tau, 0.0).unwrap();
        let s = t.sigmoid(scaled).unwrap();
        let hard = t.value(s).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let hard = t.constant(hard);
        let off = t.sub(hard, s).unwrap();
        let off = t.detach(off).unwrap();
        (t.add(off, s).unwrap(), s)
    }

    #[test]
    fn fused_gate_matches_composed_chain_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let tau = rng.random_range(0.05..3.0);
            let l = Array2::from_shape_fn((3, 7), |_| rng.random_range(-4.0..4.0));
            let n = Array2::from_shape_fn((3, 7), |_| rng.random_range(-4.0..4.0));
            let w = Array2::from_shape_fn((3, 7), |_| rng.random_range(-1.0..1.0));
            let run = |fused: bool| {
                let mut t = Tape::new();
                let lv = t.param(l.clone());
                let nv = t.constant(n.clone());
                let m = if fused { t.gate(lv, nv, tau).unwrap() } else { composed_gate(&mut t, lv, nv, tau).0 };
                let wv = t.constant(w.clone());
                let y = t.mul(m, wv).unwrap();
                let y = t.sum(y).unwrap();
                let g = t.backward(y).unwrap().take(lv).unwrap();
                (t.value(m).clone(), g)
            };
            let (mf, gf) = run(true);
            let (mc, gc) = run(false);
            assert_eq!(mf, mc);
            assert_eq!(gf, gc);
            assert!(mf.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn gate_offsets_replay() {
        let l = array![[0.3, -0.2]];
        let n = array![[0.0, 0.0]];
        let mut rec = Tape::recording_detach();
        let lv = rec.param(l.clone());
        let nv = rec.constant(n.clone());
        let m = rec.gate(lv, nv, 1.0).unwrap();
        assert_eq!(rec.value(m), &array![[1.0, 0.0]]);
        let s = rec.gate_scores(m).unwrap().clone();
        let mut rep = Tape::replaying_detach(rec.detached_values().to_vec());
        let lv = rep.param(array![[-0.3, 0.2]]);
        let nv = rep.constant(n);
        let m2 = rep.gate(lv, nv, 1.0).unwrap();
        // Frozen offsets: the value moves with the score, not the threshold.
        let s2 = rep.gate_scores(m2).unwrap().clone();
        let expect = &(&array![[1.0, 0.0]] - &s) + &s2;
        assert_eq!(rep.value(m2), &expect);
        let mut bad = Tape::new();
        let lv = bad.param(l);
        let nv = bad.param(array![[0.0, 0.0]]);
        assert!(bad.gate(lv, nv, 1.0).is_err());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(array![[1.0, 2.0]]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_difference_of_square() {
        let g = finite_difference(|x| Ok(x[[0, 0]] * x[[0, 0]]), &array![[3.0]], 1e-4).unwrap();
        assert!((g[[0, 0]] - 6.0).abs() < 1e-6);
        let z = finite_difference(|_| Ok(4.2), &Array2::ones((2, 2)), 1e-4).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(finite_difference(|_| Ok(0.0), &array![[1.0]], 0.0).is_err());
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Array2::from_shape_fn((1, 5), |_| rng.random_range(-2.0..2.0));
        let target = 3;
        let loss = |x: &Matrix| -> Result<(Tape, Var, Var)> {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let ls = t.log_softmax(v)?;
            let picked = t.gather_elements(ls, vec![(0, target)])?;
            let l = t.affine(picked, -1.0, 0.0)?;
            let l = t.sum(l)?;
            Ok((t, v, l))
        };
        let (t, v, l) = loss(&x0).unwrap();
        let analytic = t.backward(l).unwrap().take(v).unwrap();
        let fd = finite_difference(
            |x| {
                let (t, _, l) = loss(x)?;
                Ok(t.scalar(l))
            },
            &x0,
            1e-4,
        )
        .unwrap();
        for (a, f) in analytic.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *f) < 1e-4, "{a} vs {f}");
        }
    }

    /// One random-input check per primitive: the primitive output is reduced to
    /// a scalar by a fixed random linear functional.
    fn check_primitive(prim: Primitive, shapes: &[(usize, usize)], positive: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Matrix> = shapes
            .iter()
            .map(|&s| {
                Array2::from_shape_fn(s, |_| {
                    if positive {
                        rng.random_range(0.2..2.0)
                    } else {
                        rng.random_range(-1.5..1.5)
                    }
                })
            })
            .collect();
        let build = |vals: &[Matrix], weights: Option<&Matrix>| -> Result<(Tape, Vec<Var>, Var, Matrix)> {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
            let out = t.apply(prim.clone(), &vars)?;
            let w = match weights {
                Some(w) => w.clone(),
                None => {
                    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
                    Array2::from_shape_fn(t.value(out).dim(), |_| r.random_range(-1.0..1.0))
                }
            };
            let wv = t.constant(w.clone());
            let prod = t.mul(out, wv)?;
            let root = t.sum(prod)?;
            Ok((t, vars, root, w))
        };
        let (t, vars, root, w) = build(&inputs, None).unwrap();
        let grads = t.backward(root).unwrap();
        for (slot, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(inputs[slot].dim()));
            let fd = finite_difference(
                |x| {
                    let mut vals = inputs.clone();
                    vals[slot] = x.clone();
                    let (t, _, r, _) = build(&vals, Some(&w))?;
                    Ok(t.scalar(r))
                },
                &inputs[slot],
                1e-4,
            )
            .unwrap();
            for (a, f) in analytic.iter().zip(fd.iter()) {
                assert!(
                    (a - f).abs() <= 1e-4 * a.abs().max(f.abs()) + 1e-9,
                    "{} input {slot}: {a} vs {f}",
                    prim.name()
                );
            }
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..10u64 {
            check_primitive(Primitive::Add, &[(2, 3), (2, 3)], false, seed);
            check_primitive(Primitive::Sub, &[(2, 3), (2, 3)], false, seed);
            check_primitive(Primitive::Mul, &[(2, 3), (2, 3)], false, seed);
            check_primitive(Primitive::AddRow, &[(3, 4), (1, 4)], false, seed);
            check_primitive(Primitive::Affine { scale: -1.7, shift: 0.3 }, &[(2, 2)], false, seed);
            check_primitive(Primitive::MatMul, &[(2, 3), (3, 4)], false, seed);
            check_primitive(Primitive::Sigmoid, &[(2, 3)], false, seed);
            check_primitive(Primitive::Exp, &[(2, 3)], false, seed);
            check_primitive(Primitive::Log, &[(2, 3)], true, seed);
            check_primitive(Primitive::Gelu, &[(2, 3)], false, seed);
            check_primitive(Primitive::Softmax, &[(2, 5)], false, seed);
            check_primitive(Primitive::LogSoftmax, &[(2, 5)], false, seed);
            check_primitive(Primitive::LayerNorm { eps: 1e-5 }, &[(3, 6), (1, 6)], false, seed);
            check_primitive(Primitive::GatherRows(vec![2, 0, 2]), &[(3, 2)], false, seed);
            check_primitive(Primitive::GatherElements(vec![(0, 1), (1, 1), (0, 1)]), &[(2, 3)], false, seed);
            check_primitive(Primitive::Sum, &[(2, 3)], false, seed);
            check_primitive(Primitive::Mean, &[(2, 3)], false, seed);
            check_primitive(Primitive::ScaleByElement(2), &[(2, 3), (1, 4)], false, seed);
            check_primitive(Primitive::GatedSum(vec![1, 0, 1]), &[(1, 3), (2, 2), (2, 2), (2, 2)], false, seed);
            check_primitive(Primitive::ClampMin(-0.5), &[(3, 3)], false, seed);
            check_primitive(Primitive::CausalAttention { block: 3 }, &[(6, 2), (6, 2), (6, 3)], false, seed);
        }
    }

    #[test]
    fn replay_reproduces_tape_bit_for_bit() {
        let run = || {
            let mut t = Tape::recording_detach();
            let x = t.param(array![[0.3, -1.2, 2.5]]);
            let s = t.sigmoid(x).unwrap();
            let d = t.detach(s).unwrap();
            let y = t.mul(d, x).unwrap();
            let r = t.sum(y).unwrap();
            let g = t.backward(r).unwrap();
            (t.scalar(r).to_bits(), g.get(x).unwrap().mapv(f64::to_bits), t.detached_values().to_vec())
        };
        let (a, ga, da) = run();
        let (b, gb, _) = run();
        assert_eq!(a, b);
        assert_eq!(ga, gb);

        let mut t = Tape::replaying_detach(da.clone());
        let x = t.param(array![[9.0, 9.0, 9.0]]);
        let s = t.sigmoid(x).unwrap();
        let d = t.detach(s).unwrap();
        assert_eq!(t.value(d), &da[0]);
    }

    #[test]
    fn clamp_counts_floored_entries() {
        let mut t = Tape::new();
        let x = t.constant(array![[1e-20, 0.5, 0.0]]);
        let y = t.clamp_min(x, 1e-12).unwrap();
        assert_eq!(t.clamp_hits(), 2);
        assert_eq!(t.value(y)[[0, 0]], 1e-12);
    }
}
