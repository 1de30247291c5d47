//! Minimal reverse-mode automatic differentiation over shape-carrying f64
//! tensors.
//!
//! A [`Tape`] is an arena of [`TensorValue`] nodes plus an ordered list of
//! recorded operations. Forward methods append nodes and records;
//! [`Tape::backward`] replays the records in reverse and accumulates
//! gradients into a [`ParamStore`]. Everything is f64 and single-threaded;
//! independent tapes may run on separate threads.
//!
//! The tape also keeps a multiply-add tally for the complexity profiler:
//! every scalar multiplication performed by a forward op increments the
//! counter (additions, exponentials and divisions are not counted — see
//! `Tape::mul_adds`).

pub mod grad_check;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Lower clamp applied to `log` inputs before evaluation and differentiation.
pub const LOG_CLAMP: f64 = 1e-12;

/// Shape-carrying multidimensional array of f64 with an optional gradient
/// slot. Rank is 1 or 2; data is row-major; scalars use shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        TensorValue {
            shape,
            data,
            requires_grad,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let n = shape.iter().product();
        TensorValue::new(shape, vec![0.0; n], requires_grad)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) view: 1-D tensors count as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("unsupported rank {}", self.shape.len()),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named learned tensor; `value.requires_grad` is always true.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: TensorValue,
}

/// Owns every parameter of a model. Names are unique dot-separated paths
/// and shapes are immutable after construction.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: TensorValue) -> ParamId {
        assert!(
            self.lookup(name).is_none(),
            "duplicate parameter name {name}"
        );
        let mut value = value;
        value.requires_grad = true;
        self.params.push(Parameter {
            name: name.to_string(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Linear weight, uniform in ±sqrt(6 / (fan_in + fan_out)), stored as
    /// [fan_in × fan_out] so sequences multiply on the left.
    pub fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        self.add(name, TensorValue::new(vec![fan_in, fan_out], data, true))
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.add(name, TensorValue::zeros(shape, true))
    }

    pub fn add_ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, TensorValue::new(shape, vec![1.0; n], true))
    }

    /// Embedding table, entries normal(0, 0.02).
    pub fn add_embedding(&mut self, name: &str, rows: usize, dim: usize, rng: &mut Rng) -> ParamId {
        let data = (0..rows * dim).map(|_| 0.02 * rng.normal()).collect();
        self.add(name, TensorValue::new(vec![rows, dim], data, true))
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_coords(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    MatMul { a: TensorId, b: TensorId, out: TensorId },
    VecMat { v: TensorId, m: TensorId, out: TensorId },
    MatVec { m: TensorId, v: TensorId, out: TensorId },
    Transpose { x: TensorId, out: TensorId },
    SoftmaxRows { x: TensorId, out: TensorId, allowed: Vec<bool> },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        out: TensorId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu { x: TensorId, out: TensorId },
    Sigmoid { x: TensorId, out: TensorId },
    Tanh { x: TensorId, out: TensorId },
    LogClamped { x: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    AddRowBroadcast { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, c: f64, out: TensorId },
    ConcatCols { inputs: Vec<TensorId>, out: TensorId },
    ConcatRows { inputs: Vec<TensorId>, out: TensorId },
    StackRows { inputs: Vec<TensorId>, out: TensorId },
    SliceCols { x: TensorId, start: usize, out: TensorId },
    SliceRows { x: TensorId, start: usize, out: TensorId },
    SelectRow { x: TensorId, row: usize, out: TensorId },
    SumReduce { x: TensorId, out: TensorId },
    EmbeddingLookup { table: TensorId, indices: Vec<usize>, out: TensorId },
    BceWithLogits { scores: TensorId, targets: Vec<f64>, mask: Vec<bool>, out: TensorId },
}

/// Records a forward pass; nodes are in topological order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TensorValue>,
    param_of: Vec<Option<ParamId>>,
    param_cache: std::collections::HashMap<usize, TensorId>,
    ops: Vec<Op>,
    mul_adds: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: TensorValue, param: Option<ParamId>) -> TensorId {
        self.nodes.push(value);
        self.param_of.push(param);
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf node that does not require gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.push(TensorValue::new(shape, data, false), None)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> TensorId {
        let n = data.len();
        self.constant(vec![n], data)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![1], vec![v])
    }

    /// Leaf node copied from a parameter; gradients flowing into it are
    /// accumulated back into the parameter by [`Tape::backward`]. Repeated
    /// requests on one tape return the same node — parameter values must
    /// not change while a tape is alive.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(&cached) = self.param_cache.get(&id.0) {
            return cached;
        }
        let p = store.get(id);
        let node = self.push(
            TensorValue::new(p.value.shape.clone(), p.value.data.clone(), true),
            Some(id),
        );
        self.param_cache.insert(id.0, node);
        node
    }

    pub fn value(&self, id: TensorId) -> &TensorValue {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Node gradient after backward; zeros if the node was not reached.
    pub fn grad(&self, id: TensorId) -> Vec<f64> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id.0].len()],
        }
    }

    /// Scalar multiply(-add) tally of every forward op so far.
    pub fn mul_adds(&self) -> u64 {
        self.mul_adds
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Standard matrix product [m×k]·[k×n] → [m×n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &aip) in arow.iter().enumerate() {
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, &bpj) in orow.iter_mut().zip(brow) {
                        *o += aip * bpj;
                    }
                }
            }
        }
        self.mul_adds += (m * k * n) as u64;
        let rg = self.requires_grad(&[a, b]);
        let out = self.push(TensorValue::new(vec![m, n], out, rg), None);
        if rg {
            self.ops.push(Op::MatMul { a, b, out });
        }
        Ok(out)
    }

    /// Row vector through a matrix: [k]·[k×n] → [n].
    pub fn vec_mat(&mut self, v: TensorId, m: TensorId) -> Result<TensorId> {
        let (sv, sm) = (self.shape(v).to_vec(), self.shape(m).to_vec());
        if sv.len() != 1 || sm.len() != 2 || sv[0] != sm[0] {
            return Err(Error::ShapeMismatch { op: "vec_mat", lhs: sv, rhs: sm });
        }
        let (k, n) = (sm[0], sm[1]);
        let mut out = vec![0.0; n];
        {
            let vv = &self.nodes[v.0].data;
            let mv = &self.nodes[m.0].data;
            for (p, &vp) in vv.iter().enumerate() {
                let mrow = &mv[p * n..(p + 1) * n];
                for (o, &mpj) in out.iter_mut().zip(mrow) {
                    *o += vp * mpj;
                }
            }
        }
        self.mul_adds += (k * n) as u64;
        let rg = self.requires_grad(&[v, m]);
        let out = self.push(TensorValue::new(vec![n], out, rg), None);
        if rg {
            self.ops.push(Op::VecMat { v, m, out });
        }
        Ok(out)
    }

    /// Matrix times column vector: [n×k]·[k] → [n]. Used for pointer scores
    /// (one dot product per row).
    pub fn mat_vec(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch { op: "mat_vec", lhs: sm, rhs: sv });
        }
        let (n, k) = (sm[0], sm[1]);
        let mut out = vec![0.0; n];
        {
            let mv = &self.nodes[m.0].data;
            let vv = &self.nodes[v.0].data;
            for i in 0..n {
                let mrow = &mv[i * k..(i + 1) * k];
                out[i] = mrow.iter().zip(vv).map(|(a, b)| a * b).sum();
            }
        }
        self.mul_adds += (n * k) as u64;
        let rg = self.requires_grad(&[m, v]);
        let out = self.push(TensorValue::new(vec![n], out, rg), None);
        if rg {
            self.ops.push(Op::MatVec { m, v, out });
        }
        Ok(out)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        {
            let xv = &self.nodes[x.0].data;
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = xv[i * c + j];
                }
            }
        }
        let rg = self.requires_grad(&[x]);
        let out = self.push(TensorValue::new(vec![c, r], out, rg), None);
        if rg {
            self.ops.push(Op::Transpose { x, out });
        }
        Ok(out)
    }

    /// Softmax over the last axis with one shared mask for every row.
    /// Masked positions get exactly 0; each row of unmasked entries sums
    /// to 1. Computed with max-subtraction.
    pub fn softmax_masked(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (rows, cols) = self.nodes[x.0].rows_cols();
        if mask.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "softmax_masked",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut allowed = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            allowed.extend_from_slice(mask);
        }
        self.softmax_rows(x, allowed)
    }

    /// Softmax over the last axis with a per-row validity pattern
    /// (`allowed` is rows×cols, row-major). Used by attention layers.
    pub fn softmax_rows(&mut self, x: TensorId, allowed: Vec<bool>) -> Result<TensorId> {
        let (rows, cols) = self.nodes[x.0].rows_cols();
        assert_eq!(allowed.len(), rows * cols, "allowed pattern size");
        let mut out = vec![0.0; rows * cols];
        {
            let xv = &self.nodes[x.0].data;
            for r in 0..rows {
                let xrow = &xv[r * cols..(r + 1) * cols];
                let arow = &allowed[r * cols..(r + 1) * cols];
                let mut max = f64::NEG_INFINITY;
                let mut any = false;
                for (v, &ok) in xrow.iter().zip(arow) {
                    if ok {
                        if !v.is_finite() {
                            return Err(Error::NonFinite { op: "softmax" });
                        }
                        any = true;
                        if *v > max {
                            max = *v;
                        }
                    }
                }
                if !any {
                    return Err(Error::DegenerateMask { row: r });
                }
                let orow = &mut out[r * cols..(r + 1) * cols];
                let mut sum = 0.0;
                for ((o, v), &ok) in orow.iter_mut().zip(xrow).zip(arow) {
                    if ok {
                        *o = (v - max).exp();
                        sum += *o;
                    }
                }
                for o in orow.iter_mut() {
                    *o /= sum;
                }
            }
        }
        let rg = self.requires_grad(&[x]);
        let shape = self.shape(x).to_vec();
        let out_id = self.push(TensorValue::new(shape, out, rg), None);
        if rg {
            self.ops.push(Op::SoftmaxRows { x, out: out_id, allowed });
        }
        Ok(out_id)
    }

    /// Row-wise layer normalization with affine gain/bias over the last axis.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (rows, d) = self.nodes[x.0].rows_cols();
        let sg = self.shape(gain).to_vec();
        let sb = self.shape(bias).to_vec();
        if sg != vec![d] || sb != vec![d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: if sg != vec![d] { sg } else { sb },
            });
        }
        let mut out = vec![0.0; rows * d];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        {
            let xv = &self.nodes[x.0].data;
            let gv = &self.nodes[gain.0].data;
            let bv = &self.nodes[bias.0].data;
            for r in 0..rows {
                let xrow = &xv[r * d..(r + 1) * d];
                let mean = xrow.iter().sum::<f64>() / d as f64;
                let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (xrow[j] - mean) * rstd * gv[j] + bv[j];
                }
            }
        }
        self.mul_adds += (2 * rows * d) as u64;
        let rg = self.requires_grad(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        let out = self.push(TensorValue::new(shape, out, rg), None);
        if rg {
            self.ops.push(Op::LayerNorm { x, gain, bias, out, mean: means, rstd: rstds });
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.requires_grad(&[x]);
        let shape = self.shape(x).to_vec();
        let out = self.push(TensorValue::new(shape, data, rg), None);
        if rg {
            self.ops.push(Op::Relu { x, out });
        }
        out
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let rg = self.requires_grad(&[x]);
        let shape = self.shape(x).to_vec();
        let out = self.push(TensorValue::new(shape, data, rg), None);
        if rg {
            self.ops.push(Op::Sigmoid { x, out });
        }
        out
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let rg = self.requires_grad(&[x]);
        let shape = self.shape(x).to_vec();
        let out = self.push(TensorValue::new(shape, data, rg), None);
        if rg {
            self.ops.push(Op::Tanh { x, out });
        }
        out
    }

    /// Natural log with the input clamped below at [`LOG_CLAMP`] before
    /// evaluation and differentiation (gradient is 0 in the clamped region).
    pub fn log(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v.max(LOG_CLAMP).ln())
            .collect();
        let rg = self.requires_grad(&[x]);
        let shape = self.shape(x).to_vec();
        let out = self.push(TensorValue::new(shape, data, rg), None);
        if rg {
            self.ops.push(Op::LogClamped { x, out });
        }
        out
    }

    /// Element-wise product; shapes must match exactly.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.mul_adds += data.len() as u64;
        let rg = self.requires_grad(&[a, b]);
        let out = self.push(TensorValue::new(sa, data, rg), None);
        if rg {
            self.ops.push(Op::Mul { a, b, out });
        }
        Ok(out)
    }

    /// Element-wise sum; shapes must match exactly.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "add", lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires_grad(&[a, b]);
        let out = self.push(TensorValue::new(sa, data, rg), None);
        if rg {
            self.ops.push(Op::Add { a, b, out });
        }
        Ok(out)
    }

    /// Adds a [c] vector to every row of a [r×c] matrix (bias add).
    pub fn add_row_broadcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (rows, cols) = self.nodes[a.0].rows_cols();
        if sb.len() != 1 || sb[0] != cols {
            return Err(Error::ShapeMismatch { op: "add_row_broadcast", lhs: sa, rhs: sb });
        }
        let mut data = self.nodes[a.0].data.clone();
        {
            let bv = &self.nodes[b.0].data;
            for r in 0..rows {
                for j in 0..cols {
                    data[r * cols + j] += bv[j];
                }
            }
        }
        let rg = self.requires_grad(&[a, b]);
        let out = self.push(TensorValue::new(sa, data, rg), None);
        if rg {
            self.ops.push(Op::AddRowBroadcast { a, b, out });
        }
        Ok(out)
    }

    /// Multiplies every entry by the constant `c`.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        self.mul_adds += data.len() as u64;
        let rg = self.requires_grad(&[x]);
        let shape = self.shape(x).to_vec();
        let out = self.push(TensorValue::new(shape, data, rg), None);
        if rg {
            self.ops.push(Op::Scale { x, c, out });
        }
        out
    }

    /// Concatenation along the last axis. Inputs must all be 1-D (vector
    /// concat) or all 2-D with equal row counts (column concat).
    pub fn concat_cols(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        assert!(!inputs.is_empty());
        let rank = self.shape(inputs[0]).len();
        if rank == 1 {
            let mut data = Vec::new();
            for &id in inputs {
                if self.shape(id).len() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        lhs: self.shape(inputs[0]).to_vec(),
                        rhs: self.shape(id).to_vec(),
                    });
                }
                data.extend_from_slice(&self.nodes[id.0].data);
            }
            let n = data.len();
            let rg = self.requires_grad(inputs);
            let out = self.push(TensorValue::new(vec![n], data, rg), None);
            if rg {
                self.ops.push(Op::ConcatCols { inputs: inputs.to_vec(), out });
            }
            Ok(out)
        } else {
            let rows = self.shape(inputs[0])[0];
            let mut total_cols = 0;
            for &id in inputs {
                let s = self.shape(id);
                if s.len() != 2 || s[0] != rows {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        lhs: self.shape(inputs[0]).to_vec(),
                        rhs: s.to_vec(),
                    });
                }
                total_cols += s[1];
            }
            let mut data = vec![0.0; rows * total_cols];
            let mut col0 = 0;
            for &id in inputs {
                let c = self.shape(id)[1];
                let src = &self.nodes[id.0].data;
                for r in 0..rows {
                    data[r * total_cols + col0..r * total_cols + col0 + c]
                        .copy_from_slice(&src[r * c..(r + 1) * c]);
                }
                col0 += c;
            }
            let rg = self.requires_grad(inputs);
            let out = self.push(TensorValue::new(vec![rows, total_cols], data, rg), None);
            if rg {
                self.ops.push(Op::ConcatCols { inputs: inputs.to_vec(), out });
            }
            Ok(out)
        }
    }

    /// Concatenation along the row axis; inputs are 2-D with equal column
    /// counts.
    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        assert!(!inputs.is_empty());
        let cols = self.shape(inputs[0]).last().copied().unwrap();
        let mut data = Vec::new();
        let mut rows = 0;
        for &id in inputs {
            let s = self.shape(id).to_vec();
            if s.len() != 2 || s[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(inputs[0]).to_vec(),
                    rhs: s,
                });
            }
            rows += s[0];
            data.extend_from_slice(&self.nodes[id.0].data);
        }
        let rg = self.requires_grad(inputs);
        let out = self.push(TensorValue::new(vec![rows, cols], data, rg), None);
        if rg {
            self.ops.push(Op::ConcatRows { inputs: inputs.to_vec(), out });
        }
        Ok(out)
    }

    /// Stacks k vectors of length c into a [k×c] matrix.
    pub fn stack_rows(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        assert!(!inputs.is_empty());
        let c = self.shape(inputs[0]).to_vec();
        let mut data = Vec::with_capacity(inputs.len() * c[0]);
        for &id in inputs {
            let s = self.shape(id).to_vec();
            if s.len() != 1 || s != c {
                return Err(Error::ShapeMismatch { op: "stack_rows", lhs: c, rhs: s });
            }
            data.extend_from_slice(&self.nodes[id.0].data);
        }
        let rg = self.requires_grad(inputs);
        let out = self.push(TensorValue::new(vec![inputs.len(), c[0]], data, rg), None);
        if rg {
            self.ops.push(Op::StackRows { inputs: inputs.to_vec(), out });
        }
        Ok(out)
    }

    /// Slice of the last axis: [n]→[len] or [r×c]→[r×len].
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().unwrap();
        if start + len > cols {
            return Err(Error::IndexOutOfRange { what: "slice_cols", index: start + len, size: cols });
        }
        let (rows, _) = self.nodes[x.0].rows_cols();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[x.0].data[r * cols + start..r * cols + start + len]);
        }
        let shape = if s.len() == 1 { vec![len] } else { vec![rows, len] };
        let rg = self.requires_grad(&[x]);
        let out = self.push(TensorValue::new(shape, data, rg), None);
        if rg {
            self.ops.push(Op::SliceCols { x, start, out });
        }
        Ok(out)
    }

    /// Contiguous row range of a [n×d] matrix: rows [start, start+len).
    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::IndexOutOfRange { what: "slice_rows", index: start + len, size: s[0] });
        }
        let d = s[1];
        let data = self.nodes[x.0].data[start * d..(start + len) * d].to_vec();
        let rg = self.requires_grad(&[x]);
        let out = self.push(TensorValue::new(vec![len, d], data, rg), None);
        if rg {
            self.ops.push(Op::SliceRows { x, start, out });
        }
        Ok(out)
    }

    /// Extracts row `row` of a [n×d] matrix as a [d] vector.
    pub fn select_row(&mut self, x: TensorId, row: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || row >= s[0] {
            return Err(Error::IndexOutOfRange { what: "select_row", index: row, size: s[0] });
        }
        let d = s[1];
        let data = self.nodes[x.0].data[row * d..(row + 1) * d].to_vec();
        let rg = self.requires_grad(&[x]);
        let out = self.push(TensorValue::new(vec![d], data, rg), None);
        if rg {
            self.ops.push(Op::SelectRow { x, row, out });
        }
        Ok(out)
    }

    /// Sum of all entries → scalar of shape [1].
    pub fn sum_reduce(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.requires_grad(&[x]);
        let out = self.push(TensorValue::new(vec![1], vec![s], rg), None);
        if rg {
            self.ops.push(Op::SumReduce { x, out });
        }
        out
    }

    /// Mean of all entries → scalar of shape [1].
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].len() as f64;
        let s = self.sum_reduce(x);
        self.scale(s, 1.0 / n)
    }

    /// Gathers rows of an embedding table: indices k → [k×d].
    pub fn embedding_lookup(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "embedding_lookup", lhs: s, rhs: vec![] });
        }
        let (v, d) = (s[0], s[1]);
        for &i in indices {
            if i >= v {
                return Err(Error::IndexOutOfRange { what: "embedding_lookup", index: i, size: v });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(&[table]);
        let out = self.push(TensorValue::new(vec![indices.len(), d], data, rg), None);
        if rg {
            self.ops.push(Op::EmbeddingLookup { table, indices: indices.to_vec(), out });
        }
        Ok(out)
    }

    /// Per-entry binary cross-entropy on logits, the numerically stable
    /// form max(s,0) − s·y + ln(1 + exp(−|s|)). Equal in value to
    /// −y·ln σ(s) − (1−y)·ln(1−σ(s)) but its gradient σ(s) − y never
    /// vanishes on badly-wrong saturated entries. Masked entries yield 0
    /// loss and 0 gradient.
    pub fn bce_with_logits(
        &mut self,
        scores: TensorId,
        targets: &[f64],
        mask: &[bool],
    ) -> Result<TensorId> {
        let n = self.nodes[scores.0].len();
        if targets.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(scores).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let data: Vec<f64> = self.nodes[scores.0]
            .data
            .iter()
            .zip(targets)
            .zip(mask)
            .map(|((&s, &y), &ok)| {
                if ok {
                    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
                } else {
                    0.0
                }
            })
            .collect();
        let rg = self.requires_grad(&[scores]);
        let shape = self.shape(scores).to_vec();
        let out = self.push(TensorValue::new(shape, data, rg), None);
        if rg {
            self.ops.push(Op::BceWithLogits {
                scores,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                out,
            });
        }
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every parameter of `store` ends up
    /// with a populated gradient buffer: accumulated chain-rule terms for
    /// parameters reachable from `loss`, zeros for the rest. Calling again
    /// without `store.zero_grad()` accumulates.
    pub fn backward(&mut self, loss: TensorId, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for op in self.ops.iter().rev() {
            apply_backward(&self.nodes, op, &mut grads);
        }
        for i in 0..self.nodes.len() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[i].len()]);
            if let Some(pid) = self.param_of[i] {
                let pv = &mut store.params[pid.0].value;
                let n = pv.len();
                let pg = pv.grad.get_or_insert_with(|| vec![0.0; n]);
                for (dst, src) in pg.iter_mut().zip(&g) {
                    *dst += src;
                }
            }
            self.nodes[i].grad = Some(g);
        }
        // unreachable parameters still get (zero) gradient buffers
        for p in store.params.iter_mut() {
            if p.value.grad.is_none() {
                p.value.grad = Some(vec![0.0; p.value.len()]);
            }
        }
        Ok(())
    }
}

fn op_output(op: &Op) -> TensorId {
    match op {
        Op::MatMul { out, .. }
        | Op::VecMat { out, .. }
        | Op::MatVec { out, .. }
        | Op::Transpose { out, .. }
        | Op::SoftmaxRows { out, .. }
        | Op::LayerNorm { out, .. }
        | Op::Relu { out, .. }
        | Op::Sigmoid { out, .. }
        | Op::Tanh { out, .. }
        | Op::LogClamped { out, .. }
        | Op::Mul { out, .. }
        | Op::Add { out, .. }
        | Op::AddRowBroadcast { out, .. }
        | Op::Scale { out, .. }
        | Op::ConcatCols { out, .. }
        | Op::ConcatRows { out, .. }
        | Op::StackRows { out, .. }
        | Op::SliceCols { out, .. }
        | Op::SliceRows { out, .. }
        | Op::SelectRow { out, .. }
        | Op::SumReduce { out, .. }
        | Op::EmbeddingLookup { out, .. }
        | Op::BceWithLogits { out, .. } => *out,
    }
}

/// Lazily allocated gradient slot; None when the node does not track
/// gradients.
fn slot<'a>(
    nodes: &[TensorValue],
    grads: &'a mut [Option<Vec<f64>>],
    id: TensorId,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let n = nodes[id.0].len();
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]))
}

fn apply_backward(nodes: &[TensorValue], op: &Op, grads: &mut [Option<Vec<f64>>]) {
    let out_id = op_output(op);
    // an absent output gradient means nothing downstream consumed this op
    let go = match grads[out_id.0].take() {
        Some(g) => g,
        None => return,
    };
    match op {
        Op::MatMul { a, b, out: _ } => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if nodes[a.0].requires_grad {
                let bv = &nodes[b.0].data;
                let da = slot(nodes, grads, *a).unwrap();
                // dA = dC · Bᵀ
                for i in 0..m {
                    let go_row = &go[i * n..(i + 1) * n];
                    let da_row = &mut da[i * k..(i + 1) * k];
                    for (j, d) in da_row.iter_mut().enumerate() {
                        let b_row = &bv[j * n..(j + 1) * n];
                        *d += go_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if nodes[b.0].requires_grad {
                let av = &nodes[a.0].data;
                let db = slot(nodes, grads, *b).unwrap();
                // dB = Aᵀ · dC
                for p in 0..m {
                    let a_row = &av[p * k..(p + 1) * k];
                    let go_row = &go[p * n..(p + 1) * n];
                    for (j, &apj) in a_row.iter().enumerate() {
                        let db_row = &mut db[j * n..(j + 1) * n];
                        for (d, &g) in db_row.iter_mut().zip(go_row) {
                            *d += apj * g;
                        }
                    }
                }
            }
        }
        Op::VecMat { v, m, out: _ } => {
            let (k, n) = (nodes[m.0].shape[0], nodes[m.0].shape[1]);
            if nodes[v.0].requires_grad {
                let mv = &nodes[m.0].data;
                let dv = slot(nodes, grads, *v).unwrap();
                for i in 0..k {
                    let m_row = &mv[i * n..(i + 1) * n];
                    dv[i] += go.iter().zip(m_row).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            if nodes[m.0].requires_grad {
                let vv = &nodes[v.0].data;
                let dm = slot(nodes, grads, *m).unwrap();
                for i in 0..k {
                    let dm_row = &mut dm[i * n..(i + 1) * n];
                    let vi = vv[i];
                    for (d, &g) in dm_row.iter_mut().zip(&go) {
                        *d += vi * g;
                    }
                }
            }
        }
        Op::MatVec { m, v, out: _ } => {
            let (n, k) = (nodes[m.0].shape[0], nodes[m.0].shape[1]);
            if nodes[m.0].requires_grad {
                let vv = &nodes[v.0].data;
                let dm = slot(nodes, grads, *m).unwrap();
                for i in 0..n {
                    let dm_row = &mut dm[i * k..(i + 1) * k];
                    let gi = go[i];
                    for (d, &x) in dm_row.iter_mut().zip(vv) {
                        *d += gi * x;
                    }
                }
            }
            if nodes[v.0].requires_grad {
                let mv = &nodes[m.0].data;
                let dv = slot(nodes, grads, *v).unwrap();
                for i in 0..n {
                    let m_row = &mv[i * k..(i + 1) * k];
                    let gi = go[i];
                    for (d, &x) in dv.iter_mut().zip(m_row) {
                        *d += gi * x;
                    }
                }
            }
        }
        Op::Transpose { x, out } => {
            let (c, r) = (nodes[out.0].shape[0], nodes[out.0].shape[1]);
            if let Some(dx) = slot(nodes, grads, *x) {
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] += go[i * r + j];
                    }
                }
            }
        }
        Op::SoftmaxRows { x, out, allowed } => {
            let y = &nodes[out.0].data;
            let (rows, cols) = nodes[out.0].rows_cols();
            if let Some(dx) = slot(nodes, grads, *x) {
                for r in 0..rows {
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let grow = &go[r * cols..(r + 1) * cols];
                    let arow = &allowed[r * cols..(r + 1) * cols];
                    let mut dot = 0.0;
                    for j in 0..cols {
                        if arow[j] {
                            dot += yrow[j] * grow[j];
                        }
                    }
                    let drow = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        if arow[j] {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, out: _, mean, rstd } => {
            let (rows, d) = nodes[x.0].rows_cols();
            let xv = &nodes[x.0].data;
            let gv = &nodes[gain.0].data;
            let mut xhat = vec![0.0; d];
            let mut dy = vec![0.0; d];
            for r in 0..rows {
                let xrow = &xv[r * d..(r + 1) * d];
                let grow = &go[r * d..(r + 1) * d];
                for j in 0..d {
                    xhat[j] = (xrow[j] - mean[r]) * rstd[r];
                    dy[j] = grow[j] * gv[j];
                }
                if nodes[gain.0].requires_grad {
                    let dgain = slot(nodes, grads, *gain).unwrap();
                    for j in 0..d {
                        dgain[j] += grow[j] * xhat[j];
                    }
                }
                if nodes[bias.0].requires_grad {
                    let dbias = slot(nodes, grads, *bias).unwrap();
                    for j in 0..d {
                        dbias[j] += grow[j];
                    }
                }
                if nodes[x.0].requires_grad {
                    let mean_dy = dy.iter().sum::<f64>() / d as f64;
                    let mean_dy_xhat =
                        dy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let dx = slot(nodes, grads, *x).unwrap();
                    let drow = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        drow[j] += rstd[r] * (dy[j] - mean_dy - xhat[j] * mean_dy_xhat);
                    }
                }
            }
        }
        Op::Relu { x, out: _ } => {
            let xv = &nodes[x.0].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &v) in dx.iter_mut().zip(&go).zip(xv) {
                    if v > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid { x, out } => {
            let y = &nodes[out.0].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &y) in dx.iter_mut().zip(&go).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        Op::Tanh { x, out } => {
            let y = &nodes[out.0].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &y) in dx.iter_mut().zip(&go).zip(y) {
                    *d += g * (1.0 - y * y);
                }
            }
        }
        Op::LogClamped { x, out: _ } => {
            let xv = &nodes[x.0].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &v) in dx.iter_mut().zip(&go).zip(xv) {
                    if v >= LOG_CLAMP {
                        *d += g / v;
                    }
                }
            }
        }
        Op::Mul { a, b, out: _ } => {
            if nodes[a.0].requires_grad {
                let bv = &nodes[b.0].data;
                let da = slot(nodes, grads, *a).unwrap();
                for ((d, &g), &v) in da.iter_mut().zip(&go).zip(bv) {
                    *d += g * v;
                }
            }
            if nodes[b.0].requires_grad {
                let av = &nodes[a.0].data;
                let db = slot(nodes, grads, *b).unwrap();
                for ((d, &g), &v) in db.iter_mut().zip(&go).zip(av) {
                    *d += g * v;
                }
            }
        }
        Op::Add { a, b, out: _ } => {
            for id in [a, b] {
                if let Some(d) = slot(nodes, grads, *id) {
                    for (dst, &g) in d.iter_mut().zip(&go) {
                        *dst += g;
                    }
                }
            }
        }
        Op::AddRowBroadcast { a, b, out: _ } => {
            let (rows, cols) = nodes[a.0].rows_cols();
            if let Some(da) = slot(nodes, grads, *a) {
                for (dst, &g) in da.iter_mut().zip(&go) {
                    *dst += g;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for r in 0..rows {
                    let go_row = &go[r * cols..(r + 1) * cols];
                    for (d, &g) in db.iter_mut().zip(go_row) {
                        *d += g;
                    }
                }
            }
        }
        Op::Scale { x, c, out: _ } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, &g) in dx.iter_mut().zip(&go) {
                    *d += g * c;
                }
            }
        }
        Op::ConcatCols { inputs, out } => {
            if nodes[out.0].shape.len() == 1 {
                let mut off = 0;
                for &id in inputs {
                    let n = nodes[id.0].len();
                    if let Some(d) = slot(nodes, grads, id) {
                        for (dst, &g) in d.iter_mut().zip(&go[off..off + n]) {
                            *dst += g;
                        }
                    }
                    off += n;
                }
            } else {
                let rows = nodes[out.0].shape[0];
                let total = nodes[out.0].shape[1];
                let mut col0 = 0;
                for &id in inputs {
                    let c = nodes[id.0].shape[1];
                    if let Some(d) = slot(nodes, grads, id) {
                        for r in 0..rows {
                            let src = &go[r * total + col0..r * total + col0 + c];
                            for (dst, &g) in d[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *dst += g;
                            }
                        }
                    }
                    col0 += c;
                }
            }
        }
        Op::ConcatRows { inputs, out: _ } => {
            let mut off = 0;
            for &id in inputs {
                let n = nodes[id.0].len();
                if let Some(d) = slot(nodes, grads, id) {
                    for (dst, &g) in d.iter_mut().zip(&go[off..off + n]) {
                        *dst += g;
                    }
                }
                off += n;
            }
        }
        Op::StackRows { inputs, out } => {
            let c = nodes[out.0].shape[1];
            for (i, &id) in inputs.iter().enumerate() {
                if let Some(d) = slot(nodes, grads, id) {
                    for (dst, &g) in d.iter_mut().zip(&go[i * c..(i + 1) * c]) {
                        *dst += g;
                    }
                }
            }
        }
        Op::SliceCols { x, start, out } => {
            let cols = *nodes[x.0].shape.last().unwrap();
            let (rows, _) = nodes[x.0].rows_cols();
            let len = *nodes[out.0].shape.last().unwrap();
            if let Some(dx) = slot(nodes, grads, *x) {
                for r in 0..rows {
                    let src = &go[r * len..(r + 1) * len];
                    let dst = &mut dx[r * cols + start..r * cols + start + len];
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d += g;
                    }
                }
            }
        }
        Op::SliceRows { x, start, out } => {
            let d_cols = nodes[x.0].shape[1];
            let len = nodes[out.0].shape[0];
            if let Some(dx) = slot(nodes, grads, *x) {
                let dst = &mut dx[start * d_cols..(start + len) * d_cols];
                for (d, &g) in dst.iter_mut().zip(&go) {
                    *d += g;
                }
            }
        }
        Op::SelectRow { x, row, out: _ } => {
            let d_cols = nodes[x.0].shape[1];
            if let Some(dx) = slot(nodes, grads, *x) {
                let dst = &mut dx[row * d_cols..(row + 1) * d_cols];
                for (d, &g) in dst.iter_mut().zip(&go) {
                    *d += g;
                }
            }
        }
        Op::SumReduce { x, out: _ } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += go[0];
                }
            }
        }
        Op::EmbeddingLookup { table, indices, out: _ } => {
            let d_cols = nodes[table.0].shape[1];
            if let Some(dt) = slot(nodes, grads, *table) {
                for (k, &i) in indices.iter().enumerate() {
                    let src = &go[k * d_cols..(k + 1) * d_cols];
                    let dst = &mut dt[i * d_cols..(i + 1) * d_cols];
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d += g;
                    }
                }
            }
        }
        Op::BceWithLogits { scores, targets, mask, out: _ } => {
            let sv = &nodes[scores.0].data;
            if let Some(dx) = slot(nodes, grads, *scores) {
                for i in 0..sv.len() {
                    if mask[i] {
                        dx[i] += go[i] * (1.0 / (1.0 + (-sv[i]).exp()) - targets[i]);
                    }
                }
            }
        }
    }
    grads[out_id.0] = Some(go);

}
