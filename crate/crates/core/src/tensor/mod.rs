//! Minimal reverse-mode differentiation on a tape.
//!
//! A [`Graph`] records every forward op in creation order, which is already a
//! topological order, so backward is a single reverse sweep. All reductions
//! run sequentially in a fixed order, so results are bit-reproducible.

mod gradcheck;
mod params;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{read_tensor_table, write_tensor_table, NamedTensor, Param, ParamId, ParamStore};

use std::collections::HashMap;

use crate::error::{invalid_arg, shape_err, MmptError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        input: Var,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    /// max/min over an axis; `arg` holds the flat input index chosen per output.
    Pick {
        input: Var,
        arg: Vec<usize>,
    },
    MeanAxis {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
    },
    PairwiseSqDist(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Pick { .. } => "max/min_over_axis",
            Op::MeanAxis { .. } => "mean_over_axis",
            Op::SumAll(..) => "sum",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
    backward_done: bool,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled,
            backward_done: false,
        }
    }

    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A graph that never records gradients; parameters bind as constants.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if let Some(pos) = value.iter().position(|x| !x.is_finite()) {
            return Err(MmptError::Numeric(format!(
                "{} produced non-finite value {} at flat index {pos}",
                op.name(),
                value[pos]
            )));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_inner(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(shape_err!("leaf shape {shape:?} does not match {} values", data.len()));
        }
        let v = self.push(shape.to_vec(), data, Op::Leaf, &[])?;
        self.nodes[v.0].requires_grad = requires_grad && self.grad_enabled;
        Ok(v)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.leaf_inner(shape, data, true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.leaf_inner(shape, data, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        self.constant(shape, vec![0.0; numel(shape)])
    }

    /// Binds a parameter as a leaf. Repeated calls return the same node, so
    /// gradients from every use accumulate on one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self
            .leaf_inner(&p.shape, p.data.clone(), true)
            .expect("parameter store holds only finite, well-shaped tensors");
        self.param_vars.insert(id, v);
        v
    }

    /// Gradients of every parameter bound in this graph, indexed by id.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; store.len()];
        for (&id, &v) in &self.param_vars {
            out[id.index()] = Some(
                self.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.get(id).data.len()]),
            );
        }
        out
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    // ----- elementwise -----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_check(&self, a: Var, row: Var, what: &str) -> Result<usize> {
        let c = last_dim(self.shape(a));
        if self.value(row).len() != c {
            return Err(shape_err!(
                "{what}: row of {} values cannot align with trailing extent of {:?}",
                self.value(row).len(),
                self.shape(a)
            ));
        }
        Ok(c)
    }

    /// `a + row`, where `row` broadcasts over every leading index of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.row_check(a, row, "add_row")?;
        let r = &self.nodes[row.0].value;
        let value = self.nodes[a.0].value.iter().enumerate().map(|(i, &x)| x + r[i % c]).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::AddRow(a, row), &[a, row])
    }

    /// `a * row`, where `row` broadcasts over every leading index of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.row_check(a, row, "mul_row")?;
        let r = &self.nodes[row.0].value;
        let value = self.nodes[a.0].value.iter().enumerate().map(|(i, &x)| x * r[i % c]).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::AddScalar(a), &[a])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), |x| gelu_parts(x).0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid_arg!("clamp bounds {lo} > {hi}"));
        }
        self.unary(a, Op::Clamp { input: a, lo, hi }, |x| x.clamp(lo, hi))
    }

    // ----- linear algebra and layout -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {sa:?} x {sb:?}"));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = va[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &vb[p * m..(p + 1) * m];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push(vec![n, m], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err!("transpose expects a matrix, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(shape_err!("reshape {:?} -> {shape:?}", self.shape(a)));
        }
        let value = self.value(a).to_vec();
        self.push(shape.to_vec(), value, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| invalid_arg!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.nodes[v.0].value[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err!("slice [{start}, {}) on axis {axis} of {s:?}", start + len));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(shape, out, Op::Slice { input: a, axis, start }, &[a])
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(shape_err!("gather_rows on a rank-0 tensor"));
        }
        let row = numel(&s[1..]);
        if let Some(bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(shape_err!("gather_rows index {bad} out of range for {} rows", s[0]));
        }
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = index.len();
        self.push(
            shape,
            out,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    // ----- normalisation and reductions -----

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softmax(a), &[a])
    }

    /// Shifted-form log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let c = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::LogSoftmax(a), &[a])
    }

    /// Zero-mean unit-variance over the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let c = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        let mut rstd = Vec::with_capacity(out.len() / c.max(1));
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::LayerNorm { input: a, rstd }, &[a])
    }

    /// Rows of the last axis scaled to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let c = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / c.max(1));
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::L2Normalize { input: a, norms }, &[a])
    }

    fn pick_axis(&mut self, a: Var, axis: usize, better: impl Fn(f64, f64) -> bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err!("reduction over axis {axis} of {s:?}"));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = o * len * inner + l * inner + i;
                    // strict comparison keeps the first extremal element on ties
                    if better(v[idx], v[best]) {
                        best = idx;
                    }
                }
                out.push(v[best]);
                arg.push(best);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        self.push(shape, out, Op::Pick { input: a, arg }, &[a])
    }

    /// Maximum over `axis`; the gradient goes to the first maximal element.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.pick_axis(a, axis, |x, best| x > best)
    }

    /// Minimum over `axis`; the gradient goes to the first minimal element.
    pub fn min_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.pick_axis(a, axis, |x, best| x < best)
    }

    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err!("mean over axis {axis} of {s:?}"));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = o * len * inner + l * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        for x in &mut out {
            *x /= len as f64;
        }
        let mut shape = s;
        shape.remove(axis);
        self.push(shape, out, Op::MeanAxis { input: a, axis }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().sum();
        self.push(vec![1], vec![total], Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Squared Euclidean distances between the rows of `a` (n×d) and `b` (m×d).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err!("pairwise_sq_dist: {sa:?} vs {sb:?}"));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = &va[i * d..(i + 1) * d];
            for j in 0..m {
                let rb = &vb[j * d..(j + 1) * d];
                out.push(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        self.push(vec![n, m], out, Op::PairwiseSqDist(a, b), &[a, b])
    }

    // ----- composites -----

    /// `x · w + b` for a matrix `x` (rows are samples).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ----- backward -----

    /// Reverse sweep from a scalar root. A second call without
    /// [`Graph::zero_grad`] is rejected.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(MmptError::InvalidState(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(invalid_arg!("backward root must be scalar, got shape {:?}", self.shape(root)));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.propagate(id, &gout);
            }
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn grad_slot(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        accumulate(&mut self.grads[v.0], len)
    }

    fn add_into(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        let slot = self.grad_slot(v);
        for (s, x) in slot.iter_mut().zip(g) {
            *s += x;
        }
    }

    fn propagate(&mut self, id: usize, gout: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(a, gout);
                self.add_into(b, gout);
            }
            Op::Sub(a, b) => {
                self.add_into(a, gout);
                if self.wants(b) {
                    let neg: Vec<f64> = gout.iter().map(|x| -x).collect();
                    self.add_into(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let g: Vec<f64> = gout.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y).collect();
                    self.add_into(a, &g);
                }
                if self.wants(b) {
                    let g: Vec<f64> = gout.iter().zip(&self.nodes[a.0].value).map(|(x, y)| x * y).collect();
                    self.add_into(b, &g);
                }
            }
            Op::AddRow(a, row) => {
                self.add_into(a, gout);
                if self.wants(row) {
                    let c = self.nodes[row.0].value.len();
                    let mut g = vec![0.0; c];
                    for (i, x) in gout.iter().enumerate() {
                        g[i % c] += x;
                    }
                    self.add_into(row, &g);
                }
            }
            Op::MulRow(a, row) => {
                let c = self.nodes[row.0].value.len();
                if self.wants(a) {
                    let r = &self.nodes[row.0].value;
                    let g: Vec<f64> = gout.iter().enumerate().map(|(i, x)| x * r[i % c]).collect();
                    self.add_into(a, &g);
                }
                if self.wants(row) {
                    let va = &self.nodes[a.0].value;
                    let mut g = vec![0.0; c];
                    for (i, x) in gout.iter().enumerate() {
                        g[i % c] += x * va[i];
                    }
                    self.add_into(row, &g);
                }
            }
            Op::Scale(a, c) => {
                let g: Vec<f64> = gout.iter().map(|x| x * c).collect();
                self.add_into(a, &g);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.add_into(a, gout),
            Op::MatMul(a, b) => {
                let (n, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let m = self.nodes[b.0].shape[1];
                if self.wants(a) {
                    // dA = dC · Bᵀ
                    let vb = &self.nodes[b.0].value;
                    let mut g = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &gout[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &vb[p * m..(p + 1) * m];
                            g[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.add_into(a, &g);
                }
                if self.wants(b) {
                    // dB = Aᵀ · dC
                    let va = &self.nodes[a.0].value;
                    let mut g = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &gout[i * m..(i + 1) * m];
                        for p in 0..k {
                            let x = va[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in g[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                    self.add_into(b, &g);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = gout[j * r + i];
                    }
                }
                self.add_into(a, &g);
            }
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[id].shape.clone();
                let (outer, total, inner) = axis_split(&shape, axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.nodes[v.0].shape[axis];
                    if self.wants(v) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            g.extend_from_slice(&gout[base..base + len * inner]);
                        }
                        self.add_into(v, &g);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.wants(input) {
                    let s = self.nodes[input.0].shape.clone();
                    let len = self.nodes[id].shape[axis];
                    let (outer, full, inner) = axis_split(&s, axis);
                    let slot = self.grad_slot(input);
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        for (d, x) in slot[base..base + len * inner].iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                }
            }
            Op::GatherRows { input, index } => {
                if self.wants(input) {
                    let row = numel(&self.nodes[input.0].shape[1..]);
                    let slot = self.grad_slot(input);
                    for (k, &i) in index.iter().enumerate() {
                        for (d, x) in slot[i * row..(i + 1) * row].iter_mut().zip(&gout[k * row..(k + 1) * row]) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let c = last_dim(&self.nodes[id].shape);
                let y = &self.nodes[id].value;
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &dd) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = yy * (dd - dot);
                    }
                }
                self.add_into(a, &g);
            }
            Op::LogSoftmax(a) => {
                let c = last_dim(&self.nodes[id].shape);
                let y = &self.nodes[id].value;
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                    let total: f64 = dr.iter().sum();
                    for ((o, &yy), &dd) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = dd - yy.exp() * total;
                    }
                }
                self.add_into(a, &g);
            }
            Op::LayerNorm { input, rstd } => {
                let c = last_dim(&self.nodes[id].shape);
                let y = &self.nodes[id].value;
                let mut g = vec![0.0; y.len()];
                for (r, ((gr, yr), dr)) in g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)).enumerate() {
                    let mean_d = dr.iter().sum::<f64>() / c as f64;
                    let mean_dy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, &yy), &dd) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = rstd[r] * (dd - mean_d - yy * mean_dy);
                    }
                }
                self.add_into(input, &g);
            }
            Op::L2Normalize { input, norms } => {
                let c = last_dim(&self.nodes[id].shape);
                let y = &self.nodes[id].value;
                let mut g = vec![0.0; y.len()];
                for (r, ((gr, yr), dr)) in g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &dd) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = (dd - yy * dot) / norms[r];
                    }
                }
                self.add_into(input, &g);
            }
            Op::Gelu(a) => {
                let x = &self.nodes[a.0].value;
                let g: Vec<f64> = gout.iter().zip(x).map(|(d, &x)| d * gelu_parts(x).1).collect();
                self.add_into(a, &g);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                let g: Vec<f64> = gout.iter().zip(y).map(|(d, y)| d * y).collect();
                self.add_into(a, &g);
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value;
                let g: Vec<f64> = gout.iter().zip(x).map(|(d, x)| d / x).collect();
                self.add_into(a, &g);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let g: Vec<f64> = gout.iter().zip(y).map(|(d, y)| d * y * (1.0 - y)).collect();
                self.add_into(a, &g);
            }
            Op::Clamp { input, lo, hi } => {
                let x = &self.nodes[input.0].value;
                let g: Vec<f64> = gout
                    .iter()
                    .zip(x)
                    .map(|(d, &x)| if x >= lo && x <= hi { *d } else { 0.0 })
                    .collect();
                self.add_into(input, &g);
            }
            Op::Pick { input, arg } => {
                if self.wants(input) {
                    let slot = self.grad_slot(input);
                    for (&i, d) in arg.iter().zip(gout) {
                        slot[i] += d;
                    }
                }
            }
            Op::MeanAxis { input, axis } => {
                if self.wants(input) {
                    let s = self.nodes[input.0].shape.clone();
                    let (outer, len, inner) = axis_split(&s, axis);
                    let slot = self.grad_slot(input);
                    let inv = 1.0 / len as f64;
                    for o in 0..outer {
                        for l in 0..len {
                            let base = o * len * inner + l * inner;
                            for i in 0..inner {
                                slot[base + i] += gout[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.len();
                self.add_into(a, &vec![gout[0]; n]);
            }
            Op::PairwiseSqDist(a, b) => {
                let (n, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let m = self.nodes[b.0].shape[0];
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let w = 2.0 * gout[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = va[i * d + t] - vb[j * d + t];
                            ga[i * d + t] += w * diff;
                            gb[j * d + t] -= w * diff;
                        }
                    }
                }
                self.add_into(a, &ga);
                self.add_into(b, &gb);
            }
        }
    }
}
