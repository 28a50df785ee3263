//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records a DAG of operations as it executes the forward pass;
//! [`Tape::backward`] walks the nodes in reverse creation order (which is a
//! topological order by construction) and accumulates gradients. The op set
//! is exactly what the transformer blocks, the convolutional silhouette
//! encoder and the losses need; everything else is composed from it.
//!
//! Gradient flow is pruned through `needs_grad`: constants and frozen
//! parameters do not propagate, so e.g. a frozen encoder costs forward time
//! only. All iteration is in fixed index order; given identical inputs the
//! engine is bit-deterministic.

use ndarray::{Array2, Axis};
use num_traits::Float;

use crate::scalar::{s, Scalar};
use crate::store::{ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Geometry of a 2-D convolution over an image stored as (channels, h*w).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId, S),
    /// (M x d) + broadcast of a (1 x d) row.
    AddRow(NodeId, NodeId),
    Transpose(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    /// Row-wise layer norm with (1 x d) gain and bias.
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu(NodeId),
    Exp(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    SumAll(NodeId),
    MeanAll(NodeId),
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, spec: ConvSpec },
}

struct Node<S: Scalar> {
    value: Array2<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Owned copy in standard (C) layout; node values and gradients are kept
/// contiguous so flat indexing and slice access always work.
fn to_std<S: Scalar>(v: ndarray::ArrayView2<'_, S>) -> Array2<S> {
    match v.to_slice() {
        Some(slice) => Array2::from_shape_vec(v.raw_dim(), slice.to_vec()).expect("shape"),
        None => Array2::from_shape_fn(v.raw_dim(), |ix| v[ix]),
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<S> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar_value on non-scalar node");
        v[(0, 0)]
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, value: Array2<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (parameters, or test probes).
    pub fn variable(&mut self, value: Array2<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> NodeId {
        let v = self.value(a).mapv(|x| x * factor);
        self.push(v, Op::Scale(a, factor), self.needs(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a, c), self.needs(a))
    }

    /// Adds a (1 x d) row vector to every row of a (m x d) matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single-row rhs");
        assert_eq!(r.ncols(), self.value(a).ncols(), "add_row width mismatch");
        let v = self.value(a) + r;
        self.push(v, Op::AddRow(a, row), self.needs(a) || self.needs(row))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = to_std(self.value(a).t());
        self.push(v, Op::Transpose(a), self.needs(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mut mx = S::neg_infinity();
            for e in row.iter() {
                if *e > mx {
                    mx = *e;
                }
            }
            let mut sum = S::zero();
            for e in row.iter_mut() {
                *e = Float::exp(*e - mx);
                sum = sum + *e;
            }
            for e in row.iter_mut() {
                *e = *e / sum;
            }
        }
        self.push(v, Op::Softmax(a), self.needs(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let d = self.value(x).ncols();
        assert_eq!(self.value(gain).dim(), (1, d), "layer_norm gain shape");
        assert_eq!(self.value(bias).dim(), (1, d), "layer_norm bias shape");
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut v = xv.clone();
        let eps = s::<S>(LAYER_NORM_EPS);
        let inv_d = s::<S>(1.0 / d as f64);
        for mut row in v.rows_mut() {
            let mut mean = S::zero();
            for e in row.iter() {
                mean = mean + *e;
            }
            mean = mean * inv_d;
            let mut var = S::zero();
            for e in row.iter() {
                let c = *e - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv_std = S::one() / Float::sqrt(var + eps);
            for (j, e) in row.iter_mut().enumerate() {
                *e = (*e - mean) * inv_std * gv[(0, j)] + bv[(0, j)];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(v, Op::LayerNorm { x, gain, bias }, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c0 = s::<S>(GELU_C0);
        let c1 = s::<S>(GELU_C1);
        let half = s::<S>(0.5);
        let v = self.value(a).mapv(|x| {
            let u = c0 * (x + c1 * x * x * x);
            half * x * (S::one() + Float::tanh(u))
        });
        self.push(v, Op::Gelu(a), self.needs(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| Float::exp(x));
        self.push(v, Op::Exp(a), self.needs(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = to_std(self.value(a).slice(ndarray::s![.., start..start + len]));
        self.push(v, Op::SliceCols(a, start, len), self.needs(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape");
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = to_std(self.value(a).slice(ndarray::s![start..start + len, ..]));
        self.push(v, Op::SliceRows(a, start, len), self.needs(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).iter().fold(S::zero(), |acc, x| acc + *x);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a), self.needs(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let total = self.value(a).iter().fold(S::zero(), |acc, x| acc + *x);
        let v = total * s::<S>(1.0 / n as f64);
        self.push(Array2::from_elem((1, 1), v), Op::MeanAll(a), self.needs(a))
    }

    /// 2-D convolution; `input` is (c_in, h*w), `weight` (c_out, c_in*k*k),
    /// `bias` (1, c_out). Output is (c_out, h_out*w_out).
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, spec: ConvSpec) -> NodeId {
        assert_eq!(self.value(input).dim(), (spec.c_in, spec.h * spec.w), "conv2d input shape");
        assert_eq!(
            self.value(weight).dim(),
            (spec.c_out, spec.c_in * spec.k * spec.k),
            "conv2d weight shape"
        );
        assert_eq!(self.value(bias).dim(), (1, spec.c_out), "conv2d bias shape");
        let col = im2col(self.value(input), &spec);
        let mut out = self.value(weight).dot(&col);
        for (c, mut row) in out.rows_mut().into_iter().enumerate() {
            let b = self.value(bias)[(0, c)];
            for e in row.iter_mut() {
                *e = *e + b;
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(out, Op::Conv2d { input, weight, bias, spec }, needs)
    }

    /// Convenience: mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Backpropagates from a scalar node; returns per-node gradients (taken
    /// for interior nodes as the walk passes them, retained for leaves).
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Array2<S>>> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Array2<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize(self.nodes.len(), None);
        grads[loss.0] = Some(Array2::from_elem((1, 1), S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        grads
    }

    fn backprop_node(&self, i: usize, g: &Array2<S>, grads: &mut [Option<Array2<S>>]) {
        let acc = |grads: &mut [Option<Array2<S>>], id: NodeId, contrib: Array2<S>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let gb = g.dot(&self.value(*b).t());
                    acc(grads, *a, gb);
                }
                if self.needs(*b) {
                    let ga = self.value(*a).t().dot(g);
                    acc(grads, *b, ga);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|x| S::zero() - x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, f) => acc(grads, *a, g.mapv(|x| x * *f)),
            Op::AddScalar(a, _) => acc(grads, *a, g.clone()),
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                if self.needs(*row) {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, *row, summed);
                }
            }
            Op::Transpose(a) => acc(grads, *a, to_std(g.t())),
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let mut gx = g * y;
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = grow.iter().fold(S::zero(), |acc2, x| acc2 + *x);
                    for (e, yv) in grow.iter_mut().zip(yrow.iter()) {
                        *e = *e - dot * *yv;
                    }
                }
                acc(grads, *a, gx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.ncols();
                let inv_d = s::<S>(1.0 / d as f64);
                let eps = s::<S>(LAYER_NORM_EPS);
                if self.needs(*bias) {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, *bias, gb);
                }
                let mut ggain = Array2::<S>::zeros((1, d));
                let mut gx = Array2::<S>::zeros(xv.dim());
                for (r, xrow) in xv.rows().into_iter().enumerate() {
                    let mut mean = S::zero();
                    for e in xrow.iter() {
                        mean = mean + *e;
                    }
                    mean = mean * inv_d;
                    let mut var = S::zero();
                    for e in xrow.iter() {
                        let c = *e - mean;
                        var = var + c * c;
                    }
                    var = var * inv_d;
                    let inv_std = S::one() / Float::sqrt(var + eps);
                    let mut mean_gh = S::zero();
                    let mut mean_ghx = S::zero();
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv_std;
                        let gh = g[(r, j)] * gv[(0, j)];
                        mean_gh = mean_gh + gh;
                        mean_ghx = mean_ghx + gh * xhat;
                        ggain[(0, j)] = ggain[(0, j)] + g[(r, j)] * xhat;
                    }
                    mean_gh = mean_gh * inv_d;
                    mean_ghx = mean_ghx * inv_d;
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv_std;
                        let gh = g[(r, j)] * gv[(0, j)];
                        gx[(r, j)] = (gh - mean_gh - xhat * mean_ghx) * inv_std;
                    }
                }
                if self.needs(*gain) {
                    acc(grads, *gain, ggain);
                }
                acc(grads, *x, gx);
            }
            Op::Gelu(a) => {
                let c0 = s::<S>(GELU_C0);
                let c1 = s::<S>(GELU_C1);
                let half = s::<S>(0.5);
                let three = s::<S>(3.0);
                let xv = self.value(*a);
                let mut gx = g.clone();
                for (e, x) in gx.iter_mut().zip(xv.iter()) {
                    let x = *x;
                    let u = c0 * (x + c1 * x * x * x);
                    let t = Float::tanh(u);
                    let du = c0 * (S::one() + three * c1 * x * x);
                    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
                    *e = *e * dy;
                }
                acc(grads, *a, gx);
            }
            Op::Exp(a) => acc(grads, *a, g * &self.nodes[i].value),
            Op::SliceCols(a, start, len) => {
                let mut gx = Array2::<S>::zeros(self.value(*a).dim());
                gx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(g);
                acc(grads, *a, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.needs(*p) {
                        let gp = to_std(g.slice(ndarray::s![.., offset..offset + w]));
                        acc(grads, *p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start, len) => {
                let mut gx = Array2::<S>::zeros(self.value(*a).dim());
                gx.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(g);
                acc(grads, *a, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if self.needs(*p) {
                        let gp = to_std(g.slice(ndarray::s![offset..offset + h, ..]));
                        acc(grads, *p, gp);
                    }
                    offset += h;
                }
            }
            Op::SumAll(a) => {
                let gx = Array2::from_elem(self.value(*a).dim(), g[(0, 0)]);
                acc(grads, *a, gx);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                let gx = Array2::from_elem(self.value(*a).dim(), g[(0, 0)] * s::<S>(1.0 / n as f64));
                acc(grads, *a, gx);
            }
            Op::Conv2d { input, weight, bias, spec } => {
                let col = im2col(self.value(*input), spec);
                if self.needs(*bias) {
                    let gb = g.sum_axis(Axis(1)).insert_axis(Axis(0));
                    acc(grads, *bias, gb);
                }
                if self.needs(*weight) {
                    let gw = g.dot(&col.t());
                    acc(grads, *weight, gw);
                }
                if self.needs(*input) {
                    let gcol = self.value(*weight).t().dot(g);
                    acc(grads, *input, col2im(&gcol, spec));
                }
            }
        }
    }
}

fn im2col<S: Scalar>(input: &Array2<S>, spec: &ConvSpec) -> Array2<S> {
    let (ho, wo) = spec.out_hw();
    let mut col = Array2::<S>::zeros((spec.c_in * spec.k * spec.k, ho * wo));
    for c in 0..spec.c_in {
        for ky in 0..spec.k {
            for kx in 0..spec.k {
                let row = (c * spec.k + ky) * spec.k + kx;
                for oy in 0..ho {
                    let y = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if y < 0 || y >= spec.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let x = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if x < 0 || x >= spec.w as isize {
                            continue;
                        }
                        col[(row, oy * wo + ox)] = input[(c, y as usize * spec.w + x as usize)];
                    }
                }
            }
        }
    }
    col
}

fn col2im<S: Scalar>(gcol: &Array2<S>, spec: &ConvSpec) -> Array2<S> {
    let (ho, wo) = spec.out_hw();
    let mut gin = Array2::<S>::zeros((spec.c_in, spec.h * spec.w));
    for c in 0..spec.c_in {
        for ky in 0..spec.k {
            for kx in 0..spec.k {
                let row = (c * spec.k + ky) * spec.k + kx;
                for oy in 0..ho {
                    let y = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if y < 0 || y >= spec.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let x = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if x < 0 || x >= spec.w as isize {
                            continue;
                        }
                        let idx = (c, y as usize * spec.w + x as usize);
                        gin[idx] = gin[idx] + gcol[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    gin
}

/// A tape bound to a parameter store: parameters are injected as leaves on
/// first use (respecting frozen flags) and their gradients collected after
/// backward in id order.
pub struct Session<'a, S: Scalar> {
    pub tape: Tape<S>,
    store: &'a ParamStore<S>,
    injected: Vec<Option<NodeId>>,
}

impl<'a, S: Scalar> Session<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Session {
            tape: Tape::new(),
            store,
            injected: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    /// Node for a parameter, injecting it on first use.
    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.injected[id.index()] {
            return n;
        }
        let value = self.store.value(id).clone();
        let n = if self.store.is_frozen(id) {
            self.tape.constant(value)
        } else {
            self.tape.variable(value)
        };
        self.injected[id.index()] = Some(n);
        n
    }

    /// Runs backward from `loss` and gathers gradients for every injected,
    /// non-frozen parameter.
    pub fn grads(&self, loss: NodeId) -> ParamGrads<S> {
        let mut node_grads = self.tape.backward(loss);
        let mut out = ParamGrads::zeros(self.store.len());
        for (idx, node) in self.injected.iter().enumerate() {
            let id = crate::store::ParamId(idx);
            if self.store.is_frozen(id) {
                continue;
            }
            if let Some(n) = node {
                if let Some(g) = node_grads[n.0].take() {
                    out.accumulate(id, g);
                }
            }
        }
        out
    }
}

/// Result of a finite-difference gradient verification.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_flat_index: usize,
}

/// Verifies analytic gradients against central finite differences on the
/// given `(parameter, flat index)` slots.
///
/// `loss_fn` must be a deterministic function of the store (fix all RNG seeds
/// inside). The relative error denominator is floored at `1e-3 * rms` of the
/// analytic gradient (min 1e-8) so that slots with near-zero gradients are
/// judged against the problem's own gradient scale rather than raw ratios of
/// finite-difference noise.
pub fn finite_difference_check<S: Scalar>(
    store: &mut ParamStore<S>,
    slots: &[(ParamId, usize)],
    h: f64,
    mut loss_fn: impl FnMut(&ParamStore<S>) -> (f64, ParamGrads<S>),
) -> GradCheck {
    let (_, grads) = loss_fn(store);
    let mut sq_sum = 0.0;
    let mut n = 0usize;
    for (_, g) in grads.iter() {
        for x in g.iter() {
            sq_sum += x.widen() * x.widen();
            n += 1;
        }
    }
    let rms = if n > 0 { (sq_sum / n as f64).sqrt() } else { 0.0 };
    let floor = (1e-3 * rms).max(1e-8);

    let mut check = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_flat_index: 0,
    };
    for &(pid, flat) in slots {
        let analytic = grads.get(pid).map(|g| flat_get(g, flat)).unwrap_or(0.0);
        let base = flat_get(store.value(pid), flat);
        set_flat(store, pid, flat, base + h);
        let (lp, _) = loss_fn(store);
        set_flat(store, pid, flat, base - h);
        let (lm, _) = loss_fn(store);
        set_flat(store, pid, flat, base);
        let fd = (lp - lm) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor);
        check.checked += 1;
        if rel > check.max_rel_err {
            check.max_rel_err = rel;
            check.worst_param = store.name(pid).to_string();
            check.worst_flat_index = flat;
        }
    }
    check
}

/// Row-major logical flat read, independent of memory layout.
fn flat_get<S: Scalar>(a: &Array2<S>, flat: usize) -> f64 {
    let c = a.ncols();
    a[(flat / c, flat % c)].widen()
}

fn set_flat<S: Scalar>(store: &mut ParamStore<S>, pid: ParamId, flat: usize, v: f64) {
    let a = store.value_mut(pid);
    let c = a.ncols();
    a[(flat / c, flat % c)] = s(v);
}
