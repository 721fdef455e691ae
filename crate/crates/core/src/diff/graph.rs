//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order: [`Graph::backward`] walks it once in reverse and every
//! node is visited exactly once. Gradients reaching a node along several
//! paths are summed.
//!
//! Binary elementwise ops broadcast an operand whose row or column count is 1.
//!
//! Subgradient conventions: `abs` and `relu` use 0 at the kink, `clamp` passes
//! the gradient when the input is inside the closed range, `wrap` has
//! derivative 1, and the min of a stack routes the whole gradient to the
//! first index attaining the minimum.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::sigmoid;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    GatherParam { id: ParamId, rows: Vec<usize>, table: (usize, usize) },
    GatherRows(Var, Vec<usize>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Wrap(Var),
    Clamp(Var, f64, f64),
    Atan2 { y: Var, x: Var },
    MatMul(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SumCols(Var),
    MeanAll(Var),
    SoftmaxStack { inputs: Vec<Var>, index: usize },
    MinStack { inputs: Vec<Var>, argmin: Vec<u32> },
    MeanStack(Vec<Var>),
    L1Rows { a: (Var, Var), rows: Vec<usize>, b: (Var, Var) },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// A recorded computation, evaluated in `f64` unless stated otherwise.
///
/// Any [`Real`] scalar can run the forward pass; gradients are computed in
/// `f64` only.
#[derive(Debug)]
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
}

impl<T> Default for Graph<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Dense gradient for a parameter group.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Contract(format!("{what}: shapes {}x{} and {}x{} do not broadcast", a.0, a.1, b.0, b.1))),
    }
}

#[inline]
fn bidx<T: Real>(t: &Tensor<T>, r: usize, c: usize) -> T {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    t.get(rr, cc)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    let cols = shape.1;
    let data = out.data_mut();
    for r in 0..g.rows() {
        let rr = if shape.0 == 1 { 0 } else { r };
        for c in 0..g.cols() {
            let cc = if shape.1 == 1 { 0 } else { c };
            data[rr * cols + cc] += g.get(r, c);
        }
    }
    out
}

fn c<T: Real>(x: f64) -> T {
    T::from_f64(x)
}

fn sigmoid_t<T: Real>(x: T) -> T {
    if x >= c(0.0) {
        c::<T>(1.0) / (c::<T>(1.0) + (-x).exp())
    } else {
        let e = x.exp();
        e / (c::<T>(1.0) + e)
    }
}

fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= c(0.0) {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Maps `x` to the congruent angle in `[-π, π)`; the same steps as
/// [`crate::geometry::wrap_unchecked`].
fn wrap_t<T: Real>(x: T) -> T {
    let (pi, tau) = (c::<T>(PI), c::<T>(TAU));
    if x >= -pi && x < pi {
        return x;
    }
    let mut r = x - tau * ((x + pi) / tau).floor();
    if r >= pi {
        r = r - tau;
    }
    if r < -pi {
        r += tau;
    }
    r
}

fn sum<T: Real>(xs: &[T]) -> T {
    xs.iter().fold(c(0.0), |acc, &x| acc + x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Graph<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients are still reported for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(c(value)))
    }

    /// A whole parameter group.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).convert(), Op::Param(id))
    }

    /// Selected rows of a parameter table (embedding lookup).
    pub fn gather_param(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = store.value(id);
        let cols = table.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= table.rows() {
                return Err(Error::Data(format!(
                    "row {r} out of range for parameter '{}' with {} rows",
                    store.name(id),
                    table.rows()
                )));
            }
            data.extend(table.row_slice(r).iter().map(|&x| T::from_f64(x)));
        }
        let value = Tensor::new(rows.len(), cols, data)?;
        Ok(self.push(value, Op::GatherParam { id, rows: rows.to_vec(), table: table.shape() }))
    }

    pub fn gather_rows(&mut self, v: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(v);
        let mut data = Vec::with_capacity(rows.len() * src.cols());
        for &r in rows {
            if r >= src.rows() {
                return Err(Error::Contract(format!("gather row {r} out of range for {} rows", src.rows())));
            }
            data.extend_from_slice(src.row_slice(r));
        }
        let value = Tensor::new(rows.len(), src.cols(), data)?;
        Ok(self.push(value, Op::GatherRows(v, rows.to_vec())))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, cols) = broadcast_shape(ta.shape(), tb.shape(), what)?;
        let mut data = Vec::with_capacity(rows * cols);
        if ta.shape() == tb.shape() {
            data.extend(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
        } else {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(f(bidx(ta, r, c), bidx(tb, r, c)));
                }
            }
        }
        Tensor::new(rows, cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt: T = c(k);
        let t = self.value(a).map(|x| kt * x);
        self.push(t, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let kt: T = c(k);
        let t = self.value(a).map(|x| x + kt);
        self.push(t, Op::Offset(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Real::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Real::cos, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Real::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_t, Op::Sigmoid(a))
    }

    /// `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Real::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > c(0.0) { x } else { c(0.0) }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Real::abs, Op::Abs(a))
    }

    /// Wraps angles to `[-π, π)`.
    pub fn wrap(&mut self, a: Var) -> Var {
        self.unary(a, wrap_t, Op::Wrap(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h): (T, T) = (c(lo), c(hi));
        self.unary(
            a,
            move |x| {
                if x < l {
                    l
                } else if x > h {
                    h
                } else {
                    x
                }
            },
            Op::Clamp(a, lo, hi),
        )
    }

    /// Two-argument arctangent, wrapped to `[-π, π)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        let t = self.binary(y, x, "atan2", |y, x| {
            let a = y.atan2(x);
            if a >= c(PI) {
                c(-PI)
            } else {
                a
            }
        })?;
        Ok(self.push(t, Op::Atan2 { y, x }))
    }

    /// Matrix product `(n x k) · (k x m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::Contract(format!(
                "matmul: {}x{} times {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        let t = matmul(ta, tb, false, false);
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let rows = self.value(*first).rows();
        if let Some(p) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(Error::Contract(format!("concat: {} rows vs {rows}", self.value(*p).rows())));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let t = Tensor::new(rows, cols, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if start > end || end > ta.cols() {
            return Err(Error::Contract(format!("column slice {start}..{end} of a tensor with {} columns", ta.cols())));
        }
        let mut data = Vec::with_capacity(ta.rows() * (end - start));
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(r)[start..end]);
        }
        let t = Tensor::new(ta.rows(), end - start, data)?;
        Ok(self.push(t, Op::SliceCols(a, start)))
    }

    /// Row sums: `(r x c) -> (r x 1)`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|r| sum(ta.row_slice(r))).collect();
        let t = Tensor::column(data);
        self.push(t, Op::SumCols(a))
    }

    /// Mean of every element, as a `1 x 1` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = sum(ta.data()) / c(ta.len() as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(a))
    }

    fn check_stack(&self, inputs: &[Var], what: &str) -> Result<(usize, usize)> {
        let Some(first) = inputs.first() else {
            return Err(Error::Contract(format!("{what} of an empty stack")));
        };
        let shape = self.value(*first).shape();
        if let Some(v) = inputs.iter().find(|v| self.value(**v).shape() != shape) {
            let s = self.value(*v).shape();
            return Err(Error::Contract(format!("{what}: mixed shapes {}x{} and {}x{}", shape.0, shape.1, s.0, s.1)));
        }
        Ok(shape)
    }

    /// Softmax across a stack of same-shape tensors, independently per element.
    pub fn softmax(&mut self, inputs: &[Var]) -> Result<Vec<Var>> {
        let (rows, cols) = self.check_stack(inputs, "softmax")?;
        let n = rows * cols;
        let mut outs = vec![Vec::with_capacity(n); inputs.len()];
        for e in 0..n {
            let m = inputs.iter().map(|v| self.value(*v).data()[e]).fold(c::<T>(f64::NEG_INFINITY), |m, x| {
                if x > m {
                    x
                } else {
                    m
                }
            });
            let exps: Vec<T> = inputs.iter().map(|v| (self.value(*v).data()[e] - m).exp()).collect();
            let z = sum(&exps);
            for (o, x) in outs.iter_mut().zip(exps) {
                o.push(x / z);
            }
        }
        let mut vars = Vec::with_capacity(inputs.len());
        for (index, data) in outs.into_iter().enumerate() {
            let t = Tensor::new(rows, cols, data)?;
            vars.push(self.push(t, Op::SoftmaxStack { inputs: inputs.to_vec(), index }));
        }
        Ok(vars)
    }

    /// Elementwise minimum across a stack; ties go to the first input.
    pub fn min(&mut self, inputs: &[Var]) -> Result<Var> {
        let (rows, cols) = self.check_stack(inputs, "min")?;
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        let mut argmin = Vec::with_capacity(n);
        for e in 0..n {
            let mut best = self.value(inputs[0]).data()[e];
            let mut at = 0u32;
            for (j, v) in inputs.iter().enumerate().skip(1) {
                let x = self.value(*v).data()[e];
                if x < best {
                    best = x;
                    at = j as u32;
                }
            }
            data.push(best);
            argmin.push(at);
        }
        let t = Tensor::new(rows, cols, data)?;
        Ok(self.push(t, Op::MinStack { inputs: inputs.to_vec(), argmin }))
    }

    /// Elementwise mean across a stack.
    pub fn mean_stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let (rows, cols) = self.check_stack(inputs, "mean_stack")?;
        let k: T = c(1.0 / inputs.len() as f64);
        let mut data = vec![c::<T>(0.0); rows * cols];
        for v in inputs {
            for (d, &x) in data.iter_mut().zip(self.value(*v).data()) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d = *d * k);
        let t = Tensor::new(rows, cols, data)?;
        Ok(self.push(t, Op::MeanStack(inputs.to_vec())))
    }

    /// Row-paired L1 distance between two complex vectors given as cosine and
    /// sine parts: output row `k` is `Σ_c |a.0[r,c] − b.0[k,c]| + |a.1[r,c] − b.1[k,c]|`
    /// with `r = rows[k]`. Same subgradient as `abs`.
    pub fn l1_rows(&mut self, a: (Var, Var), rows: &[usize], b: (Var, Var)) -> Result<Var> {
        let (a0, a1, b0, b1) = (self.value(a.0), self.value(a.1), self.value(b.0), self.value(b.1));
        if a0.shape() != a1.shape() || b0.shape() != b1.shape() || a0.cols() != b0.cols() || b0.rows() != rows.len() {
            return Err(Error::Contract(format!(
                "l1_rows: parts {:?}/{:?} and {:?}/{:?} with {} row indices",
                a0.shape(),
                a1.shape(),
                b0.shape(),
                b1.shape(),
                rows.len()
            )));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= a0.rows()) {
            return Err(Error::Contract(format!("l1_rows: row {r} out of range for {} rows", a0.rows())));
        }
        let data = rows
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                let (x0, x1, y0, y1) = (a0.row_slice(r), a1.row_slice(r), b0.row_slice(k), b1.row_slice(k));
                (0..x0.len()).fold(c::<T>(0.0), |acc, j| acc + (Real::abs(x0[j] - y0[j]) + Real::abs(x1[j] - y1[j])))
            })
            .collect();
        let t = Tensor::new(rows.len(), 1, data)?;
        Ok(self.push(t, Op::L1Rows { a, rows: rows.to_vec(), b }))
    }
}

impl Graph {
    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Contract(format!("backward needs a scalar output, got {}x{}", out.rows(), out.cols())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        grads[output.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match params.get_mut(id) {
                    Some(t) => t.add_assign(&g),
                    None => {
                        params.insert(*id, g.clone());
                    }
                },
                Op::GatherParam { id, rows, table } => {
                    let dense = params.entry(*id).or_insert_with(|| Tensor::zeros(table.0, table.1));
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, x) in dense.row_slice_mut(r).iter_mut().zip(g.row_slice(k)) {
                            *d += x;
                        }
                    }
                }
                Op::GatherRows(a, rows) => {
                    let src = self.value(*a).shape();
                    let mut t = Tensor::zeros(src.0, src.1);
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, x) in t.row_slice_mut(r).iter_mut().zip(g.row_slice(k)) {
                            *d += x;
                        }
                    }
                    acc(&mut grads, *a, t);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(&g, self.value(*a).shape()));
                    acc(&mut grads, *b, reduce_to(&g, self.value(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(&g, self.value(*a).shape()));
                    acc(&mut grads, *b, reduce_to(&g.map(|x| -x), self.value(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    let cols = g.cols();
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] *= bidx(tb, r, c);
                            gb.data_mut()[r * cols + c] *= bidx(ta, r, c);
                        }
                    }
                    acc(&mut grads, *a, reduce_to(&ga, ta.shape()));
                    acc(&mut grads, *b, reduce_to(&gb, tb.shape()));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|x| k * x)),
                Op::Offset(a) | Op::Wrap(a) => acc(&mut grads, *a, g.clone()),
                Op::Sin(a) => acc(&mut grads, *a, zip_map(&g, self.value(*a), |g, x| g * x.cos())),
                Op::Cos(a) => acc(&mut grads, *a, zip_map(&g, self.value(*a), |g, x| -g * x.sin())),
                Op::Exp(a) => acc(&mut grads, *a, zip_map(&g, y, |g, y| g * y)),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip_map(&g, y, |g, s| g * s * (1.0 - s))),
                Op::LogSigmoid(a) => acc(&mut grads, *a, zip_map(&g, self.value(*a), |g, x| g * sigmoid(-x))),
                Op::Tanh(a) => acc(&mut grads, *a, zip_map(&g, y, |g, t| g * (1.0 - t * t))),
                Op::Relu(a) => acc(&mut grads, *a, zip_map(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::Abs(a) => acc(
                    &mut grads,
                    *a,
                    zip_map(&g, self.value(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Clamp(a, lo, hi) => {
                    acc(&mut grads, *a, zip_map(&g, self.value(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }))
                }
                Op::Atan2 { y: vy, x: vx } => {
                    let (ty, tx) = (self.value(*vy), self.value(*vx));
                    let mut gy = g.clone();
                    let mut gx = g.clone();
                    let cols = g.cols();
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            let (yy, xx) = (bidx(ty, r, c), bidx(tx, r, c));
                            let n = xx * xx + yy * yy;
                            gy.data_mut()[r * cols + c] *= xx / n;
                            gx.data_mut()[r * cols + c] *= -yy / n;
                        }
                    }
                    acc(&mut grads, *vy, reduce_to(&gy, ty.shape()));
                    acc(&mut grads, *vx, reduce_to(&gx, tx.shape()));
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul(&g, tb, false, true));
                    acc(&mut grads, *b, matmul(ta, &g, true, false));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.value(*p).shape();
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        acc(&mut grads, *p, Tensor::new(rows, cols, data)?);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut t = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        t.row_slice_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row_slice(r));
                    }
                    acc(&mut grads, *a, t);
                }
                Op::SumCols(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut t = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.get(r, 0);
                        t.row_slice_mut(r).iter_mut().for_each(|x| *x = gr);
                    }
                    acc(&mut grads, *a, t);
                }
                Op::MeanAll(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let k = g.item() / (rows * cols) as f64;
                    acc(&mut grads, *a, Tensor::filled(rows, cols, k));
                }
                Op::SoftmaxStack { inputs, index } => {
                    // d s_j / d z_m = s_j (δ_jm - s_m); recompute the sibling outputs
                    let (rows, cols) = y.shape();
                    let n = rows * cols;
                    let mut per_input = vec![vec![0.0; n]; inputs.len()];
                    #[allow(clippy::needless_range_loop)]
                    for e in 0..n {
                        let m = inputs.iter().map(|v| self.value(*v).data()[e]).fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = inputs.iter().map(|v| (self.value(*v).data()[e] - m).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        let sj = y.data()[e];
                        let ge = g.data()[e];
                        for (mi, ex) in exps.iter().enumerate() {
                            let sm = ex / z;
                            let delta = if mi == *index { 1.0 } else { 0.0 };
                            per_input[mi][e] = ge * sj * (delta - sm);
                        }
                    }
                    for (v, data) in inputs.iter().zip(per_input) {
                        acc(&mut grads, *v, Tensor::new(rows, cols, data)?);
                    }
                }
                Op::MinStack { inputs, argmin } => {
                    let (rows, cols) = y.shape();
                    let mut per_input: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
                    for (e, &j) in argmin.iter().enumerate() {
                        let slot = per_input[j as usize].get_or_insert_with(|| vec![0.0; rows * cols]);
                        slot[e] = g.data()[e];
                    }
                    for (v, data) in inputs.iter().zip(per_input) {
                        if let Some(data) = data {
                            acc(&mut grads, *v, Tensor::new(rows, cols, data)?);
                        }
                    }
                }
                Op::MeanStack(inputs) => {
                    let k = 1.0 / inputs.len() as f64;
                    for v in inputs {
                        acc(&mut grads, *v, g.map(|x| k * x));
                    }
                }
                Op::L1Rows { a, rows, b } => {
                    let sign = |x: f64| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    };
                    for (pa, pb) in [(a.0, b.0), (a.1, b.1)] {
                        let (ta, tb) = (self.value(pa), self.value(pb));
                        let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                        let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                        for (k, &r) in rows.iter().enumerate() {
                            let gk = g.get(k, 0);
                            let (xa, xb) = (ta.row_slice(r), tb.row_slice(k));
                            let out_b = gb.row_slice_mut(k);
                            for c in 0..xa.len() {
                                out_b[c] = -gk * sign(xa[c] - xb[c]);
                            }
                            for (d, x) in ga.row_slice_mut(r).iter_mut().zip(gb.row_slice(k)) {
                                *d -= x;
                            }
                        }
                        acc(&mut grads, pa, ga);
                        acc(&mut grads, pb, gb);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { nodes: grads, params })
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Tensor::new(g.rows(), g.cols(), data).expect("same shape")
}

/// `op(a) · op(b)` where `op` optionally transposes.
fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (n, k) = if ta { (a.cols(), a.rows()) } else { a.shape() };
    let m = if tb { b.rows() } else { b.cols() };
    let at = |i: usize, p: usize| if ta { a.get(p, i) } else { a.get(i, p) };
    let mut out = vec![c::<T>(0.0); n * m];
    if !tb {
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = at(i, p);
                if x.to_f64() == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(b.row_slice(p)) {
                    *o += x * *w;
                }
            }
        }
    } else {
        for i in 0..n {
            for j in 0..m {
                let brow = b.row_slice(j);
                let mut s = c::<T>(0.0);
                for (p, w) in brow.iter().enumerate().take(k) {
                    s += at(i, p) * *w;
                }
                out[i * m + j] = s;
            }
        }
    }
    Tensor::new(n, m, out).expect("matmul shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 0.25);
    }

    #[test]
    fn min_routes_to_single_index() {
        let mut g = Graph::new();
        let xs: Vec<Var> = [3.0, 1.0, 2.0].iter().map(|&v| g.scalar(v)).collect();
        let m = g.min(&xs).unwrap();
        assert_eq!(g.value(m).item(), 1.0);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(xs[0]), None);
        assert_eq!(grads.wrt(xs[1]).unwrap().item(), 1.0);
        assert_eq!(grads.wrt(xs[2]), None);
    }

    #[test]
    fn min_tie_goes_to_first() {
        let mut g = Graph::new();
        let a = g.scalar(2.0);
        let b = g.scalar(2.0);
        let m = g.min(&[a, b]).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(a).unwrap().item(), 1.0);
        assert_eq!(grads.wrt(b), None);
    }

    #[test]
    fn softmax_of_equal_inputs_is_uniform() {
        let mut g = Graph::new();
        let a = g.scalar(0.0);
        let b = g.scalar(0.0);
        let s = g.softmax(&[a, b]).unwrap();
        assert_eq!(g.value(s[0]).item(), 0.5);
        assert_eq!(g.value(s[1]).item(), 0.5);
    }

    #[test]
    fn softmax_gradient_matches_finite_difference() {
        let f = |z0: f64| {
            let e0 = z0.exp();
            let e1 = (-0.4f64).exp();
            let e2 = 1.1f64.exp();
            e0 / (e0 + e1 + e2) * 2.0 + e2 / (e0 + e1 + e2) * 0.5
        };
        let mut g = Graph::new();
        let z: Vec<Var> = [0.3, -0.4, 1.1].iter().map(|&v| g.scalar(v)).collect();
        let s = g.softmax(&z).unwrap();
        let a = g.scale(s[0], 2.0);
        let b = g.scale(s[2], 0.5);
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_abs_diff_eq!(grads.wrt(z[0]).unwrap().item(), fd(f, 0.3), epsilon = 1e-8);
    }

    #[test]
    fn shared_subexpression_gradients_sum() {
        // y = x*x + sin(x) with x used three times
        let f = |x: f64| x * x + x.sin();
        let mut g = Graph::new();
        let x = g.scalar(0.7);
        let sq = g.mul(x, x).unwrap();
        let s = g.sin(x);
        let y = g.add(sq, s).unwrap();
        let grads = g.backward(y).unwrap();
        assert_abs_diff_eq!(grads.wrt(x).unwrap().item(), fd(f, 0.7), epsilon = 1e-8);
    }

    #[test]
    fn l1_rows_matches_composed_ops() {
        let a0 = Tensor::new(2, 3, vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.7]).unwrap();
        let a1 = Tensor::new(2, 3, vec![0.5, 0.6, -0.2, -0.1, 0.8, 0.4]).unwrap();
        let b0 = Tensor::new(3, 3, vec![0.0, 0.3, -0.5, 0.7, 0.1, 0.2, -0.6, -0.3, 0.9]).unwrap();
        let b1 = Tensor::new(3, 3, vec![0.2, -0.8, 0.4, 0.6, -0.5, 0.1, 0.3, 0.7, -0.9]).unwrap();
        let rows = [1, 0, 1];
        let weights = Tensor::new(3, 1, vec![1.0, -2.0, 0.5]).unwrap();

        let mut g = Graph::new();
        let vs: Vec<Var> = [&a0, &a1, &b0, &b1].iter().map(|t| g.constant((*t).clone())).collect();
        let fused = g.l1_rows((vs[0], vs[1]), &rows, (vs[2], vs[3])).unwrap();
        let w = g.constant(weights.clone());
        let y = g.mul(fused, w).unwrap();
        let y = g.mean(y);
        let gf = g.backward(y).unwrap();

        let mut h = Graph::new();
        let ws: Vec<Var> = [&a0, &a1, &b0, &b1].iter().map(|t| h.constant((*t).clone())).collect();
        let r0 = h.gather_rows(ws[0], &rows).unwrap();
        let r1 = h.gather_rows(ws[1], &rows).unwrap();
        let d0 = h.sub(r0, ws[2]).unwrap();
        let d1 = h.sub(r1, ws[3]).unwrap();
        let d0 = h.abs(d0);
        let d1 = h.abs(d1);
        let s = h.add(d0, d1).unwrap();
        let composed = h.sum_cols(s);
        let w = h.constant(weights);
        let z = h.mul(composed, w).unwrap();
        let z = h.mean(z);
        let gc = h.backward(z).unwrap();

        assert_eq!(g.value(fused), h.value(composed));
        for (u, v) in vs.iter().zip(&ws) {
            assert_eq!(gf.wrt(*u).unwrap(), gc.wrt(*v).unwrap());
        }
        assert!(g.l1_rows((vs[0], vs[1]), &[2], (vs[2], vs[3])).is_err());
        assert!(g.l1_rows((vs[0], vs[1]), &[0, 1], (vs[2], vs[3])).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.constant(Tensor::row(vec![10.0, 20.0, 30.0]));
        let s = g.add(m, b).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let y = g.mean(s);
        let grads = g.backward(y).unwrap();
        let gb = grads.wrt(b).unwrap();
        assert_eq!(gb.shape(), (1, 3));
        for &x in gb.data() {
            assert_abs_diff_eq!(x, 2.0 / 6.0);
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_violation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(3, 2));
        assert!(matches!(g.add(a, b), Err(Error::Contract(_))));
        assert!(matches!(g.matmul(a, a), Err(Error::Contract(_))));
        assert!(matches!(g.min(&[a, b]), Err(Error::Contract(_))));
        let s = g.sum_cols(a);
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_gradients() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(2, 1, vec![5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
        let y = g.mean(c);
        let grads = g.backward(y).unwrap();
        // d mean / dA = 0.5 * b^T per row; d mean / db = 0.5 * column sums of A
        assert_eq!(grads.wrt(a).unwrap().data(), &[2.5, 3.0, 2.5, 3.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn atan2_wraps_pi() {
        let mut g = Graph::new();
        let y = g.scalar(0.0);
        let x = g.scalar(-1.0);
        let a = g.atan2(y, x).unwrap();
        assert_eq!(g.value(a).item(), -PI);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert_abs_diff_eq!(log_sigmoid(0.0), -(2f64).ln());
        assert!(log_sigmoid(-800.0).is_finite());
        assert_abs_diff_eq!(log_sigmoid(800.0), 0.0);
    }
}
