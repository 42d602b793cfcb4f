//! Tape-recorded reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! Parameters are referenced from a borrowed [`ParamStore`] rather than
//! copied, so building a graph over a large frozen backbone is cheap.
//! [`Graph::backward`] walks the tape in reverse and returns fresh
//! gradient buffers; it never mutates the tape, so calling it twice on the
//! same loss yields identical gradients.

use alloc::vec;
use alloc::vec::Vec;

use super::param::{ParamGrads, ParamId, ParamStore};
use super::tensor::softmax_in_place;
use super::{gemm, Real, Tensor};
use crate::error::{argument, contract, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<T> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Gather { x: Var, index: Vec<usize> },
    GroupMax { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Nll { logp: Var, labels: Vec<usize> },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: ParamGrads<T>,
    inputs: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id)
    }

    /// Gradient of a leaf created with [`Graph::input_with_grad`].
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(k, _)| *k == v).map(|(_, t)| t)
    }
}

pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    frozen_grads: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn is_matrix(s: &[usize]) -> bool {
    s.len() == 2
}

impl<'p, T: Real> Graph<'p, T> {
    /// Frozen parameters receive gradients too; see [`Graph::skip_frozen_grads`].
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            frozen_grads: true,
        }
    }

    /// Stop computing weight gradients for frozen parameters.
    ///
    /// Input gradients still flow through frozen layers. The optimizer
    /// ignores frozen gradients either way; this only saves work.
    pub fn skip_frozen_grads(mut self) -> Self {
        self.frozen_grads = false;
        self
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.tensor(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let needs = self.frozen_grads || !self.store.get(id).frozen;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: needs,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `op(a) · op(b)` for matrices; `ta`/`tb` read the operand transposed.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_matrix(sa) || !is_matrix(sb) {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, out.data_mut(), false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, node, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Adds a length-`d` bias to every row of an `n×d` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let d = sx.last().copied().unwrap_or(0);
        if !is_matrix(sx) || self.value(b).numel() != d {
            return Err(Error::shape("add_row_bias", sx, sb));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddRowBias(x, b), ng))
    }

    /// `x · w (+ b)` with `w` stored `in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu(x, slope), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    /// Per-row layer normalization followed by the affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if !is_matrix(self.shape(x)) || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let dt = T::of(d as f64);
        let mut out = Tensor::zeros(&[n, d]);
        let mut rstd = Vec::with_capacity(n);
        {
            let (xv, g, b) = (self.value(x), self.value(gain).data(), self.value(bias).data());
            let od = out.data_mut();
            for r in 0..n {
                let row = xv.row(r);
                let mean = row.iter().copied().sum::<T>() / dt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
                let rs = T::one() / (var + eps).sqrt();
                rstd.push(rs);
                for j in 0..d {
                    od[r * d + j] = (row[j] - mean) * rs * g[j] + b[j];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, rstd }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| argument!("concat of nothing"))?;
        let n = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if !is_matrix(self.shape(p)) || self.value(p).rows() != n {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(n, total, data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| argument!("concat of nothing"))?;
        let d = self.value(first).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            if !is_matrix(self.shape(p)) || self.value(p).cols() != d {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            n += self.value(p).rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(n, d, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if !is_matrix(self.shape(x)) || start + len > n {
            return Err(argument!("row slice {start}..{} of {n} rows", start + len));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(len, d, data)?, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if !is_matrix(self.shape(x)) || start + len > d {
            return Err(argument!("column slice {start}..{} of {d} columns", start + len));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(n, len, data)?, Op::SliceCols { x, start }, ng))
    }

    /// Output row `i` is input row `index[i]`; gradients scatter-add back.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(argument!("gather index {bad} out of range for {n} rows"));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in &index {
            data.extend_from_slice(xv.row(i));
        }
        let rows = index.len();
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(rows, d, data)?, Op::Gather { x, index }, ng))
    }

    /// Max over consecutive groups of `group` rows: `(g·group)×d → g×d`.
    ///
    /// Ties route the gradient to the first maximal row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if group == 0 || n % group != 0 {
            return Err(argument!("group size {group} does not divide {n} rows"));
        }
        let groups = n / group;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(groups * d);
        let mut argmax = Vec::with_capacity(groups * d);
        for gi in 0..groups {
            for j in 0..d {
                let mut best = gi * group;
                for r in gi * group + 1..(gi + 1) * group {
                    if xv[r * d + j] > xv[best * d + j] {
                        best = r;
                    }
                }
                out.push(xv[best * d + j]);
                argmax.push(best);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(groups, d, out)?, Op::GroupMax { x, argmax }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.rows_cols(logits);
        check_labels(labels, b, c)?;
        let lv = self.value(logits);
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            loss += lse - row[labels[r]];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= T::of(b as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over rows of `-logp[label]`, for rows that are already log-probabilities.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.rows_cols(logp);
        check_labels(labels, n, c)?;
        let lv = self.value(logp);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -lv.get(r, l))
            .sum::<T>()
            / T::of(n as f64);
        let ng = self.ng(logp);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logp,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(contract!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: ParamGrads::new(self.store.len()),
            inputs: Vec::new(),
        };
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    let t = Tensor::new(self.value(Var(i)).shape().to_vec(), g)?;
                    out.inputs.push((Var(i), t));
                }
                Op::Param(id) => {
                    let t = Tensor::new(self.store.tensor(*id).shape().to_vec(), g)?;
                    *out.params.slot(*id) = Some(t);
                }
                op => self.propagate(i, op, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn propagate(&self, node: usize, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match *op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if tb { sb[0] } else { sb[1] };
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.acc(grads, a) {
                    if ta {
                        gemm(k, n, m, bv, tb, g, true, da, true);
                    } else {
                        gemm(m, n, k, g, false, bv, !tb, da, true);
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    if tb {
                        gemm(n, m, k, g, true, av, ta, db, true);
                    } else {
                        gemm(k, m, n, av, !ta, g, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, a) {
                    d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(d) = self.acc(grads, b) {
                    d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(d) = self.acc(grads, a) {
                    for ((x, &gy), &o) in d.iter_mut().zip(g).zip(bv) {
                        *x += gy * o;
                    }
                }
                if let Some(d) = self.acc(grads, b) {
                    for ((x, &gy), &o) in d.iter_mut().zip(g).zip(av) {
                        *x += gy * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.acc(grads, a) {
                    d.iter_mut().zip(g).for_each(|(x, &y)| *x += s * y);
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(d) = self.acc(grads, x) {
                    d.iter_mut().zip(g).for_each(|(v, &y)| *v += y);
                }
                let w = self.value(b).numel();
                if let Some(d) = self.acc(grads, b) {
                    for row in g.chunks(w) {
                        d.iter_mut().zip(row).for_each(|(v, &y)| *v += y);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(x).data();
                if let Some(d) = self.acc(grads, x) {
                    for ((v, &gy), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *v += gy;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(x).data();
                if let Some(d) = self.acc(grads, x) {
                    for ((v, &gy), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *v += if xi > T::zero() { gy } else { gy * slope };
                    }
                }
            }
            Op::Gelu(x) => {
                let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three = T::of(3.0);
                let xv = self.value(x).data();
                if let Some(d) = self.acc(grads, x) {
                    for ((v, &gy), &xi) in d.iter_mut().zip(g).zip(xv) {
                        let th = (c * (xi + a * xi * xi * xi)).tanh();
                        let dy = half * (T::one() + th)
                            + half * xi * (T::one() - th * th) * c * (T::one() + three * a * xi * xi);
                        *v += gy * dy;
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = self.value(x).cols();
                let y = self.value(Var(node)).data();
                if let Some(d) = self.acc(grads, x) {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = self.value(x).cols();
                let y = self.value(Var(node)).data();
                if let Some(d) = self.acc(grads, x) {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let gsum: T = gr.iter().copied().sum();
                        for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += gv - yv.exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, ref rstd } => {
                let (n, dcols) = self.rows_cols(x);
                let xv = self.value(x).data();
                let gv = self.value(gain).data();
                let dt = T::of(dcols as f64);
                // Recompute x̂ from x and the saved reciprocal std.
                let mut xhat = vec![T::zero(); n * dcols];
                for r in 0..n {
                    let row = &xv[r * dcols..(r + 1) * dcols];
                    let mean = row.iter().copied().sum::<T>() / dt;
                    for j in 0..dcols {
                        xhat[r * dcols + j] = (row[j] - mean) * rstd[r];
                    }
                }
                if let Some(dg) = self.acc(grads, gain) {
                    for (gr, hr) in g.chunks(dcols).zip(xhat.chunks(dcols)) {
                        for j in 0..dcols {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, bias) {
                    for gr in g.chunks(dcols) {
                        db.iter_mut().zip(gr).for_each(|(v, &y)| *v += y);
                    }
                }
                if let Some(dx) = self.acc(grads, x) {
                    let mut dxhat = vec![T::zero(); dcols];
                    for r in 0..n {
                        let gr = &g[r * dcols..(r + 1) * dcols];
                        let hr = &xhat[r * dcols..(r + 1) * dcols];
                        for j in 0..dcols {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / dt;
                        let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dt;
                        for j in 0..dcols {
                            dx[r * dcols + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::ConcatCols(ref parts) => {
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(d) = self.acc(grads, p) {
                        for (r, dr) in d.chunks_mut(w).enumerate() {
                            let src = &g[r * total + off..r * total + off + w];
                            dr.iter_mut().zip(src).for_each(|(v, &y)| *v += y);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(d) = self.acc(grads, p) {
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(v, &y)| *v += y);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = self.value(x).cols();
                if let Some(dx) = self.acc(grads, x) {
                    dx[start * d..start * d + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(v, &y)| *v += y);
                }
            }
            Op::SliceCols { x, start } => {
                let d = self.value(x).cols();
                let n = self.value(x).rows();
                let w = g.len() / n.max(1);
                if let Some(dx) = self.acc(grads, x) {
                    for r in 0..n {
                        for j in 0..w {
                            dx[r * d + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::Gather { x, ref index } => {
                let d = self.value(x).cols();
                if let Some(dx) = self.acc(grads, x) {
                    for (o, &i) in index.iter().enumerate() {
                        for j in 0..d {
                            dx[i * d + j] += g[o * d + j];
                        }
                    }
                }
            }
            Op::GroupMax { x, ref argmax } => {
                let d = self.value(x).cols();
                if let Some(dx) = self.acc(grads, x) {
                    for (o, &r) in argmax.iter().enumerate() {
                        dx[r * d + o % d] += g[o];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::of(self.value(x).numel() as f64);
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::CrossEntropy {
                logits,
                ref labels,
                ref probs,
            } => {
                let c = self.value(logits).cols();
                let scale = g[0] / T::of(labels.len() as f64);
                if let Some(dx) = self.acc(grads, logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            dx[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Nll { logp, ref labels } => {
                let c = self.value(logp).cols();
                let scale = g[0] / T::of(labels.len() as f64);
                if let Some(dx) = self.acc(grads, logp) {
                    for (r, &l) in labels.iter().enumerate() {
                        dx[r * c + l] -= scale;
                    }
                }
            }
        }
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", &[rows], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(argument!("label {bad} out of range for {classes} classes"));
    }
    Ok(())
}
