//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are appended to the tape as they execute; [`Tape::backward`]
//! walks the tape in exact reverse order and accumulates gradients
//! additively. Nodes that do not depend on any gradient-requiring leaf are
//! skipped entirely, so frozen parameters cost nothing in the backward pass.
//!
//! Broadcasting is deliberately narrow: the right operand of `add`/`mul` may
//! have a shape equal to a suffix of the left operand's shape, and the right
//! operand of `matmul` may be a rank-2 matrix shared across the batch.

use std::borrow::Cow;

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Leaves may borrow their tensors (`'a`), which lets a model bind its
/// parameters without copying them.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass: one optional gradient buffer per node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Borrowed leaf, typically a model parameter.
    pub fn param(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.rg(a) || self.rg(b)
    }

    /// Element-wise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let inner = suffix_broadcast("add", av.shape(), bv.shape())?;
        let bd = bv.data();
        let data: Vec<T> = av
            .data()
            .chunks_exact(inner.max(1))
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg2(a, b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Element-wise difference of equally shaped tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("sub", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg2(a, b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Element-wise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let inner = suffix_broadcast("mul", av.shape(), bv.shape())?;
        let bd = bv.data();
        let data: Vec<T> = av
            .data()
            .chunks_exact(inner.max(1))
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x * y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg2(a, b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`.
    ///
    /// `b` either has the same leading axes as `a` or is a plain `[k, n]`
    /// matrix applied to every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let dims = matmul_dims(av.shape(), bv.shape())?;
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        for bi in 0..dims.batch {
            let a_blk = &av.data()[bi * dims.m * dims.k..(bi + 1) * dims.m * dims.k];
            let b_off = if dims.shared_rhs { 0 } else { bi * dims.k * dims.n };
            let b_blk = &bv.data()[b_off..b_off + dims.k * dims.n];
            let o_blk = &mut out[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n];
            gemm_nn(a_blk, b_blk, o_blk, dims.m, dims.k, dims.n);
        }
        let mut shape = av.shape()[..av.rank() - 1].to_vec();
        shape.push(dims.n);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg2(a, b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() < 2 {
            return Err(Error::contract(format!(
                "transpose needs rank >= 2, got shape {:?}",
                av.shape()
            )));
        }
        let r = av.rank();
        let (m, n) = (av.shape()[r - 2], av.shape()[r - 1]);
        let batch = av.numel() / (m * n);
        let mut data = vec![T::zero(); av.numel()];
        transpose_blocks(av.data(), &mut data, batch, m, n);
        let mut shape = av.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut seen = vec![false; av.rank()];
        if axes.len() != av.rank() || axes.iter().any(|&x| x >= av.rank() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::contract(format!(
                "invalid permutation {axes:?} for shape {:?}",
                av.shape()
            )));
        }
        let (shape, data) = permute_data(av.shape(), av.data(), axes);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    ///
    /// `-inf` entries (masked positions) get probability exactly zero.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        reject_nan("softmax", av)?;
        let w = *av.shape().last().unwrap();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(w) {
            softmax_row(row);
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(
                "softmax row with every entry masked".to_string(),
            ));
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        reject_nan("log_softmax", av)?;
        let w = *av.shape().last().unwrap();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(w) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        if d < 2 {
            return Err(Error::contract(format!(
                "layer_norm needs a last axis of size >= 2, got {:?}",
                xv.shape()
            )));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / d;
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Select rows of `table` (viewed as `[n, rest..]`) by index.
    ///
    /// Serves embedding lookup; the gradient scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let n = tv.shape()[0];
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Vocab { id: bad, size: n });
        }
        let mut data = Vec::with_capacity(ids.len() * tv.numel() / n);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&tv.shape()[1..]);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `x W + b` for `x: [.., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            // Interior nodes do not keep their gradient; leaves do.
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, out.numel(), |ga| add_into(ga, g));
                }
                if self.rg(*b) {
                    let inner = self.value(*b).numel();
                    accumulate(grads, *b, inner, |gb| {
                        for row in g.chunks_exact(inner.max(1)) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.len(), |ga| add_into(ga, g));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.len(), |gb| {
                        for (x, &gi) in gb.iter_mut().zip(g) {
                            *x -= gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let inner = bv.len();
                if self.rg(*a) {
                    accumulate(grads, *a, g.len(), |ga| {
                        for (ga_row, g_row) in ga.chunks_exact_mut(inner.max(1)).zip(g.chunks_exact(inner.max(1))) {
                            for ((x, &gi), &b) in ga_row.iter_mut().zip(g_row).zip(bv) {
                                *x += gi * b;
                            }
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(grads, *b, inner, |gb| {
                        for (g_row, a_row) in g.chunks_exact(inner.max(1)).zip(av.chunks_exact(inner.max(1))) {
                            for ((x, &gi), &a) in gb.iter_mut().zip(g_row).zip(a_row) {
                                *x += gi * a;
                            }
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.len(), |ga| {
                        for (x, &gi) in ga.iter_mut().zip(g) {
                            *x += gi * *c;
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let dims = matmul_dims(av.shape(), bv.shape())?;
                let (m, k, n) = (dims.m, dims.k, dims.n);
                if self.rg(*a) {
                    accumulate(grads, *a, av.numel(), |ga| {
                        for bi in 0..dims.batch {
                            let b_off = if dims.shared_rhs { 0 } else { bi * k * n };
                            let b_blk = &bv.data()[b_off..b_off + k * n];
                            let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                            let ga_blk = &mut ga[bi * m * k..(bi + 1) * m * k];
                            gemm_nt(g_blk, b_blk, ga_blk, m, n, k);
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(grads, *b, bv.numel(), |gb| {
                        for bi in 0..dims.batch {
                            let a_blk = &av.data()[bi * m * k..(bi + 1) * m * k];
                            let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                            let b_off = if dims.shared_rhs { 0 } else { bi * k * n };
                            let gb_blk = &mut gb[b_off..b_off + k * n];
                            gemm_tn(a_blk, g_blk, gb_blk, m, k, n);
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let r = out.rank();
                    let (m, n) = (out.shape()[r - 2], out.shape()[r - 1]);
                    let batch = out.numel() / (m * n);
                    let mut t = vec![T::zero(); g.len()];
                    transpose_blocks(g, &mut t, batch, m, n);
                    accumulate(grads, *a, g.len(), |ga| add_into(ga, &t));
                }
            }
            Op::Permute(a, axes) => {
                if self.rg(*a) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let (_, t) = permute_data(out.shape(), g, &inv);
                    accumulate(grads, *a, g.len(), |ga| add_into(ga, &t));
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.len(), |ga| add_into(ga, g));
                }
            }
            Op::Softmax(a) => {
                if self.rg(*a) {
                    let y = out.data();
                    let w = *out.shape().last().unwrap();
                    accumulate(grads, *a, g.len(), |ga| {
                        for ((ga_r, y_r), g_r) in ga.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                            let dot: T = y_r.iter().zip(g_r).map(|(&yi, &gi)| yi * gi).sum();
                            for j in 0..w {
                                ga_r[j] += y_r[j] * (g_r[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                if self.rg(*a) {
                    let y = out.data();
                    let w = *out.shape().last().unwrap();
                    accumulate(grads, *a, g.len(), |ga| {
                        for ((ga_r, y_r), g_r) in ga.chunks_mut(w).zip(y.chunks(w)).zip(g.chunks(w)) {
                            let gs: T = g_r.iter().copied().sum();
                            for j in 0..w {
                                ga_r[j] += g_r[j] - y_r[j].exp() * gs;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *out.shape().last().unwrap();
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    accumulate(grads, *gain, d, |gg| {
                        for (g_r, h_r) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += g_r[j] * h_r[j];
                            }
                        }
                    });
                }
                if self.rg(*bias) {
                    accumulate(grads, *bias, d, |gb| {
                        for g_r in g.chunks(d) {
                            add_into(gb, g_r);
                        }
                    });
                }
                if self.rg(*x) {
                    let dn = T::lit(d as f64);
                    accumulate(grads, *x, g.len(), |gx| {
                        let mut dxhat = vec![T::zero(); d];
                        for (r, (gx_r, (g_r, h_r))) in gx
                            .chunks_mut(d)
                            .zip(g.chunks(d).zip(xhat.chunks(d)))
                            .enumerate()
                        {
                            for j in 0..d {
                                dxhat[j] = g_r[j] * gv[j];
                            }
                            let s1: T = dxhat.iter().copied().sum();
                            let s2: T = dxhat.iter().zip(h_r).map(|(&a, &b)| a * b).sum();
                            let k = inv_std[r] / dn;
                            for j in 0..d {
                                gx_r[j] += k * (dn * dxhat[j] - s1 - h_r[j] * s2);
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let xv = self.value(*a).data();
                    let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
                    let (half, three) = (T::lit(0.5), T::lit(3.0));
                    accumulate(grads, *a, g.len(), |ga| {
                        for ((d, &x), &gi) in ga.iter_mut().zip(xv).zip(g) {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                            *d += gi * (half * (T::one() + t) + half * x * dt);
                        }
                    });
                }
            }
            Op::GatherRows(table, ids) => {
                if self.rg(*table) {
                    let tv = self.value(*table);
                    let width = tv.numel() / tv.shape()[0];
                    accumulate(grads, *table, tv.numel(), |gt| {
                        for (r, &i) in ids.iter().enumerate() {
                            add_into(&mut gt[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let n = self.value(*a).numel();
                    accumulate(grads, *a, n, |ga| {
                        for x in ga.iter_mut() {
                            *x += g[0];
                        }
                    });
                }
            }
            Op::Mean(a) => {
                if self.rg(*a) {
                    let n = self.value(*a).numel();
                    let gi = g[0] / T::lit(n as f64);
                    accumulate(grads, *a, n, |ga| {
                        for x in ga.iter_mut() {
                            *x += gi;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn reject_nan<T: Real>(op: &str, t: &Tensor<T>) -> Result<()> {
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("{op} received NaN input")));
    }
    Ok(())
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Width of the broadcast operand when `rhs` is a suffix of `lhs`.
fn suffix_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(Error::shape(op, lhs, rhs));
    }
    Ok(rhs.iter().product())
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared_rhs = b.len() == 2;
    if !shared_rhs && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::shape("matmul", a, b));
    }
    Ok(MatDims {
        batch,
        m,
        k,
        n,
        shared_rhs,
    })
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: T = g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

fn transpose_blocks<T: Real>(src: &[T], dst: &mut [T], batch: usize, m: usize, n: usize) {
    for bi in 0..batch {
        let s = &src[bi * m * n..(bi + 1) * m * n];
        let d = &mut dst[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
}

fn permute_data<T: Real>(shape: &[usize], data: &[T], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        // Increment the output multi-index, tracking the source offset.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 1]);
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn grad_of_sum_matmul_is_ones_times_bt() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.5, -1.0]), true);
        let b = tape.constant(t(&[3, 2], &[0.3, -0.7, 1.1, 0.2, -0.4, 0.9]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        let ga = grads.get(a).unwrap();
        // ones[2,2] . B^T: each row equals the row sums of B.
        let row_sums = [0.3 - 0.7, 1.1 + 0.2, -0.4 + 0.9];
        for r in 0..2 {
            for c in 0..3 {
                assert!((ga[r * 3 + c] - row_sums[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_hand_values() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(z).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let s = tape.softmax(x).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (p, w) in tape.value(s).data().iter().zip(want) {
            assert!((p - w).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(z), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_masked_entries_are_zero() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[3], &[0.5, f64::NEG_INFINITY, 0.5]));
        let s = tape.softmax(z).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.0);
        assert!((tape.value(s).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 5.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-9);
        assert!((out[1] - 1.0).abs() < 1e-9);
        assert_eq!(&out[2..], &[0.0, 0.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(tape.shape(p), &[3, 2, 4]);
        // element (j=1, i=1, k=2) came from (1, 1, 2) -> 1*12 + 1*4 + 2
        assert_eq!(tape.value(p).data()[8 + 4 + 2], 18.0);
        let back = tape.permute(p, &[1, 0, 2]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), false);
        let b = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(a).is_err());
    }
}
