//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context to apply its vector-Jacobian product. Nodes are only ever
//! appended, so the node order is a topological order and [`Tape::backward`]
//! is a single reverse sweep.
//!
//! Broadcasting is limited to [`Tape::add_bcast`] (suffix-shaped operand, the
//! bias/positional-embedding pattern) and the shared right operand of
//! [`Tape::matmul`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Minimum norm used by [`Tape::l2_normalize`] before dividing.
pub const NORM_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        shared_rhs: bool,
    },
    TransposeLast2(Var),
    Add(Var, Var),
    AddBcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    RepeatBatch(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    L2Normalize {
        x: Var,
        alpha: f64,
        norms: Vec<f64>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Renormalize {
        x: Var,
        mask: Vec<f64>,
        sums: Vec<f64>,
    },
    Exp(Var),
    Ln(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    /// Leaf flag set by the caller.
    requires_grad: bool,
    /// True when some gradient-requiring leaf is upstream of this node.
    tracked: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    floored_norms: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of rows whose norm was floored by [`Tape::l2_normalize`].
    pub fn floored_norm_count(&self) -> usize {
        self.floored_norms
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across the leading
    /// axes of `a`) or `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2;
        let batch_a = &sa[..sa.len() - 2];
        if k != kb || (!shared_rhs && batch_a != &sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = batch_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_rhs {
                gemm(av, bv, &mut out, batch * m, k, n);
            } else {
                for t in 0..batch {
                    gemm(
                        &av[t * m * k..(t + 1) * m * k],
                        &bv[t * k * n..(t + 1) * k * n],
                        &mut out[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, shared_rhs }, &[a, b]))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let value = transpose_last2(self.value(x));
        Ok(self.push(value, Op::TransposeLast2(x), &[x]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix
    /// of `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_bcast", sa, sb));
        }
        let bv = self.value(b).data();
        let block = bv.len();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(block) {
            for (x, y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddBcast(a, b), &[a, b]))
    }

    /// Elementwise product with a constant tensor of identical shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(x), c.shape()));
        }
        let data: Vec<f64> = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst(x, c.data().to_vec()), &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Ln(x), &[x])
    }

    /// Gaussian error linear unit, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    // ---- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", &shape, perm));
        }
        let value = permute(self.value(x), perm);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow axis {axis} [{start}, {}) out of range for shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Repeats a `[1, ..]` tensor `batch` times along axis 0.
    pub fn repeat_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&1) || batch == 0 {
            return Err(Error::shape("repeat_batch", &shape, &[batch]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(src);
        }
        let mut new_shape = shape;
        new_shape[0] = batch;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::RepeatBatch(x), &[x]))
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let value = softmax_axis(self.value(x), axis);
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = *src.shape().last().expect("rank >= 1");
        let mut out = src.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Rescales each last-axis vector to L2 norm `alpha`; norms below
    /// [`NORM_FLOOR`] are floored and counted.
    pub fn l2_normalize(&mut self, x: Var, alpha: f64) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("rank >= 1");
        let mut out = src.clone();
        let mut norms = Vec::with_capacity(src.numel() / d);
        let mut floored = 0;
        for row in out.data_mut().chunks_mut(d) {
            let raw = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm = if raw < NORM_FLOOR {
                floored += 1;
                NORM_FLOOR
            } else {
                raw
            };
            norms.push(norm);
            row.iter_mut().for_each(|v| *v *= alpha / norm);
        }
        self.floored_norms += floored;
        self.push(out, Op::L2Normalize { x, alpha, norms }, &[x])
    }

    // ---- reductions -----------------------------------------------------

    /// Selects `x[.., idx[r]]` for each last-axis row `r`, dropping the last axis.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("rank >= 1");
        let rows = self.value(x).numel() / c;
        if idx.len() != rows || idx.iter().any(|&i| i >= c) {
            return Err(Error::shape("pick", &shape, &[idx.len()]));
        }
        let src = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &i)| src[r * c + i]).collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(value, Op::MeanAll(x), &[x])
    }

    /// Mean over `axis`, which is removed from the shape (rank-1 inputs give `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, v)| *a += v);
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Per last-axis row, `y = m·x / Σ(m·x)` for a constant 0/1 `mask` of the
    /// same shape. Rows with zero masked mass become uniform over the mask
    /// (or all zero when the mask row is empty) and pass no gradient.
    pub fn renormalize(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        if self.shape(x) != mask.shape() {
            return Err(Error::shape("renormalize", self.shape(x), mask.shape()));
        }
        let n = *mask.shape().last().expect("rank >= 1");
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut sums = Vec::with_capacity(src.len() / n);
        for ((orow, xrow), mrow) in out.chunks_mut(n).zip(src.chunks(n)).zip(mask.data().chunks(n)) {
            let total: f64 = xrow.iter().zip(mrow).map(|(x, m)| x * m).sum();
            let count: f64 = mrow.iter().sum();
            sums.push(total);
            for j in 0..n {
                orow[j] = if total > 0.0 {
                    mrow[j] * xrow[j] / total
                } else if count > 0.0 {
                    mrow[j] / count
                } else {
                    0.0
                };
            }
        }
        let value = Tensor::new(mask.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Renormalize {
                x,
                mask: mask.data().to_vec(),
                sums,
            },
            &[x],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d(loss)/d(node) into every gradient-requiring node reachable
    /// from `loss`. Repeated calls add to previously accumulated gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            if self.nodes[i].tracked {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_rhs } => {
                let sa = self.shape(*a);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = *self.shape(*b).last().unwrap();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let batch = av.len() / (m * k);
                if self.nodes[a.0].tracked {
                    let da = acc_slot(grads, *a, av.len());
                    if *shared_rhs {
                        gemm_nt_acc(g, bv, da, batch * m, n, k);
                    } else {
                        for t in 0..batch {
                            gemm_nt_acc(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut da[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                if self.nodes[b.0].tracked {
                    let db = acc_slot(grads, *b, bv.len());
                    if *shared_rhs {
                        gemm_tn_acc(av, g, db, batch * m, k, n);
                    } else {
                        for t in 0..batch {
                            gemm_tn_acc(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut db[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::TransposeLast2(x) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).unwrap();
                self.accumulate(grads, *x, transpose_last2(&gt).data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if self.nodes[b.0].tracked {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].tracked {
                    let d: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, &d);
                }
                if self.nodes[b.0].tracked {
                    let d: Vec<f64> = g.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, &d);
                }
            }
            Op::AddBcast(a, b) => {
                self.accumulate(grads, *a, g);
                if self.nodes[b.0].tracked {
                    let block = self.value(*b).numel();
                    let db = acc_slot(grads, *b, block);
                    for chunk in g.chunks(block) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::MulConst(x, c) => {
                let d: Vec<f64> = g.iter().zip(c).map(|(g, c)| g * c).collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g),
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).unwrap();
                self.accumulate(grads, *x, permute(&gt, &inverse).data());
            }
            Op::Narrow { x, axis, start } => {
                if self.nodes[x.0].tracked {
                    let in_shape = self.shape(*x);
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let full = in_shape[*axis];
                    let dx = acc_slot(grads, *x, outer * full * inner);
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.nodes[p.0].tracked {
                        let dp = acc_slot(grads, p, outer * len);
                        for o in 0..outer {
                            let src = o * total + offset;
                            dp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(&g[src..src + len])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += len;
                }
            }
            Op::RepeatBatch(x) => {
                if self.nodes[x.0].tracked {
                    let block = self.value(*x).numel();
                    let dx = acc_slot(grads, *x, block);
                    for chunk in g.chunks(block) {
                        dx.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut d = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, &d);
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; out.len()];
                for ((drow, grow), orow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..n {
                        drow[j] = grow[j] - orow[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().unwrap();
                let gv = self.value(*gain).data();
                if self.nodes[x.0].tracked {
                    let mut dx = vec![0.0; out.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let gh: Vec<f64> = g[row.clone()].iter().zip(gv).map(|(g, w)| g * w).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = gh.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = is / d as f64 * (d as f64 * gh[j] - sum_gh - xhat[r * d + j] * sum_ghx);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
                if self.nodes[gain.0].tracked {
                    let dg = acc_slot(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.nodes[bias.0].tracked {
                    let db = acc_slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect();
                self.accumulate(grads, *x, &d);
            }
            Op::L2Normalize { x, alpha, norms } => {
                let xv = self.value(*x).data();
                let d_len = xv.len() / norms.len();
                let mut dx = vec![0.0; xv.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let row = r * d_len..(r + 1) * d_len;
                    let (xr, gr) = (&xv[row.clone()], &g[row.clone()]);
                    let floored = norm == NORM_FLOOR;
                    let ug: f64 = if floored {
                        0.0
                    } else {
                        xr.iter().zip(gr).map(|(x, g)| x * g).sum::<f64>() / norm
                    };
                    for j in 0..d_len {
                        let u = xr[j] / norm;
                        dx[r * d_len + j] = alpha / norm * (gr[j] - u * ug);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Pick { x, idx } => {
                if self.nodes[x.0].tracked {
                    let c = *self.shape(*x).last().unwrap();
                    let dx = acc_slot(grads, *x, idx.len() * c);
                    for (r, &i) in idx.iter().enumerate() {
                        dx[r * c + i] += g[r];
                    }
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, &vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, &vec![g[0] / n as f64; n]);
            }
            Op::MeanAxis { x, axis } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let len = in_shape[*axis];
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, &d);
            }
            Op::Renormalize { x, mask, sums } => {
                let n = mask.len() / sums.len();
                let mut d = vec![0.0; mask.len()];
                for (r, &total) in sums.iter().enumerate() {
                    if total <= 0.0 {
                        continue;
                    }
                    let row = r * n..(r + 1) * n;
                    let gy: f64 = g[row.clone()].iter().zip(&out[row.clone()]).map(|(g, y)| g * y).sum();
                    for j in row {
                        d[j] = mask[j] / total * (g[j] - gy);
                    }
                }
                self.accumulate(grads, *x, &d);
            }
            Op::Exp(x) => {
                let d: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g.iter().zip(xv).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *x, &d);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = acc_slot(grads, v, delta.len());
        slot.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
    }
}

fn acc_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// `out[m×n] = a[m×k] · b[k×n]`.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = t.numel() / (m * n);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out[b * m * n + j * m + i] = src[b * m * n + i * n + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(r - 2, r - 1);
    Tensor::new(new_shape, out).unwrap()
}

fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = t.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    // Stride in the input for each output axis.
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut index = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..out_shape.len()).rev() {
            index[ax] += 1;
            offset += walk[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= walk[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

/// Plain (untaped) softmax along `axis`.
pub fn softmax_axis(t: &Tensor, axis: usize) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn projector_matmul() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let v = tape.constant(t(&[2, 1], &[5.0, 7.0]));
        let out = tape.matmul(p, v).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 0.0]);
        assert_eq!(tape.shape(out), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        for (input, expected) in [
            ([0.0, 0.0], [0.5, 0.5]),
            ([1f64.ln(), 3f64.ln()], [0.25, 0.75]),
            ([1000.0, 1000.0], [0.5, 0.5]),
        ] {
            let x = tape.constant(t(&[2], &input));
            let y = tape.softmax(x, 0).unwrap();
            let got = tape.value(y).data();
            assert!((got[0] - expected[0]).abs() < 1e-15 && (got[1] - expected[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_inner_axis_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin() * 5.0));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| v[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_analytic_rows() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn sum_gives_unit_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn dot_product_grads_swap() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.param(t(&[3], &[-4.0, 5.0, 0.5]));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), tape.value(y).data());
        assert_eq!(tape.grad(y).unwrap().data(), tape.value(x).data());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
        // y[k, i, j] == x[i, j, k]
        assert_eq!(tape.value(y).data()[6 + 3 + 2], tape.value(x).data()[12 + 2 * 4 + 1]);
    }

    #[test]
    fn narrow_and_concat_invert() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 5, 3], |i| i as f64));
        let a = tape.narrow(x, 1, 0, 2).unwrap();
        let b = tape.narrow(x, 1, 2, 3).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
        assert!(tape.narrow(x, 1, 4, 2).is_err());
    }
}
