use rand::Rng;

use super::kernels::{self, gemm_nn, gemm_nt_acc, gemm_tn_acc};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Softmax { a: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Broadcast { a: Var },
    Sum { a: Var },
    Mean { a: Var },
}

#[derive(Debug)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// `(lhs batch, rhs batch)` for every output batch; empty when the rhs
    /// is a single shared matrix and the lhs batch folds into `m`.
    pairs: Vec<(usize, usize)>,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// An append-only tape of tensor operations.
///
/// Node ids increase in creation order, so the tape is already a topological
/// order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of every leaf registered with `requires_grad`.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; leaves the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn acc<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
    f(slot);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
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

    /// Matrix product over the last two axes; leading axes broadcast from 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::mismatch("matmul", &sa, &sb));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];

        if batch_b.is_empty() {
            // Shared rhs: fold every lhs batch into the row dimension.
            let rows = batch_a.iter().product::<usize>() * m;
            let mut out = vec![T::zero(); rows * n];
            gemm_nn(
                self.value(a).data(),
                self.value(b).data(),
                &mut out,
                rows,
                k,
                n,
                false,
            );
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let plan = MatMulPlan {
                m: rows,
                k,
                n,
                pairs: Vec::new(),
            };
            return Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, plan }, &[a, b]));
        }

        let rank = batch_a.len().max(batch_b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(batch_a), pad(batch_b));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::mismatch("matmul", &sa, &sb));
            }
            batch.push(x.max(y));
        }
        let strides = |s: &[usize]| -> Vec<usize> {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        let (st_a, st_b) = (strides(&pa), strides(&pb));
        let total: usize = batch.iter().product();
        let mut pairs = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let ia = idx.iter().zip(&st_a).map(|(i, s)| i * s).sum();
            let ib = idx.iter().zip(&st_b).map(|(i, s)| i * s).sum();
            pairs.push((ia, ib));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < batch[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut out = vec![T::zero(); total * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for (o, &(ia, ib)) in pairs.iter().enumerate() {
                gemm_nn(
                    &ad[ia * m * k..(ia + 1) * m * k],
                    &bd[ib * k * n..(ib + 1) * k * n],
                    &mut out[o * m * n..(o + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                );
            }
        }
        let mut shape = batch;
        shape.extend_from_slice(&[m, n]);
        let plan = MatMulPlan { m, k, n, pairs };
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, plan }, &[a, b]))
    }

    /// `a + b`, where the shape of `b` is a suffix of the shape of `a`
    /// (bias rows, positional tables).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::mismatch("add", sa, sb));
        }
        let bd = self.value(b).data();
        let nb = bd.len();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        let t = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::mismatch("sub", sa, sb));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::mismatch("mul", sa, sb));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = T::lit(factor);
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale { a, factor }, &[a])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut sum = 0.0f64;
            for &v in row {
                let e = (v - max).exp();
                sum += e.as_f64();
                out.push(e);
            }
            let inv = T::lit(1.0 / sum);
            for e in &mut out[start..] {
                *e = *e * inv;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { a }, &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::mismatch("layer_norm", &sx, self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xd = self.value(x).data();
        let rows = xd.len() / d;
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(d) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.as_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(T::lit(r));
            for (j, v) in row.iter().enumerate() {
                let h = T::lit((v.as_f64() - mean) * r);
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU with the exact Gaussian CDF, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self
            .value(a)
            .map(|x| T::lit(x.as_f64() * kernels::phi_cdf(x.as_f64())));
        self.push(t, Op::Gelu { a }, &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::mismatch("concat", &s0, s));
            }
            extent += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = s0;
        shape[axis] = extent;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {sa:?}", start + len),
            ));
        }
        let (outer, ext, inner) = split_at_axis(&sa, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Slice { a, axis, start }, &[a]))
    }

    /// Splits along `axis` into pieces of the given extents.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let sa = self.shape(a);
        let total: usize = sizes.iter().sum();
        if axis >= sa.len() || total != sa[axis] {
            return Err(Error::shape(
                "split",
                format!("extents {sizes:?} do not sum to axis {axis} of {sa:?}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn concat_lastdim(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let axis = self
            .shape(first)
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::shape("concat", "rank-0 input"))?;
        self.concat(inputs, axis)
    }

    pub fn split_lastdim(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let axis = self
            .shape(a)
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::shape("split", "rank-0 input"))?;
        self.split(a, axis, sizes)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {sa:?}")));
        }
        let data = kernels::permute_data(self.value(a).data(), &sa, axes);
        let t = Tensor::new(kernels::permuted_shape(&sa, axes), data)?;
        Ok(self.push(
            t,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank below 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    /// Tiles `a` along new leading axes `lead`.
    pub fn broadcast(&mut self, a: Var, lead: &[usize]) -> Result<Var> {
        let reps: usize = lead.iter().product();
        let src = self.value(a);
        let mut data = Vec::with_capacity(src.numel() * reps);
        for _ in 0..reps {
            data.extend_from_slice(src.data());
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(src.shape());
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Broadcast { a }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let n = T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s / n), Op::Mean { a }, &[a])
    }

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Inverted dropout: in training mode survivors are scaled by
    /// `1 / (1 - rate)`; otherwise the input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !training || rate <= 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.shape(x).to_vec(), rate, rng);
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b, plan } => {
                    let ad = nodes[a.0].value.data();
                    let bd = nodes[b.0].value.data();
                    let MatMulPlan { m, k, n, pairs } = plan;
                    let (m, k, n) = (*m, *k, *n);
                    if pairs.is_empty() {
                        acc(&mut grads, nodes, *a, |da| gemm_nt_acc(&g, bd, da, m, k, n));
                        acc(&mut grads, nodes, *b, |db| gemm_tn_acc(ad, &g, db, m, k, n));
                    } else {
                        acc(&mut grads, nodes, *a, |da| {
                            for (o, &(ia, ib)) in pairs.iter().enumerate() {
                                gemm_nt_acc(
                                    &g[o * m * n..(o + 1) * m * n],
                                    &bd[ib * k * n..(ib + 1) * k * n],
                                    &mut da[ia * m * k..(ia + 1) * m * k],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        });
                        acc(&mut grads, nodes, *b, |db| {
                            for (o, &(ia, ib)) in pairs.iter().enumerate() {
                                gemm_tn_acc(
                                    &ad[ia * m * k..(ia + 1) * m * k],
                                    &g[o * m * n..(o + 1) * m * n],
                                    &mut db[ib * k * n..(ib + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        });
                    }
                }
                Op::Add { a, b } => {
                    acc(&mut grads, nodes, *a, |da| {
                        da.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x)
                    });
                    acc(&mut grads, nodes, *b, |db| {
                        let nb = db.len();
                        for chunk in g.chunks_exact(nb) {
                            db.iter_mut().zip(chunk).for_each(|(d, &x)| *d = *d + x);
                        }
                    });
                }
                Op::Sub { a, b } => {
                    acc(&mut grads, nodes, *a, |da| {
                        da.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x)
                    });
                    acc(&mut grads, nodes, *b, |db| {
                        db.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d - x)
                    });
                }
                Op::Mul { a, b } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(&mut grads, nodes, *a, |da| {
                        for ((d, &x), &y) in da.iter_mut().zip(&g).zip(bv) {
                            *d = *d + x * y;
                        }
                    });
                    acc(&mut grads, nodes, *b, |db| {
                        for ((d, &x), &y) in db.iter_mut().zip(&g).zip(av) {
                            *d = *d + x * y;
                        }
                    });
                }
                Op::Scale { a, factor } => {
                    acc(&mut grads, nodes, *a, |da| {
                        da.iter_mut()
                            .zip(&g)
                            .for_each(|(d, &x)| *d = *d + x * *factor)
                    });
                }
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    acc(&mut grads, nodes, *a, |da| {
                        for ((dr, gr), yr) in da
                            .chunks_exact_mut(d)
                            .zip(g.chunks_exact(d))
                            .zip(y.chunks_exact(d))
                        {
                            let s: f64 = gr.iter().zip(yr).map(|(x, y)| (*x * *y).as_f64()).sum();
                            let s = T::lit(s);
                            for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                                *dv = *dv + yv * (gv - s);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gm = nodes[gamma.0].value.data();
                    let d = gm.len();
                    acc(&mut grads, nodes, *gamma, |dg| {
                        for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for ((dv, &gv), &hv) in dg.iter_mut().zip(gr).zip(hr) {
                                *dv = *dv + gv * hv;
                            }
                        }
                    });
                    acc(&mut grads, nodes, *beta, |db| {
                        for gr in g.chunks_exact(d) {
                            db.iter_mut().zip(gr).for_each(|(dv, &gv)| *dv = *dv + gv);
                        }
                    });
                    acc(&mut grads, nodes, *x, |dx| {
                        for (((dr, gr), hr), &r) in dx
                            .chunks_exact_mut(d)
                            .zip(g.chunks_exact(d))
                            .zip(xhat.chunks_exact(d))
                            .zip(rstd)
                        {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..d {
                                let dh = (gr[j] * gm[j]).as_f64();
                                mean_dh += dh;
                                mean_dh_h += dh * hr[j].as_f64();
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            let r = r.as_f64();
                            for j in 0..d {
                                let dh = (gr[j] * gm[j]).as_f64();
                                let v = r * (dh - mean_dh - hr[j].as_f64() * mean_dh_h);
                                dr[j] = dr[j] + T::lit(v);
                            }
                        }
                    });
                }
                Op::Gelu { a } => {
                    let xv = nodes[a.0].value.data();
                    acc(&mut grads, nodes, *a, |da| {
                        for ((dv, &gv), &x) in da.iter_mut().zip(&g).zip(xv) {
                            let x = x.as_f64();
                            let dydx = kernels::phi_cdf(x) + x * kernels::phi_pdf(x);
                            *dv = *dv + gv * T::lit(dydx);
                        }
                    });
                }
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let (outer, ext, inner) = split_at_axis(shape, *axis);
                    let mut offset = 0;
                    for &v in inputs {
                        let len = nodes[v.0].value.shape()[*axis];
                        acc(&mut grads, nodes, v, |dv| {
                            for o in 0..outer {
                                let src = o * ext * inner + offset * inner;
                                let dst = o * len * inner;
                                for (d, &x) in dv[dst..dst + len * inner]
                                    .iter_mut()
                                    .zip(&g[src..src + len * inner])
                                {
                                    *d = *d + x;
                                }
                            }
                        });
                        offset += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let src_shape = nodes[a.0].value.shape();
                    let (outer, ext, inner) = split_at_axis(src_shape, *axis);
                    let len = node.value.shape()[*axis];
                    acc(&mut grads, nodes, *a, |da| {
                        for o in 0..outer {
                            let dst = o * ext * inner + start * inner;
                            let src = o * len * inner;
                            for (d, &x) in da[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *d = *d + x;
                            }
                        }
                    });
                }
                Op::Reshape { a } => {
                    acc(&mut grads, nodes, *a, |da| {
                        da.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x)
                    });
                }
                Op::Permute { a, axes } => {
                    let back =
                        kernels::permute_data(&g, node.value.shape(), &kernels::inverse_axes(axes));
                    acc(&mut grads, nodes, *a, |da| {
                        da.iter_mut().zip(&back).for_each(|(d, &x)| *d = *d + x)
                    });
                }
                Op::Broadcast { a } => {
                    acc(&mut grads, nodes, *a, |da| {
                        let nb = da.len();
                        for chunk in g.chunks_exact(nb) {
                            da.iter_mut().zip(chunk).for_each(|(d, &x)| *d = *d + x);
                        }
                    });
                }
                Op::Sum { a } => {
                    acc(&mut grads, nodes, *a, |da| {
                        da.iter_mut().for_each(|d| *d = *d + g[0])
                    });
                }
                Op::Mean { a } => {
                    let scale = g[0] / T::lit(nodes[a.0].value.numel() as f64);
                    acc(&mut grads, nodes, *a, |da| {
                        da.iter_mut().for_each(|d| *d = *d + scale)
                    });
                }
            }
        }
        let mut out = Vec::with_capacity(n);
        let mut shapes = Vec::with_capacity(n);
        for (node, g) in nodes.iter().zip(grads) {
            let is_leaf = matches!(node.op, Op::Leaf) && node.requires_grad;
            shapes.push(if is_leaf {
                node.value.shape().to_vec()
            } else {
                Vec::new()
            });
            out.push(match (is_leaf, g) {
                (true, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                _ => None,
            });
        }
        Ok(Gradients {
            grads: out,
            shapes,
        })
    }
}

/// Bernoulli keep-mask with keep probability `1 - rate`, survivors scaled by
/// `1 / (1 - rate)`. One uniform draw per entry in row-major order.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    rate: f64,
    rng: &mut R,
) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    let keep = if rate < 1.0 {
        T::lit(1.0 / (1.0 - rate))
    } else {
        T::zero()
    };
    for v in t.data_mut() {
        if rng.random::<f64>() >= rate {
            *v = keep;
        }
    }
    t
}

/// Binary attention mask: each entry is 0 with probability `p_zero`.
/// One uniform draw per entry in row-major order.
pub fn binary_mask<T: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    p_zero: f64,
    rng: &mut R,
) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        if rng.random::<f64>() >= p_zero {
            *v = T::one();
        }
    }
    t
}
