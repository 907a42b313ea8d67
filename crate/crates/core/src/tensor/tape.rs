use std::sync::Arc;

use super::kernels::{
    conv2d_backward, conv2d_forward, elu_grad_scalar, elu_scalar, linear_dims, linear_forward,
    maxpool_forward,
};
use super::{gemm, Element, MatRef, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map from a base tensor to a larger derived tensor:
/// `full[f] = sum of coeff * base[b]` over the entries `(f, b, coeff)`.
///
/// Used for kernels whose rotated and fiber-shifted copies all share one set
/// of base weights.
#[derive(Clone, Debug)]
pub struct KernelMap {
    pub base_shape: Vec<usize>,
    pub full_shape: Vec<usize>,
    pub entries: Vec<(u32, u32, f64)>,
}

impl KernelMap {
    pub fn apply<T: Element>(&self, base: &Tensor<T>) -> Result<Tensor<T>> {
        ensure!(
            base.shape() == self.base_shape.as_slice(),
            "kernel map expects base {:?}, got {:?}",
            self.base_shape,
            base.shape()
        );
        let mut full = Tensor::zeros(&self.full_shape);
        let out = full.data_mut();
        let b = base.data();
        for &(f, i, c) in &self.entries {
            out[f as usize] = out[f as usize] + T::of(c) * b[i as usize];
        }
        Ok(full)
    }

    fn adjoint<T: Element>(&self, grad_full: &Tensor<T>) -> Tensor<T> {
        let mut g = Tensor::zeros(&self.base_shape);
        let out = g.data_mut();
        let gf = grad_full.data();
        for &(f, i, c) in &self.entries {
            out[i as usize] = out[i as usize] + T::of(c) * gf[f as usize];
        }
        g
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        pad: usize,
        stride: usize,
    },
    Gather {
        input: Var,
        index: Arc<Vec<usize>>,
    },
    Elu {
        input: Var,
        alpha: T,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Sum(Var),
    Reshape(Var),
    ChannelBias {
        input: Var,
        bias: Var,
        group: usize,
    },
    ExpandKernel {
        base: Var,
        map: Arc<KernelMap>,
    },
    MeanInner {
        input: Var,
        inner: usize,
    },
    RowNorm(Var),
    RowNormalize(Var),
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        channels: usize,
        inner: usize,
        training: bool,
    },
    QuatMul(Var, Var),
    PlanarQuat(Var),
    Concat(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Statistics of a training-mode normalization, per channel.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// An append-only record of differentiable operations.
///
/// Nodes are stored in creation order, which is a topological order; the
/// backward sweep walks them once in reverse.
pub struct Tape<T: Element = f64> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// Fail any operation whose output contains NaN or infinity.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.checked {
            ensure!(
                value.is_finite(),
                "non-finite value produced by node {} ({})",
                self.nodes.len(),
                op_name(&op)
            );
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf no gradient is requested for.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `[B,C,H,W]` cross-correlation with `[O,C,kh,kw]` kernels.
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: usize, stride: usize) -> Result<Var> {
        let y = conv2d_forward(self.value(input), self.value(kernel), pad, stride)?;
        self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                pad,
                stride,
            },
            &[input, kernel],
        )
    }

    /// Max over `k x k` windows of the two trailing axes.
    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let (y, arg) = maxpool_forward(self.value(input), k, stride)?;
        self.gather_raw(input, y, Arc::new(arg))
    }

    /// `out[i] = input[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, input: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let x = self.value(input).data();
        ensure!(
            index.iter().all(|i| *i < x.len()),
            "gather index out of range for {} elements",
            x.len()
        );
        let y = Tensor::new(shape, index.iter().map(|i| x[*i]).collect())?;
        self.gather_raw(input, y, index)
    }

    fn gather_raw(&mut self, input: Var, y: Tensor<T>, index: Arc<Vec<usize>>) -> Result<Var> {
        self.push(y, Op::Gather { input, index }, &[input])
    }

    /// Maximum over `axis`, dropping it. Ties go to the lowest index.
    pub fn max_over_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        ensure!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        ensure!(n >= 1, "max over empty axis");
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut index = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for s in 1..n {
                    let idx = (o * n + s) * inner + i;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                index.push(best);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.gather(input, Arc::new(index), &out_shape)
    }

    pub fn elu(&mut self, input: Var, alpha: T) -> Result<Var> {
        let y = self.value(input).map(|x| elu_scalar(x, alpha));
        self.push(y, Op::Elu { input, alpha }, &[input])
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        self.push(
            y,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            "{what}: shapes {:?} and {:?} differ",
            self.value(a).shape(),
            self.value(b).shape()
        );
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::new(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect(),
        )
        .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.zip(a, b, |p, q| p + q);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.zip(a, b, |p, q| p - q);
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.zip(a, b, |p, q| p * q);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let y = self.value(a).map(|x| x * c);
        self.push(y, Op::Scale(a, c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|x| x.exp());
        self.push(y, Op::Exp(a), &[a])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        ensure!(n > 0, "mean of an empty tensor");
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        self.push(y, Op::Reshape(a), &[a])
    }

    /// Adds `bias[c / group]` to channel `c` of a `[B, C, ...]` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var, group: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        ensure!(shape.len() >= 2, "channel_bias needs [B,C,...], got {shape:?}");
        let c = shape[1];
        ensure!(
            group >= 1 && self.value(bias).shape() == [c / group] && c % group == 0,
            "bias {:?} does not cover {c} channels in groups of {group}",
            self.value(bias).shape()
        );
        let inner: usize = shape[2..].iter().product();
        let mut y = self.value(input).clone();
        let b = self.value(bias).data().to_vec();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = *v + b[ch / group];
        }
        self.push(y, Op::ChannelBias { input, bias, group }, &[input, bias])
    }

    /// Derived kernel through a shared-weight [`KernelMap`].
    pub fn expand_kernel(&mut self, base: Var, map: Arc<KernelMap>) -> Result<Var> {
        let y = map.apply(self.value(base))?;
        self.push(y, Op::ExpandKernel { base, map }, &[base])
    }

    /// Mean over the trailing `inner` elements of each block: a
    /// `[..., inner]`-contiguous tensor becomes `[len / inner]`-shaped `shape`.
    pub fn mean_inner(&mut self, input: Var, inner: usize, shape: &[usize]) -> Result<Var> {
        let x = self.value(input).data();
        ensure!(
            inner >= 1 && x.len() % inner == 0,
            "cannot average blocks of {inner} over {} elements",
            x.len()
        );
        let scale = T::one() / T::of(inner as f64);
        let y: Vec<T> = x
            .chunks(inner)
            .map(|c| c.iter().fold(T::zero(), |a, v| a + *v) * scale)
            .collect();
        let y = Tensor::new(shape, y)?;
        self.push(y, Op::MeanInner { input, inner }, &[input])
    }

    fn rows(&self, a: Var) -> Result<(usize, usize)> {
        let s = self.value(a).shape();
        match s {
            [d] => Ok((1, *d)),
            [r, d] => Ok((*r, *d)),
            _ => Err(Error::contract(format!("expected [D] or [R,D], got {s:?}"))),
        }
    }

    /// Euclidean norm of each row of `[R,D]` (or of a `[D]` vector).
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let (r, d) = self.rows(a)?;
        let x = self.value(a).data();
        let y: Vec<T> = (0..r)
            .map(|i| {
                x[i * d..(i + 1) * d]
                    .iter()
                    .fold(T::zero(), |acc, v| acc + *v * *v)
                    .sqrt()
            })
            .collect();
        let shape = if self.value(a).rank() == 1 { vec![] } else { vec![r] };
        self.push(Tensor::new(&shape, y)?, Op::RowNorm(a), &[a])
    }

    /// Each row divided by its Euclidean norm. Zero rows are rejected.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, d) = self.rows(a)?;
        let x = self.value(a).data();
        let mut y = Vec::with_capacity(r * d);
        for i in 0..r {
            let row = &x[i * d..(i + 1) * d];
            let n = row.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt();
            ensure!(
                n > T::zero() && n.is_finite(),
                "cannot normalize row {i}: norm is {n}"
            );
            y.extend(row.iter().map(|v| *v / n));
        }
        let y = Tensor::new(self.value(a).shape(), y)?;
        self.push(y, Op::RowNormalize(a), &[a])
    }

    /// Normalization of a `[B, G, ...]` tensor with per-`G` statistics pooled
    /// over the batch and all trailing axes, followed by a per-`G` affine map.
    ///
    /// In training mode the statistics come from the input and are returned;
    /// otherwise `fixed` supplies them.
    pub fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        fixed: Option<&NormStats<T>>,
    ) -> Result<(Var, NormStats<T>)> {
        let shape = self.value(input).shape().to_vec();
        ensure!(shape.len() >= 2, "normalize needs [B,G,...], got {shape:?}");
        let (batch, channels) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        ensure!(
            self.value(gamma).shape() == [channels] && self.value(beta).shape() == [channels],
            "normalize affine terms must be [{channels}]"
        );
        let x = self.value(input).data();
        let count = batch * inner;
        ensure!(count > 0, "normalize over an empty tensor");
        let stats = match fixed {
            Some(s) => {
                ensure!(
                    s.mean.len() == channels && s.var.len() == channels,
                    "running statistics cover {} channels, input has {channels}",
                    s.mean.len()
                );
                s.clone()
            }
            None => {
                let inv_n = T::one() / T::of(count as f64);
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for g in 0..channels {
                    let mut acc = T::zero();
                    for b in 0..batch {
                        let off = (b * channels + g) * inner;
                        acc = x[off..off + inner].iter().fold(acc, |a, v| a + *v);
                    }
                    mean[g] = acc * inv_n;
                    let mut acc = T::zero();
                    for b in 0..batch {
                        let off = (b * channels + g) * inner;
                        acc = x[off..off + inner]
                            .iter()
                            .fold(acc, |a, v| a + (*v - mean[g]) * (*v - mean[g]));
                    }
                    var[g] = acc * inv_n;
                }
                NormStats { mean, var }
            }
        };
        let inv_std: Vec<T> = stats.var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for (i, v) in x.iter().enumerate() {
            let g = (i / inner) % channels;
            xhat[i] = (*v - stats.mean[g]) * inv_std[g];
            y[i] = xhat[i] * gm[g] + bt[g];
        }
        let y = Tensor::new(&shape, y)?;
        let var = self.push(
            y,
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                training: fixed.is_none(),
            },
            &[input, gamma, beta],
        )?;
        Ok((var, stats))
    }

    /// Row-wise Hamilton product of two `[R,4]` quaternion batches.
    pub fn quat_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, d) = self.rows(a)?;
        ensure!(
            d == 4 && self.value(a).shape() == self.value(b).shape(),
            "quat_mul needs two [R,4] inputs, got {:?} and {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let (x, z) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(r * 4);
        for i in 0..r {
            let m = quat_left_matrix([x[i * 4], x[i * 4 + 1], x[i * 4 + 2], x[i * 4 + 3]]);
            for row in &m {
                y.push((0..4).fold(T::zero(), |acc, k| acc + row[k] * z[i * 4 + k]));
            }
        }
        let y = Tensor::new(self.value(a).shape(), y)?;
        self.push(y, Op::QuatMul(a, b), &[a, b])
    }

    /// Maps each row `(x, y)` of `[R,2]` to the unit quaternion of the
    /// rotation by `atan2(y, x)` about the z axis, `[R,4]`.
    pub fn planar_quat(&mut self, a: Var) -> Result<Var> {
        let (r, d) = self.rows(a)?;
        ensure!(d == 2, "planar_quat needs [R,2] input, got {:?}", self.value(a).shape());
        let x = self.value(a).data();
        let half = T::of(0.5);
        let mut y = Vec::with_capacity(r * 4);
        for i in 0..r {
            let phi = x[i * 2 + 1].atan2(x[i * 2]);
            y.extend([(phi * half).cos(), T::zero(), T::zero(), (phi * half).sin()]);
        }
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = 4;
        self.push(Tensor::new(&shape, y)?, Op::PlanarQuat(a), &[a])
    }

    /// Joins `[R,p]` and `[R,q]` into `[R,p+q]` (or two vectors end to end).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, p) = self.rows(a)?;
        let (rb, q) = self.rows(b)?;
        ensure!(
            ra == rb && self.value(a).rank() == self.value(b).rank(),
            "concat row mismatch: {:?} and {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let (x, z) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(ra * (p + q));
        for i in 0..ra {
            y.extend_from_slice(&x[i * p..(i + 1) * p]);
            y.extend_from_slice(&z[i * q..(i + 1) * q]);
        }
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = p + q;
        self.push(Tensor::new(&shape, y)?, Op::Concat(a, b), &[a, b])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| {
            if needs(v) {
                accumulate(grads, v, t)
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                pad,
                stride,
            } => {
                let (gi, gk) = conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *pad,
                    *stride,
                    needs(*input),
                    needs(*kernel),
                )?;
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(gk) = gk {
                    acc(*kernel, gk);
                }
            }
            Op::Gather { input, index } => {
                let mut gi = Tensor::zeros(self.value(*input).shape());
                let d = gi.data_mut();
                for (o, i) in index.iter().enumerate() {
                    d[*i] = d[*i] + g.data()[o];
                }
                acc(*input, gi);
            }
            Op::Elu { input, alpha } => {
                let x = self.value(*input).data();
                let d = x
                    .iter()
                    .zip(g.data())
                    .map(|(x, g)| *g * elu_grad_scalar(*x, *alpha))
                    .collect();
                acc(*input, Tensor::new(g.shape(), d)?);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (batch, n, m, _) = linear_dims(x.shape(), w.shape(), self.value(*bias).shape())?;
                if needs(*input) {
                    let mut gi = vec![T::zero(); batch * n];
                    gemm(
                        MatRef::new(g.data(), batch, m),
                        MatRef::new(w.data(), m, n),
                        &mut gi,
                        false,
                    );
                    acc(*input, Tensor::new(x.shape(), gi)?);
                }
                if needs(*weight) {
                    let mut gw = vec![T::zero(); m * n];
                    gemm(
                        MatRef::t(g.data(), m, batch),
                        MatRef::new(x.data(), batch, n),
                        &mut gw,
                        false,
                    );
                    acc(*weight, Tensor::new(w.shape(), gw)?);
                }
                if needs(*bias) {
                    let mut gb = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (b, v) in gb.iter_mut().zip(row) {
                            *b = *b + *v;
                        }
                    }
                    acc(*bias, Tensor::new(&[m], gb)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(y.data()).map(|(g, y)| *g * *y).collect();
                let gb = g.data().iter().zip(x.data()).map(|(g, x)| *g * *x).collect();
                acc(*a, Tensor::new(g.shape(), ga)?);
                acc(*b, Tensor::new(g.shape(), gb)?);
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * *c)),
            Op::Exp(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| *g * *y)
                    .collect();
                acc(*a, Tensor::new(g.shape(), d)?);
            }
            Op::Sum(a) => {
                let s = g.item()?;
                acc(*a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.value(*a).shape())?),
            Op::ChannelBias { input, bias, group } => {
                acc(*input, g.clone());
                if needs(*bias) {
                    let shape = g.shape();
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut gb = vec![T::zero(); c / group];
                    for (i, v) in g.data().iter().enumerate() {
                        let ch = (i / inner) % c;
                        gb[ch / group] = gb[ch / group] + *v;
                    }
                    acc(*bias, Tensor::new(&[c / group], gb)?);
                }
            }
            Op::ExpandKernel { base, map } => acc(*base, map.adjoint(g)),
            Op::MeanInner { input, inner } => {
                let scale = T::one() / T::of(*inner as f64);
                let x = self.value(*input);
                let d = (0..x.len()).map(|i| g.data()[i / inner] * scale).collect();
                acc(*input, Tensor::new(x.shape(), d)?);
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let d = x.shape().last().copied().unwrap_or(1);
                let y = node.value.data();
                let out = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let n = y[i / d];
                        if n > T::zero() {
                            g.data()[i / d] * *v / n
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*a, Tensor::new(x.shape(), out)?);
            }
            Op::RowNormalize(a) => {
                // d(x/|x|) = (I - u u^T) / |x|
                let x = self.value(*a);
                let d = x.shape().last().copied().unwrap_or(1);
                let u = node.value.data();
                let mut out = vec![T::zero(); x.len()];
                for (r, row) in x.data().chunks(d).enumerate() {
                    let n = row.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt();
                    let (ur, gr) = (&u[r * d..(r + 1) * d], &g.data()[r * d..(r + 1) * d]);
                    let dot = ur.iter().zip(gr).fold(T::zero(), |acc, (p, q)| acc + *p * *q);
                    for k in 0..d {
                        out[r * d + k] = (gr[k] - ur[k] * dot) / n;
                    }
                }
                acc(*a, Tensor::new(x.shape(), out)?);
            }
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                training,
            } => {
                let (channels, inner) = (*channels, *inner);
                let gy = g.data();
                let mut sum_g = vec![T::zero(); channels];
                let mut sum_gx = vec![T::zero(); channels];
                for (i, v) in gy.iter().enumerate() {
                    let c = (i / inner) % channels;
                    sum_g[c] = sum_g[c] + *v;
                    sum_gx[c] = sum_gx[c] + *v * xhat[i];
                }
                if needs(*gamma) {
                    acc(*gamma, Tensor::new(&[channels], sum_gx.clone())?);
                }
                if needs(*beta) {
                    acc(*beta, Tensor::new(&[channels], sum_g.clone())?);
                }
                if needs(*input) {
                    let gm = self.value(*gamma).data();
                    let count = T::of((gy.len() / channels) as f64);
                    let d = gy
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let c = (i / inner) % channels;
                            if *training {
                                gm[c] * inv_std[c] / count
                                    * (count * *v - sum_g[c] - xhat[i] * sum_gx[c])
                            } else {
                                gm[c] * inv_std[c] * *v
                            }
                        })
                        .collect();
                    acc(*input, Tensor::new(g.shape(), d)?);
                }
            }
            Op::QuatMul(a, b) => {
                let (x, z) = (self.value(*a).data(), self.value(*b).data());
                let gd = g.data();
                let (mut ga, mut gb) = (vec![T::zero(); x.len()], vec![T::zero(); z.len()]);
                for i in 0..x.len() / 4 {
                    let q = |v: &[T]| [v[i * 4], v[i * 4 + 1], v[i * 4 + 2], v[i * 4 + 3]];
                    let (l, r) = (quat_left_matrix(q(x)), quat_right_matrix(q(z)));
                    for k in 0..4 {
                        for row in 0..4 {
                            ga[i * 4 + k] = ga[i * 4 + k] + r[row][k] * gd[i * 4 + row];
                            gb[i * 4 + k] = gb[i * 4 + k] + l[row][k] * gd[i * 4 + row];
                        }
                    }
                }
                acc(*a, Tensor::new(self.value(*a).shape(), ga)?);
                acc(*b, Tensor::new(self.value(*b).shape(), gb)?);
            }
            Op::PlanarQuat(a) => {
                let x = self.value(*a);
                let (xd, y, gd) = (x.data(), node.value.data(), g.data());
                let half = T::of(0.5);
                let mut out = vec![T::zero(); x.len()];
                for i in 0..x.len() / 2 {
                    let (px, py) = (xd[i * 2], xd[i * 2 + 1]);
                    let r2 = px * px + py * py;
                    if r2 == T::zero() {
                        continue;
                    }
                    // dq/dphi = (-sin/2, 0, 0, cos/2) of the half angle.
                    let dphi = half * (-y[i * 4 + 3] * gd[i * 4] + y[i * 4] * gd[i * 4 + 3]);
                    out[i * 2] = -dphi * py / r2;
                    out[i * 2 + 1] = dphi * px / r2;
                }
                acc(*a, Tensor::new(x.shape(), out)?);
            }
            Op::Concat(a, b) => {
                let (_, p) = self.rows(*a)?;
                let (_, q) = self.rows(*b)?;
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for row in g.data().chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                acc(*a, Tensor::new(self.value(*a).shape(), ga)?);
                acc(*b, Tensor::new(self.value(*b).shape(), gb)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

/// Matrix of `q -> a * q`.
fn quat_left_matrix<T: Element>(a: [T; 4]) -> [[T; 4]; 4] {
    let [w, x, y, z] = a;
    [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
}

fn quat_right_matrix<T: Element>(b: [T; 4]) -> [[T; 4]; 4] {
    let [w, x, y, z] = b;
    [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Gather { .. } => "gather",
        Op::Elu { .. } => "elu",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Exp(..) => "exp",
        Op::Sum(..) => "sum",
        Op::Reshape(..) => "reshape",
        Op::ChannelBias { .. } => "channel_bias",
        Op::ExpandKernel { .. } => "expand_kernel",
        Op::MeanInner { .. } => "mean_inner",
        Op::RowNorm(..) => "row_norm",
        Op::RowNormalize(..) => "row_normalize",
        Op::Norm { .. } => "normalize",
        Op::QuatMul(..) => "quat_mul",
        Op::PlanarQuat(..) => "planar_quat",
        Op::Concat(..) => "concat",
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
