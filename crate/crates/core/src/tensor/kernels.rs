//! Forward and backward kernels shared by the plain-tensor API and the tape.
//!
//! Convolutions use the cross-correlation convention and run as
//! im2col + GEMM, one sample at a time, so every reduction has a fixed order.

use super::{gemm, Element, MatRef, Tensor};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], pad: usize, stride: usize) -> Result<Self> {
        ensure!(input.len() == 4, "conv2d input must be [B,C,H,W], got {input:?}");
        ensure!(kernel.len() == 4, "conv2d kernel must be [O,C,kh,kw], got {kernel:?}");
        ensure!(stride >= 1, "conv2d stride must be at least 1");
        let [batch, c_in, h, w] = [input[0], input[1], input[2], input[3]];
        let [c_out, kc, kh, kw] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        ensure!(
            kc == c_in,
            "kernel expects {kc} input channels, input has {c_in}"
        );
        ensure!(kh >= 1 && kw >= 1, "empty kernel {kernel:?}");
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        ensure!(
            ph >= kh && pw >= kw,
            "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        );
        ensure!(
            (ph - kh) % stride == 0 && (pw - kw) % stride == 0,
            "output extent not integral: ({ph} - {kh}) or ({pw} - {kw}) not divisible by stride {stride}"
        );
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            pad,
            stride,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one sample into a `[C*kh*kw, oh*ow]` matrix.
    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let n = self.out_len();
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oi in 0..self.oh {
                        let yi = (oi * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if yi < 0 || yi >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[yi as usize * self.w..(yi as usize + 1) * self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let xj = (oj * self.stride + kj) as isize - self.pad as isize;
                            *v = if xj < 0 || xj >= self.w as isize {
                                T::zero()
                            } else {
                                src[xj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatter-add columns back into a sample gradient.
    fn col2im<T: Element>(&self, cols: &[T], gx: &mut [T]) {
        let n = self.out_len();
        for c in 0..self.c_in {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oi in 0..self.oh {
                        let yi = (oi * self.stride + ki) as isize - self.pad as isize;
                        if yi < 0 || yi >= self.h as isize {
                            continue;
                        }
                        let base = yi as usize * self.w;
                        for oj in 0..self.ow {
                            let xj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if xj >= 0 && xj < self.w as isize {
                                plane[base + xj as usize] =
                                    plane[base + xj as usize] + src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), pad, stride)?;
    let (p, n) = (g.patch_len(), g.out_len());
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.c_out * n];
    let mut cols = vec![T::zero(); p * n];
    for b in 0..g.batch {
        g.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        gemm(
            MatRef::new(kernel.data(), g.c_out, p),
            MatRef::new(&cols, p, n),
            &mut out[b * g.c_out * n..(b + 1) * g.c_out * n],
            false,
        );
    }
    Tensor::new(&[g.batch, g.c_out, g.oh, g.ow], out)
}

/// Gradients of a convolution with respect to its input and kernel.
pub(crate) fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: usize,
    stride: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), pad, stride)?;
    let (p, n) = (g.patch_len(), g.out_len());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * n;
    let mut gk = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut gx = need_input.then(|| vec![T::zero(); input.len()]);
    let mut cols = vec![T::zero(); p * n];
    for b in 0..g.batch {
        let go = &grad_out.data()[b * out_len..(b + 1) * out_len];
        if let Some(gk) = gk.as_mut() {
            g.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
            gemm(
                MatRef::new(go, g.c_out, n),
                MatRef::t(&cols, n, p),
                gk,
                true,
            );
        }
        if let Some(gx) = gx.as_mut() {
            gemm(
                MatRef::t(kernel.data(), p, g.c_out),
                MatRef::new(go, g.c_out, n),
                &mut cols,
                false,
            );
            g.col2im(&cols, &mut gx[b * in_len..(b + 1) * in_len]);
        }
    }
    Ok((
        gx.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        gk.map(|d| Tensor::new(kernel.shape(), d)).transpose()?,
    ))
}

fn as_batched<T: Element>(t: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match t.rank() {
        3 => {
            let s = t.shape();
            Ok((t.clone().reshape(&[1, s[0], s[1], s[2]])?, true))
        }
        4 => Ok((t.clone(), false)),
        r => Err(crate::Error::contract(format!(
            "expected [C,H,W] or [B,C,H,W], got rank {r}"
        ))),
    }
}

fn unbatch<T: Element>(t: Tensor<T>, squeeze: bool) -> Result<Tensor<T>> {
    if squeeze {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    } else {
        Ok(t)
    }
}

/// Cross-correlation of `[C,H,W]` (or `[B,C,H,W]`) input with
/// `[C_out,C,kh,kw]` kernels and symmetric zero padding.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (x, squeeze) = as_batched(input)?;
    unbatch(conv2d_forward(&x, kernels, pad, stride)?, squeeze)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeometry {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeometry {
    pub fn new(shape: &[usize], k: usize, stride: usize) -> Result<Self> {
        ensure!(shape.len() >= 2, "maxpool2d needs at least 2 dims, got {shape:?}");
        ensure!(k >= 1 && stride >= 1, "maxpool2d window and stride must be positive");
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        ensure!(
            k <= h && k <= w,
            "pooling window {k} exceeds input extent {h}x{w}"
        );
        Ok(Self {
            planes: shape[..shape.len() - 2].iter().product(),
            h,
            w,
            stride,
            oh: (h - k) / stride + 1,
            ow: (w - k) / stride + 1,
        })
    }
}

/// Window maxima plus the flat input index of each (first on ties).
pub(crate) fn maxpool_forward<T: Element>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let g = PoolGeometry::new(input.shape(), k, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let mut best = base + oi * g.stride * g.w + oj * g.stride;
                for di in 0..k {
                    for dj in 0..k {
                        let idx = base + (oi * g.stride + di) * g.w + oj * g.stride + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = g.oh;
    shape[r - 1] = g.ow;
    Ok((Tensor::new(&shape, out)?, arg))
}

pub fn maxpool2d<T: Element>(input: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    Ok(maxpool_forward(input, k, stride)?.0)
}

pub(crate) fn elu_scalar<T: Element>(x: T, alpha: T) -> T {
    if x > T::zero() {
        x
    } else {
        alpha * x.exp_m1()
    }
}

pub(crate) fn elu_grad_scalar<T: Element>(x: T, alpha: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        alpha * x.exp()
    }
}

pub fn elu<T: Element>(input: &Tensor<T>, alpha: T) -> Tensor<T> {
    input.map(|x| elu_scalar(x, alpha))
}

/// Checks `[n]`/`[B,n]` input against `[m,n]` weight and `[m]` bias;
/// returns `(batch, n, m, had_batch_axis)`.
pub(crate) fn linear_dims(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
) -> Result<(usize, usize, usize, bool)> {
    ensure!(weight.len() == 2, "linear weight must be [m,n], got {weight:?}");
    let (m, n) = (weight[0], weight[1]);
    ensure!(bias == [m], "linear bias must be [{m}], got {bias:?}");
    match input {
        [k] if *k == n => Ok((1, n, m, false)),
        [b, k] if *k == n => Ok((*b, n, m, true)),
        _ => Err(crate::Error::contract(format!(
            "linear input {input:?} does not conform to weight {weight:?}"
        ))),
    }
}

pub(crate) fn linear_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, n, m, batched) = linear_dims(input.shape(), weight.shape(), bias.shape())?;
    let mut out: Vec<T> = (0..batch).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(
        MatRef::new(input.data(), batch, n),
        MatRef::t(weight.data(), n, m),
        &mut out,
        true,
    );
    if batched {
        Tensor::new(&[batch, m], out)
    } else {
        Tensor::new(&[m], out)
    }
}

/// `W x + b` for `[n]` or `[B,n]` input.
pub fn linear<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    linear_forward(input, weight, bias)
}
