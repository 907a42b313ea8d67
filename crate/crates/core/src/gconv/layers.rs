//! Equivariant layers recorded on a [`Tape`].
//!
//! Feature maps on the tape are `[B, K*N, H, W]` with the orientation index
//! varying fastest inside each channel block, which is the memory layout of
//! `[B, K, N, H, W]`. Each layer expands its shared base weights into a full
//! convolution kernel through a [`KernelMap`] and runs one plain convolution.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::rotate::{disk_mask, rotation_operator, GridOperator, Turn};
use super::CyclicGroup;
use crate::error::{ensure, Result};
use crate::tensor::{fan_in_init, Element, KernelMap, NormStats, Tape, Tensor, Var};

/// Rotated copies of the kernel grid, one per group element, with the
/// circular mask folded in (when the group is non-trivial).
fn orientation_operators(ksize: usize, group: CyclicGroup) -> Vec<GridOperator> {
    let mask = if group.order() > 1 {
        disk_mask(ksize)
    } else {
        vec![true; ksize * ksize]
    };
    (0..group.order())
        .map(|r| {
            let mut op = rotation_operator(ksize, Turn::new(r, group.order()));
            for (p, taps) in op.taps.iter_mut().enumerate() {
                if !mask[p] {
                    taps.clear();
                }
                taps.retain(|(src, _)| mask[*src]);
            }
            op
        })
        .collect()
}

pub(crate) fn kernel_mask(ksize: usize, group: CyclicGroup) -> Vec<bool> {
    if group.order() > 1 {
        disk_mask(ksize)
    } else {
        vec![true; ksize * ksize]
    }
}

/// `[K, C, k, k]` base weights to `[K*N, C, k, k]`: output orientation `r`
/// of filter `k` is the base filter rotated by `r` steps.
pub fn lifting_map(k_out: usize, c_in: usize, ksize: usize, group: CyclicGroup) -> KernelMap {
    let n = group.order();
    let ops = orientation_operators(ksize, group);
    let kk = ksize * ksize;
    let mut entries = Vec::new();
    for k in 0..k_out {
        for (r, op) in ops.iter().enumerate() {
            for c in 0..c_in {
                let full_base = ((k * n + r) * c_in + c) * kk;
                let base_base = (k * c_in + c) * kk;
                for (p, taps) in op.taps.iter().enumerate() {
                    for (src, w) in taps {
                        entries.push(((full_base + p) as u32, (base_base + src) as u32, *w));
                    }
                }
            }
        }
    }
    KernelMap {
        base_shape: vec![k_out, c_in, ksize, ksize],
        full_shape: vec![k_out * n, c_in, ksize, ksize],
        entries,
    }
}

/// `[K', K, N, k, k]` base weights to `[K'*N, K*N, k, k]`: the block for
/// output orientation `r` and input orientation `s` is base slice
/// `(s - r) mod N` rotated by `r` steps.
pub fn group_map(k_out: usize, k_in: usize, ksize: usize, group: CyclicGroup) -> KernelMap {
    let n = group.order();
    let ops = orientation_operators(ksize, group);
    let kk = ksize * ksize;
    let mut entries = Vec::new();
    for ko in 0..k_out {
        for (r, op) in ops.iter().enumerate() {
            for ki in 0..k_in {
                for s in 0..n {
                    let shifted = (s + n - r) % n;
                    let full_base = ((ko * n + r) * (k_in * n) + ki * n + s) * kk;
                    let base_base = ((ko * k_in + ki) * n + shifted) * kk;
                    for (p, taps) in op.taps.iter().enumerate() {
                        for (src, w) in taps {
                            entries.push(((full_base + p) as u32, (base_base + src) as u32, *w));
                        }
                    }
                }
            }
        }
    }
    KernelMap {
        base_shape: vec![k_out, k_in, n, ksize, ksize],
        full_shape: vec![k_out * n, k_in * n, ksize, ksize],
        entries,
    }
}

fn masked_init<T: Element>(
    shape: &[usize],
    fan_in: usize,
    mask: &[bool],
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let mut w = fan_in_init::<T>(shape, fan_in, rng);
    let kk = mask.len();
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        if !mask[i % kk] {
            *v = T::zero();
        }
    }
    w
}

/// A convolution over the plane extended by the cyclic group: either the
/// lifting layer (plain image in) or a group layer (fibered features in).
#[derive(Clone, Debug)]
pub struct GroupConvLayer {
    pub lifting: bool,
    pub c_in: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub group: CyclicGroup,
    pub bias: bool,
    map: Arc<KernelMap>,
}

impl GroupConvLayer {
    /// `c_in` counts plain image channels for a lifting layer and fiber
    /// blocks `K` for a group layer; `c_out` counts output blocks `K'`.
    pub fn new(
        lifting: bool,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        group: CyclicGroup,
        bias: bool,
    ) -> Result<Self> {
        ensure!(ksize % 2 == 1, "kernel side must be odd, got {ksize}");
        ensure!(c_in >= 1 && c_out >= 1, "layer widths must be positive");
        let map = if lifting {
            lifting_map(c_out, c_in, ksize, group)
        } else {
            group_map(c_out, c_in, ksize, group)
        };
        Ok(Self {
            lifting,
            c_in,
            c_out,
            ksize,
            group,
            bias,
            map: Arc::new(map),
        })
    }

    pub fn weight_shape(&self) -> &[usize] {
        &self.map.base_shape
    }

    pub fn kernel_map(&self) -> &Arc<KernelMap> {
        &self.map
    }

    /// Channels of the `[B, C, H, W]` input this layer reads.
    pub fn input_channels(&self) -> usize {
        if self.lifting {
            self.c_in
        } else {
            self.c_in * self.group.order()
        }
    }

    pub fn output_channels(&self) -> usize {
        self.c_out * self.group.order()
    }

    fn fan_in(&self) -> usize {
        self.input_channels() * self.ksize * self.ksize
    }

    /// Freshly initialized `[weight]` or `[weight, bias]`.
    pub fn init_params<T: Element>(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
        let mask = kernel_mask(self.ksize, self.group);
        let mut out = vec![masked_init(
            self.weight_shape(),
            self.fan_in(),
            &mask,
            rng,
        )];
        if self.bias {
            out.push(Tensor::zeros(&[self.c_out]));
        }
        out
    }

    /// Scalars that are free to train: unmasked base weights plus biases.
    pub fn independent_params(&self) -> usize {
        let mask = kernel_mask(self.ksize, self.group);
        let per_kernel = mask.iter().filter(|m| **m).count();
        let kernels: usize = self.weight_shape()[..self.weight_shape().len() - 2]
            .iter()
            .product();
        kernels * per_kernel + if self.bias { self.c_out } else { 0 }
    }

    /// Same-padded forward pass.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        ensure!(
            shape.len() == 4 && shape[1] == self.input_channels(),
            "layer expects [B,{},H,W] input, got {shape:?}",
            self.input_channels()
        );
        let kernel = tape.expand_kernel(weight, self.map.clone())?;
        let y = tape.conv2d(x, kernel, self.ksize / 2, 1)?;
        match (self.bias, bias) {
            (true, Some(b)) => tape.channel_bias(y, b, self.group.order()),
            (false, None) => Ok(y),
            _ => Err(crate::Error::contract("bias parameter does not match layer")),
        }
    }
}

/// Normalization with one mean/variance and one affine pair per fiber block,
/// shared across orientations and positions.
#[derive(Clone, Debug)]
pub struct GroupNormLayer {
    pub channels: usize,
    pub group: CyclicGroup,
    pub eps: f64,
    pub momentum: f64,
}

/// Running statistics of a [`GroupNormLayer`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Element> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

impl GroupNormLayer {
    pub fn new(channels: usize, group: CyclicGroup) -> Self {
        Self {
            channels,
            group,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// `[gamma, beta]`.
    pub fn init_params<T: Element>(&self) -> Vec<Tensor<T>> {
        vec![
            Tensor::full(&[self.channels], T::one()),
            Tensor::zeros(&[self.channels]),
        ]
    }

    pub fn independent_params(&self) -> usize {
        2 * self.channels
    }

    /// In training mode, normalizes with batch statistics and folds them
    /// into `running`; otherwise uses `running`.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        training: bool,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let n = self.group.order();
        ensure!(
            shape.len() == 4 && shape[1] == self.channels * n,
            "normalization expects [B,{},H,W], got {shape:?}",
            self.channels * n
        );
        let grouped = tape.reshape(x, &[shape[0], self.channels, n * shape[2] * shape[3]])?;
        let fixed = (!training).then(|| NormStats {
            mean: running.mean.data().to_vec(),
            var: running.var.data().to_vec(),
        });
        let (y, stats) = tape.normalize(grouped, gamma, beta, T::of(self.eps), fixed.as_ref())?;
        if training {
            let m = T::of(self.momentum);
            for (r, s) in running.mean.data_mut().iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * *s;
            }
            for (r, s) in running.var.data_mut().iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * *s;
            }
        }
        tape.reshape(y, &shape)
    }
}
