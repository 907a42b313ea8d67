//! Discrete roto-translation equivariant layers over the plane extended by
//! the cyclic rotation group `C_N`.
//!
//! Features are fibered: a [`GFeature`] holds `K` channels, each with one
//! spatial map per orientation. Rotating the input by one group step rotates
//! every map and cycles the orientation axis by one; see [`feature_action`].

mod layers;
mod rotate;

use std::io::Write;

pub use layers::{group_map, lifting_map, GroupConvLayer, GroupNormLayer, RunningStats};
pub use rotate::{disk_mask, rotate_square, rotation_operator, GridOperator, Turn};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Element, Tape, Tensor};

/// The rotation group `C_N` acting in steps of `2pi / N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CyclicGroup {
    order: usize,
}

impl CyclicGroup {
    pub fn new(order: usize) -> Result<Self> {
        ensure!(order >= 1, "group order must be positive");
        Ok(Self { order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn step_angle(&self) -> f64 {
        std::f64::consts::TAU / self.order as f64
    }

    /// The rotation by `r` steps.
    pub fn turn(&self, r: usize) -> Turn {
        Turn::new(r, self.order)
    }
}

/// Orientation-fibered feature map, shape `[K, N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GFeature<T: Element = f64> {
    data: Tensor<T>,
    group: CyclicGroup,
}

impl<T: Element> GFeature<T> {
    pub fn new(data: Tensor<T>, group: CyclicGroup) -> Result<Self> {
        ensure!(
            data.rank() == 4 && data.shape()[1] == group.order(),
            "feature must be [K,{},H,W], got {:?}",
            group.order(),
            data.shape()
        );
        Ok(Self { data, group })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<T> {
        self.data
    }

    pub fn group(&self) -> CyclicGroup {
        self.group
    }

    /// `(K, N, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Writes one CSV row per element under the header `k,n,y,x,value`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "k,n,y,x,value")?;
        let (k, n, h, wd) = self.dims();
        let d = self.data.data();
        for ki in 0..k {
            for s in 0..n {
                for y in 0..h {
                    for x in 0..wd {
                        let v = d[((ki * n + s) * h + y) * wd + x];
                        writeln!(w, "{ki},{s},{y},{x},{v}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Base weights of one layer with the circular mask applied.
///
/// A lifting kernel is `[K, C, k, k]`; a group kernel is `[K', K, N, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GKernel<T: Element = f64> {
    weights: Tensor<T>,
    group: CyclicGroup,
    lifting: bool,
}

impl<T: Element> GKernel<T> {
    pub fn lifting(weights: Tensor<T>, group: CyclicGroup) -> Result<Self> {
        ensure!(weights.rank() == 4, "lifting kernel must be [K,C,k,k], got {:?}", weights.shape());
        Self::masked(weights, group, true)
    }

    pub fn group(weights: Tensor<T>, group: CyclicGroup) -> Result<Self> {
        ensure!(
            weights.rank() == 5 && weights.shape()[2] == group.order(),
            "group kernel must be [K',K,{},k,k], got {:?}",
            group.order(),
            weights.shape()
        );
        Self::masked(weights, group, false)
    }

    fn masked(mut weights: Tensor<T>, group: CyclicGroup, lifting: bool) -> Result<Self> {
        let s = weights.shape();
        let (kh, kw) = (s[s.len() - 2], s[s.len() - 1]);
        ensure!(kh == kw && kh % 2 == 1, "kernel must be square with odd side, got {kh}x{kw}");
        let mask = layers::kernel_mask(kh, group);
        for (i, v) in weights.data_mut().iter_mut().enumerate() {
            if !mask[i % mask.len()] {
                *v = T::zero();
            }
        }
        Ok(Self {
            weights,
            group,
            lifting,
        })
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn is_lifting(&self) -> bool {
        self.lifting
    }

    pub fn side(&self) -> usize {
        *self.weights.shape().last().unwrap_or(&0)
    }

    /// The layer that expands these weights, without bias.
    pub fn layer(&self) -> Result<GroupConvLayer> {
        let s = self.weights.shape();
        GroupConvLayer::new(self.lifting, s[1], s[0], self.side(), self.group, false)
    }
}

/// A square kernel rotated by `r` steps of `C_N`, with the circular mask
/// reapplied for `N > 1`.
pub fn rotate_kernel<T: Element>(kernel: &Tensor<T>, r: usize, group: CyclicGroup) -> Result<Tensor<T>> {
    ensure!(kernel.rank() == 2, "kernel must be 2-D, got {:?}", kernel.shape());
    let n = kernel.shape()[0];
    ensure!(
        kernel.shape()[1] == n && n % 2 == 1,
        "kernel must be square with odd side, got {:?}",
        kernel.shape()
    );
    ensure!(r < group.order(), "rotation step {r} outside C_{}", group.order());
    let mask = layers::kernel_mask(n, group);
    let masked: Vec<T> = kernel
        .data()
        .iter()
        .zip(&mask)
        .map(|(v, m)| if *m { *v } else { T::zero() })
        .collect();
    let mut out = rotate_square(&masked, n, group.turn(r));
    for (v, m) in out.iter_mut().zip(&mask) {
        if !m {
            *v = T::zero();
        }
    }
    Tensor::new(&[n, n], out)
}

fn run_layer<T: Element>(kernel: &GKernel<T>, input: Tensor<T>) -> Result<Tensor<T>> {
    let layer = kernel.layer()?;
    let mut tape = Tape::<T>::new();
    let x = tape.constant(input);
    let w = tape.constant(kernel.weights.clone());
    let y = layer.forward(&mut tape, x, w, None)?;
    Ok(tape.value(y).clone())
}

/// Lifting convolution of a `[C, H, W]` image, same-padded.
pub fn lift_conv<T: Element>(image: &Tensor<T>, kernel: &GKernel<T>) -> Result<GFeature<T>> {
    ensure!(kernel.lifting, "lift_conv needs a lifting kernel");
    ensure!(image.rank() == 3, "image must be [C,H,W], got {:?}", image.shape());
    let s = image.shape().to_vec();
    ensure!(
        s[1] >= kernel.side() && s[2] >= kernel.side(),
        "image {}x{} smaller than kernel side {}",
        s[1],
        s[2],
        kernel.side()
    );
    let y = run_layer(kernel, image.clone().reshape(&[1, s[0], s[1], s[2]])?)?;
    let k = kernel.weights.shape()[0];
    let n = kernel.group.order();
    GFeature::new(y.reshape(&[k, n, s[1], s[2]])?, kernel.group)
}

/// Group convolution of a fibered feature map, same-padded.
pub fn group_conv<T: Element>(v: &GFeature<T>, kernel: &GKernel<T>) -> Result<GFeature<T>> {
    ensure!(!kernel.lifting, "group_conv needs a group kernel");
    ensure!(
        v.group == kernel.group,
        "group mismatch: features over C_{}, kernel over C_{}",
        v.group.order(),
        kernel.group.order()
    );
    let (k, n, h, w) = v.dims();
    ensure!(
        kernel.weights.shape()[1] == k,
        "kernel reads {} channels, features have {k}",
        kernel.weights.shape()[1]
    );
    let y = run_layer(kernel, v.data.clone().reshape(&[1, k * n, h, w])?)?;
    let k_out = kernel.weights.shape()[0];
    GFeature::new(y.reshape(&[k_out, n, h, w])?, v.group)
}

/// Moves every spatial map by an integer `(dx, dy)` with `y` up; vacated
/// pixels read zero.
fn shift_square<T: Element>(src: &[T], h: usize, w: usize, shift: [i64; 2]) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let (si, sj) = (i + shift[1], j - shift[0]);
            if si >= 0 && sj >= 0 && si < h as i64 && sj < w as i64 {
                out[(i * w as i64 + j) as usize] = src[(si * w as i64 + sj) as usize];
            }
        }
    }
    out
}

/// The group action on fibered features: every map rotated by `r` steps
/// about the center and translated by `shift`, and orientation `s` moved to
/// `s + r`.
pub fn feature_action<T: Element>(v: &GFeature<T>, r: usize, shift: [i64; 2]) -> Result<GFeature<T>> {
    let n = v.group.order();
    ensure!(r < n, "rotation step {r} outside C_{n}");
    act(v, Turn::new(r, n), r, shift)
}

/// Spatial rotation by `turn` with an explicit fiber shift.
fn act<T: Element>(v: &GFeature<T>, turn: Turn, fiber_shift: usize, shift: [i64; 2]) -> Result<GFeature<T>> {
    let (k, n, h, w) = v.dims();
    let rotate = turn.steps != 0;
    ensure!(!rotate || h == w, "rotation needs square maps, got {h}x{w}");
    let op = rotate.then(|| rotation_operator(h, turn));
    let plane = h * w;
    let src = v.data.data();
    let mut out = Vec::with_capacity(src.len());
    for ki in 0..k {
        for s in 0..n {
            let from = (s + n - fiber_shift % n) % n;
            let map = &src[(ki * n + from) * plane..][..plane];
            let rotated = match &op {
                Some(op) => op.apply(map),
                None => map.to_vec(),
            };
            if shift == [0, 0] {
                out.extend(rotated);
            } else {
                out.extend(shift_square(&rotated, h, w, shift));
            }
        }
    }
    GFeature::new(Tensor::new(v.data.shape(), out)?, v.group)
}

/// Per-position maximum over the orientation axis.
pub fn group_pool<T: Element>(v: &GFeature<T>) -> Result<Tensor<T>> {
    let (k, n, h, w) = v.dims();
    let plane = h * w;
    let src = v.data.data();
    let mut out = vec![T::neg_infinity(); k * plane];
    for ki in 0..k {
        for s in 0..n {
            for p in 0..plane {
                let x = src[(ki * n + s) * plane + p];
                let slot = &mut out[ki * plane + p];
                if x > *slot {
                    *slot = x;
                }
            }
        }
    }
    Tensor::new(&[k, h, w], out)
}

/// A normalization layer with its parameters and running statistics.
#[derive(Clone, Debug)]
pub struct GBatchNorm<T: Element = f64> {
    pub layer: GroupNormLayer,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningStats<T>,
}

impl<T: Element> GBatchNorm<T> {
    pub fn new(channels: usize, group: CyclicGroup) -> Self {
        let layer = GroupNormLayer::new(channels, group);
        let mut p = layer.init_params::<T>().into_iter();
        let (gamma, beta) = (p.next().unwrap(), p.next().unwrap());
        Self {
            layer,
            gamma,
            beta,
            running: RunningStats::new(channels),
        }
    }
}

/// Normalizes each channel over its fiber and positions. Training mode uses
/// the input's statistics and updates the running ones.
pub fn gbatchnorm<T: Element>(v: &GFeature<T>, state: &mut GBatchNorm<T>, training: bool) -> Result<GFeature<T>> {
    ensure!(v.group == state.layer.group, "group mismatch in normalization");
    let (k, n, h, w) = v.dims();
    let mut tape = Tape::<T>::new();
    let x = tape.constant(v.data.clone().reshape(&[1, k * n, h, w])?);
    let g = tape.constant(state.gamma.clone());
    let b = tape.constant(state.beta.clone());
    let y = state.layer.forward(&mut tape, x, g, b, &mut state.running, training)?;
    GFeature::new(tape.value(y).clone().reshape(&[k, n, h, w])?, v.group)
}

/// Rotates every channel of a square `[C, H, W]` image about its center.
pub fn rotate_image<T: Element>(image: &Tensor<T>, turn: Turn) -> Result<Tensor<T>> {
    ensure!(
        image.rank() == 3 && image.shape()[1] == image.shape()[2],
        "image must be square [C,H,W], got {:?}",
        image.shape()
    );
    let n = image.shape()[1];
    let op = rotation_operator(n, turn);
    let out: Vec<T> = image.data().chunks(n * n).flat_map(|c| op.apply(c)).collect();
    Tensor::new(image.shape(), out)
}

/// Pixels of an `n x n` map compared by [`equivariance_error`]: the square
/// trimmed by `border`, further restricted to the inscribed disk when the
/// rotation is not a multiple of a quarter turn.
pub fn interior_mask(n: usize, border: usize, turn: Turn) -> Vec<bool> {
    let disk = disk_mask(n);
    (0..n * n)
        .map(|p| {
            let (i, j) = (p / n, p % n);
            let inside = i >= border && j >= border && i + border < n && j + border < n;
            inside && (turn.is_quarter_multiple() || disk[p])
        })
        .collect()
}

/// Maximum interior deviation between `extract(rotate(image))` and the
/// rotated features `extract(image)`, relative to the largest feature
/// magnitude.
///
/// The rotation acts on the features with fiber shift `steps * N / order`,
/// which must be an integer; trivial fibers (`N = 1`) accept any angle.
pub fn equivariance_error<T: Element>(
    extract: impl Fn(&Tensor<T>) -> Result<GFeature<T>>,
    image: &Tensor<T>,
    turn: Turn,
    border: usize,
) -> Result<f64> {
    let base = extract(image)?;
    let moved = extract(&rotate_image(image, turn)?)?;
    transport_error(&base, &moved, turn, border)
}

/// The comparison behind [`equivariance_error`] for precomputed features of
/// an image (`base`) and of its rotation (`moved`).
pub fn transport_error<T: Element>(base: &GFeature<T>, moved: &GFeature<T>, turn: Turn, border: usize) -> Result<f64> {
    ensure!(base.group == moved.group, "features come from different groups");
    ensure!(base.dims() == moved.dims(), "extractor output shape changed under rotation");
    let n = base.group.order();
    let fiber = if n == 1 { 0 } else { turn.steps * n };
    if fiber % turn.order != 0 {
        return Err(Error::contract(format!(
            "rotation {}/{} of a turn is not an element of C_{n}",
            turn.steps, turn.order
        )));
    }
    let expected = act(base, turn, fiber / turn.order, [0, 0])?;
    let (_, _, h, w) = base.dims();
    ensure!(h == w, "features must be square, got {h}x{w}");
    let mask = interior_mask(h, border, turn);
    let scale = base.data.max_abs().as_f64();
    let mut worst = 0.0f64;
    for (p, (a, b)) in moved.data.data().iter().zip(expected.data.data()).enumerate() {
        if mask[p % (h * w)] {
            worst = worst.max((*a - *b).abs().as_f64());
        }
    }
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(n: usize) -> CyclicGroup {
        CyclicGroup::new(n).unwrap()
    }

    #[test]
    fn kernel_rotation_examples() {
        let k = Tensor::<f64>::from_fn(&[3, 3], |i| (i + 1) as f64);
        assert_eq!(rotate_kernel(&k, 0, c(4)).unwrap(), k);
        let r = rotate_kernel(&k, 1, c(4)).unwrap();
        assert_eq!(r.data(), &[3.0, 6.0, 9.0, 2.0, 5.0, 8.0, 1.0, 4.0, 7.0]);
        assert_eq!(rotate_kernel(&k, 2, c(8)).unwrap(), r);
        assert!(rotate_kernel(&Tensor::<f64>::zeros(&[2, 2]), 0, c(4)).is_err());
        assert!(rotate_kernel(&k, 4, c(4)).is_err());
    }

    #[test]
    fn masked_corners_stay_zero() {
        let k = Tensor::<f64>::full(&[5, 5], 1.0);
        let r = rotate_kernel(&k, 1, c(8)).unwrap();
        for p in [0, 4, 20, 24] {
            assert_eq!(r.data()[p], 0.0);
        }
        let g = GKernel::lifting(Tensor::<f64>::full(&[1, 1, 5, 5], 1.0), c(4)).unwrap();
        assert_eq!(g.weights().sum(), 21.0);
    }

    #[test]
    fn action_cycles_back() {
        let v = GFeature::new(Tensor::<f64>::from_fn(&[2, 4, 5, 5], |i| i as f64), c(4)).unwrap();
        let mut w = v.clone();
        for _ in 0..4 {
            w = feature_action(&w, 1, [0, 0]).unwrap();
        }
        assert_eq!(w, v);
        assert_eq!(feature_action(&v, 0, [0, 0]).unwrap(), v);
    }

    #[test]
    fn shift_moves_right_and_up() {
        let mut d = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        d.data_mut()[4] = 1.0;
        let v = GFeature::new(d, c(1)).unwrap();
        let s = feature_action(&v, 0, [1, 1]).unwrap();
        assert_eq!(s.data().data()[2], 1.0);
    }

    #[test]
    fn csv_header_and_rows() {
        let v = GFeature::new(Tensor::<f64>::from_fn(&[1, 2, 1, 2], |i| i as f64), c(2)).unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "k,n,y,x,value");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "0,1,0,1,3");
    }

    #[test]
    fn zero_turn_has_zero_error() {
        let img = Tensor::<f64>::from_fn(&[1, 7, 7], |i| (i as f64 * 0.3).sin());
        let k = GKernel::lifting(Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 - 4.0), c(4)).unwrap();
        let e = equivariance_error(|x| lift_conv(x, &k), &img, Turn::identity(), 1).unwrap();
        assert_eq!(e, 0.0);
    }
}
