use std::f64::consts::TAU;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::{fan_in_init, Element, KernelMap, Tape, Tensor, Var};

/// How the orientation branch handles the rotation carried by the fiber.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameMode {
    /// Both branches read rotation-invariant features only.
    None,
    /// The orientation is the residual prediction rotated by the angle of
    /// the fiber's first circular harmonic, which turns with the input.
    Harmonic,
}

impl std::str::FromStr for FrameMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FrameMode::None),
            "harmonic" => Ok(FrameMode::Harmonic),
            _ => Err(Error::contract(format!(
                "unknown frame mode `{s}` (expected none or harmonic)"
            ))),
        }
    }
}

impl FrameMode {
    pub fn name(&self) -> &'static str {
        match self {
            FrameMode::None => "none",
            FrameMode::Harmonic => "harmonic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Width of both embedding layers.
    pub embed: usize,
    pub frame: FrameMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            embed: 128,
            frame: FrameMode::Harmonic,
        }
    }
}

/// Position and orientation branches over globally pooled features.
///
/// Each branch is `b + P * E(v)` with a two-layer ELU embedding `E`. For a
/// non-trivial group, `v` concatenates the spatial mean of the fiber maximum,
/// the fiber mean and the magnitudes of the fiber's circular harmonics
/// `1..=N/2`, all invariant to the group.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    cfg: HeadConfig,
    blocks: usize,
    group: usize,
    harmonic: Option<Arc<KernelMap>>,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

const BRANCHES: [(&str, usize); 2] = [("t", 3), ("q", 4)];

impl RegressionHead {
    pub fn new(cfg: &HeadConfig, blocks: usize, group: usize) -> Result<Self> {
        ensure!(cfg.embed >= 1, "embedding width must be positive");
        let frame = cfg.frame == FrameMode::Harmonic && group >= 3;
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let inv = if group == 1 { blocks } else { (2 + group / 2) * blocks };
        for (b, out) in BRANCHES {
            for (name, shape) in [
                ("embed0.weight", vec![cfg.embed, inv]),
                ("embed0.bias", vec![cfg.embed]),
                ("embed1.weight", vec![cfg.embed, cfg.embed]),
                ("embed1.bias", vec![cfg.embed]),
                ("proj.weight", vec![out, cfg.embed]),
                ("proj.bias", vec![out]),
            ] {
                names.push(format!("head.{b}.{name}"));
                shapes.push(shape);
            }
        }
        if frame {
            names.push("head.harmonic".into());
            shapes.push(vec![blocks, 2]);
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            group,
            harmonic: frame.then(|| Arc::new(harmonic_map(blocks, group))),
            names,
            shapes,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn has_frame(&self) -> bool {
        self.harmonic.is_some()
    }

    pub fn init_params<T: Element>(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
        self.names
            .iter()
            .zip(&self.shapes)
            .map(|(name, shape)| {
                if name.ends_with("proj.weight") {
                    // Small projections start the pose near the biases.
                    fan_in_init::<T>(shape, shape[1], rng).map(|v| v * T::of(0.1))
                } else if name.ends_with(".weight") {
                    fan_in_init::<T>(shape, shape[1], rng)
                } else if name == "head.q.proj.bias" {
                    Tensor::from_f64(shape, &[1.0, 0.0, 0.0, 0.0]).expect("4 entries")
                } else if name == "head.harmonic" {
                    fan_in_init::<T>(shape, 2, rng)
                } else {
                    Tensor::zeros(shape)
                }
            })
            .collect()
    }

    pub fn count_params(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = BRANCHES
            .iter()
            .enumerate()
            .map(|(i, (b, _))| {
                let n = self.shapes[i * 6..(i + 1) * 6]
                    .iter()
                    .map(|s| s.iter().product::<usize>())
                    .sum();
                (format!("head.{b}"), n)
            })
            .collect();
        if self.has_frame() {
            out.push(("head.harmonic".into(), 2 * self.blocks));
        }
        out
    }

    fn branch<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], inv: Var) -> Result<Var> {
        let h = tape.linear(inv, p[0], p[1])?;
        let h = tape.elu(h, T::one())?;
        let h = tape.linear(h, p[2], p[3])?;
        let h = tape.elu(h, T::one())?;
        tape.linear(h, p[4], p[5])
    }

    /// Position `[B,3]` and raw orientation `[B,4]` from `[B, K*N, h, w]`
    /// backbone features.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, params: &[Var], feats: Var) -> Result<(Var, Var)> {
        ensure!(params.len() == self.names.len(), "head parameter count mismatch");
        let s = tape.value(feats).shape().to_vec();
        let (k, n) = (self.blocks, self.group);
        ensure!(
            s.len() == 4 && s[1] == k * n,
            "head expects [B,{},h,w] features, got {s:?}",
            k * n
        );
        let (b, plane) = (s[0], s[2] * s[3]);
        let pooled = tape.mean_inner(feats, plane, &[b, k * n])?;
        let inv = if n == 1 {
            pooled
        } else {
            let fibered = tape.reshape(feats, &[b, k, n, plane])?;
            let fmax = tape.max_over_axis(fibered, 2)?;
            let gp = tape.mean_inner(fmax, plane, &[b, k])?;
            let fmean = tape.mean_inner(pooled, n, &[b, k])?;
            let fibers = tape.reshape(pooled, &[b * k, n])?;
            let dft = tape.constant(spectrum_matrix(n));
            let zero = tape.constant(Tensor::zeros(&[2 * (n / 2)]));
            let coeffs = tape.linear(fibers, dft, zero)?;
            let pairs = tape.reshape(coeffs, &[b * k * (n / 2), 2])?;
            let mags = tape.row_norm(pairs)?;
            let mags = tape.reshape(mags, &[b, k * (n / 2)])?;
            let both = tape.concat(gp, fmean)?;
            tape.concat(both, mags)?
        };
        let t = self.branch(tape, &params[0..6], inv)?;
        let q = self.branch(tape, &params[6..12], inv)?;
        let Some(map) = &self.harmonic else {
            return Ok((t, q));
        };
        let w = tape.expand_kernel(params[12], map.clone())?;
        let zero = tape.constant(Tensor::zeros(&[2]));
        let z = tape.linear(pooled, w, zero)?;
        let frame = tape.planar_quat(z)?;
        Ok((t, tape.quat_mul(frame, q)?))
    }
}

/// `[2M, N]` rows computing the real and imaginary parts of the circular
/// harmonics `1..=M`, `M = N/2`, scaled by `1/N`.
fn spectrum_matrix<T: Element>(n: usize) -> Tensor<T> {
    let m = n / 2;
    Tensor::from_fn(&[2 * m, n], |i| {
        let (row, s) = (i / n, i % n);
        let phase = TAU * ((row / 2 + 1) * s) as f64 / n as f64;
        let v = if row % 2 == 0 { phase.cos() } else { -phase.sin() };
        T::of(v / n as f64)
    })
}

/// `[K,2]` complex weights `(a_k, b_k)` to the `[2, K*N]` matrix computing
/// the real and imaginary parts of `sum (a_k + i b_k) f[k,s] e^{-2 pi i s / N}`.
fn harmonic_map(blocks: usize, n: usize) -> KernelMap {
    let mut entries = Vec::new();
    for k in 0..blocks {
        for s in 0..n {
            let (sin, cos) = (TAU * s as f64 / n as f64).sin_cos();
            let col = (k * n + s) as u32;
            let width = (blocks * n) as u32;
            let (a, b) = ((k * 2) as u32, (k * 2 + 1) as u32);
            entries.push((col, a, cos));
            entries.push((col, b, sin));
            entries.push((width + col, a, -sin));
            entries.push((width + col, b, cos));
        }
    }
    KernelMap {
        base_shape: vec![blocks, 2],
        full_shape: vec![2, blocks * n],
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_turns_with_fiber_shift() {
        let (k, n) = (2, 8);
        let map = harmonic_map(k, n);
        let w = map.apply(&Tensor::<f64>::from_f64(&[2, 2], &[0.7, -0.2, 0.1, 0.4]).unwrap()).unwrap();
        let f: Vec<f64> = (0..k * n).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        let z = |f: &[f64]| -> (f64, f64) {
            let d = w.data();
            let re = (0..k * n).map(|i| d[i] * f[i]).sum::<f64>();
            let im = (0..k * n).map(|i| d[k * n + i] * f[i]).sum::<f64>();
            (re, im)
        };
        let mut shifted = vec![0.0; k * n];
        for kk in 0..k {
            for s in 0..n {
                shifted[kk * n + (s + 1) % n] = f[kk * n + s];
            }
        }
        let (a, b) = (z(&f), z(&shifted));
        let turn = b.1.atan2(b.0) - a.1.atan2(a.0);
        let expected = -TAU / n as f64;
        let diff = crate::geom::normalize_angle(turn - expected);
        assert!(diff.abs() < 1e-12, "{turn}");
    }

    #[test]
    fn spectrum_is_shift_invariant() {
        let n = 8;
        let w = spectrum_matrix::<f64>(n);
        let f: Vec<f64> = (0..n).map(|i| ((i * 5) % 7) as f64 - 2.5).collect();
        let mags = |f: &[f64]| -> Vec<f64> {
            let d = w.data();
            (0..n / 2)
                .map(|m| {
                    let re: f64 = (0..n).map(|s| d[2 * m * n + s] * f[s]).sum();
                    let im: f64 = (0..n).map(|s| d[(2 * m + 1) * n + s] * f[s]).sum();
                    re.hypot(im)
                })
                .collect()
        };
        let shifted: Vec<f64> = (0..n).map(|s| f[(s + n - 3) % n]).collect();
        for (a, b) in mags(&f).iter().zip(mags(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_needs_three_orientations() {
        let cfg = HeadConfig::default();
        assert!(!RegressionHead::new(&cfg, 4, 1).unwrap().has_frame());
        assert!(!RegressionHead::new(&cfg, 4, 2).unwrap().has_frame());
        assert!(RegressionHead::new(&cfg, 4, 4).unwrap().has_frame());
    }
}
