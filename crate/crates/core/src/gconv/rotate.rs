//! Rotations of square grids about their center.
//!
//! A rotation by `angle` splits into whole quarter turns, applied as exact
//! index permutations, and a residual below 90 degrees resampled
//! bilinearly. Rotations by the same residual therefore differ by exact
//! permutations: a quarter turn after a 45 degree resampling is the 135
//! degree resampling bit for bit.
//!
//! Angles are counter-clockwise with `x` to the right and `y` up (row 0 is
//! the top row), so one quarter turn maps `out[i][j] = in[j][n-1-i]`.

use std::f64::consts::TAU;

/// Rotation by `steps * 2pi / order`, kept as a rational fraction of a turn
/// so quarter turns are detected exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Turn {
    pub steps: usize,
    pub order: usize,
}

impl Turn {
    pub fn new(steps: usize, order: usize) -> Self {
        assert!(order >= 1, "rotation order must be positive");
        Self {
            steps: steps % order,
            order,
        }
    }

    pub fn identity() -> Self {
        Self::new(0, 1)
    }

    pub fn quarter_turns(q: usize) -> Self {
        Self::new(q, 4)
    }

    pub fn angle(&self) -> f64 {
        TAU * self.steps as f64 / self.order as f64
    }

    /// Whole quarter turns, and the residual as a fraction of a full turn
    /// `(numerator, denominator)`.
    fn split(&self) -> (usize, usize, usize) {
        let quarters = 4 * self.steps / self.order;
        let residual = 4 * self.steps - quarters * self.order;
        (quarters, residual, 4 * self.order)
    }

    pub fn is_quarter_multiple(&self) -> bool {
        self.split().1 == 0
    }
}

/// Linear operator on an `n x n` grid: for every output pixel, the source
/// pixels and weights it draws from.
#[derive(Clone, Debug)]
pub struct GridOperator {
    pub n: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl GridOperator {
    pub fn apply<T: crate::tensor::Element>(&self, src: &[T]) -> Vec<T> {
        self.taps
            .iter()
            .map(|taps| {
                taps.iter()
                    .fold(T::zero(), |acc, (i, w)| acc + T::of(*w) * src[*i])
            })
            .collect()
    }
}

/// Index of the source pixel for one counter-clockwise quarter turn.
fn quarter_source(n: usize, i: usize, j: usize) -> (usize, usize) {
    (j, n - 1 - i)
}

/// Bilinear resampling taps for a counter-clockwise rotation by `angle`.
/// Samples falling outside the grid read zero.
fn bilinear_taps(n: usize, angle: f64) -> Vec<Vec<(usize, f64)>> {
    let c = (n as f64 - 1.0) / 2.0;
    let (cos, sin) = (angle.cos(), angle.sin());
    let mut taps = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 - c, c - i as f64);
            // Inverse rotation gives the source position.
            let (sx, sy) = (cos * x + sin * y, -sin * x + cos * y);
            let (fj, fi) = (sx + c, c - sy);
            let (j0, i0) = (fj.floor(), fi.floor());
            let (aj, ai) = (fj - j0, fi - i0);
            let mut out = Vec::with_capacity(4);
            for (di, wi) in [(0.0, 1.0 - ai), (1.0, ai)] {
                for (dj, wj) in [(0.0, 1.0 - aj), (1.0, aj)] {
                    let (si, sj) = (i0 + di, j0 + dj);
                    let w = wi * wj;
                    if w == 0.0 || si < 0.0 || sj < 0.0 || si >= n as f64 || sj >= n as f64 {
                        continue;
                    }
                    out.push((si as usize * n + sj as usize, w));
                }
            }
            taps.push(out);
        }
    }
    taps
}

/// The rotation of an `n x n` grid as a linear operator.
pub fn rotation_operator(n: usize, turn: Turn) -> GridOperator {
    let (quarters, num, den) = turn.split();
    let mut taps: Vec<Vec<(usize, f64)>> = if num == 0 {
        (0..n * n).map(|p| vec![(p, 1.0)]).collect()
    } else {
        bilinear_taps(n, TAU * num as f64 / den as f64)
    };
    for _ in 0..quarters {
        taps = (0..n * n)
            .map(|p| {
                let (si, sj) = quarter_source(n, p / n, p % n);
                taps[si * n + sj].clone()
            })
            .collect();
    }
    GridOperator { n, taps }
}

/// Rotates one `n x n` map.
pub fn rotate_square<T: crate::tensor::Element>(src: &[T], n: usize, turn: Turn) -> Vec<T> {
    assert_eq!(src.len(), n * n, "rotate_square needs an n x n map");
    rotation_operator(n, turn).apply(src)
}

/// Pixels inside the disk inscribed in an `n x n` grid.
pub fn disk_mask(n: usize) -> Vec<bool> {
    let c = (n as f64 - 1.0) / 2.0;
    let r2 = (n as f64 / 2.0).powi(2);
    (0..n * n)
        .map(|p| {
            let (i, j) = ((p / n) as f64, (p % n) as f64);
            (i - c).powi(2) + (j - c).powi(2) <= r2 + 1e-12
        })
        .collect()
}
