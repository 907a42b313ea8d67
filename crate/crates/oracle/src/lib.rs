//! Slow, obviously-correct reference computations for the test suites.
//!
//! Nothing here shares code with `epose-core`: inputs and outputs are plain
//! `f64` slices in row-major order.

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Direct cross-correlation with zero padding, `[B,C,H,W]` by `[O,C,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    pad: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xv = x[((bi * c + ic) * h + y as usize) * w + xx as usize];
                                let kv = k[((oc * c + ic) * kh + u) * kw + v];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// `W x + b` by explicit dot products.
pub fn naive_linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..b.len())
        .map(|i| b[i] + (0..n).map(|j| w[i * n + j] * x[j]).sum::<f64>())
        .collect()
}

/// Per-pixel maximum over the fiber axis of a `[K,N,H,W]` array.
pub fn naive_fiber_max(v: &[f64], (k, n, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; k * h * w];
    for ki in 0..k {
        for s in 0..n {
            for p in 0..h * w {
                let val = v[(ki * n + s) * h * w + p];
                let slot = &mut out[ki * h * w + p];
                if val > *slot {
                    *slot = val;
                }
            }
        }
    }
    out
}

/// Median with the mean of the central pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = v.len();
    assert!(n > 0);
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rotation angle in degrees between two rotation matrices, from the trace
/// of `A^T B`.
pub fn rotation_angle_deg(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
    let mut trace = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            trace += a[k][i] * b[k][i];
        }
    }
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Quarter-turn counter-clockwise rotation (as displayed, row 0 on top) of a
/// square `n x n` array, by explicit index arithmetic.
pub fn rot90_ccw(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = a[j * n + (n - 1 - i)];
        }
    }
    out
}
