//! Pose accuracy summaries.

use crate::error::{ensure, Result};
use crate::geom::Se3Pose;

/// Median of finite values; an even count averages the central pair.
pub fn median(values: &[f64]) -> Result<f64> {
    ensure!(!values.is_empty(), "median of an empty set");
    ensure!(values.iter().all(|v| v.is_finite()), "median of non-finite values");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Position error in meters and orientation error in degrees of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleError {
    pub t_m: f64,
    pub r_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseReport {
    pub median_t_m: f64,
    pub median_r_deg: f64,
    /// Fraction of samples within both thresholds.
    pub accuracy: f64,
    pub per_sample: Vec<SampleError>,
}

pub fn sample_errors(pred: &[Se3Pose], gt: &[Se3Pose]) -> Result<Vec<SampleError>> {
    ensure!(
        pred.len() == gt.len(),
        "{} predictions for {} ground-truth poses",
        pred.len(),
        gt.len()
    );
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| SampleError {
            t_m: p.position_error(g),
            r_deg: p.orientation_error_deg(g),
        })
        .collect())
}

/// Medians and the conjunctive accuracy at `(t_thresh meters, r_thresh degrees)`.
pub fn evaluate(pred: &[Se3Pose], gt: &[Se3Pose], t_thresh: f64, r_thresh: f64) -> Result<PoseReport> {
    let per_sample = sample_errors(pred, gt)?;
    ensure!(!per_sample.is_empty(), "cannot evaluate zero samples");
    let t: Vec<f64> = per_sample.iter().map(|e| e.t_m).collect();
    let r: Vec<f64> = per_sample.iter().map(|e| e.r_deg).collect();
    let hits = per_sample
        .iter()
        .filter(|e| e.t_m <= t_thresh && e.r_deg <= r_thresh)
        .count();
    Ok(PoseReport {
        median_t_m: median(&t)?,
        median_r_deg: median(&r)?,
        accuracy: hits as f64 / per_sample.len() as f64,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Quat;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn accuracy_is_conjunctive() {
        let gt = vec![Se3Pose::new([0.0; 3], Quat::about_z(0.0)); 3];
        let pred = vec![
            Se3Pose::new([0.05, 0.0, 0.0], Quat::about_z(0.0)),
            Se3Pose::new([0.0; 3], Quat::about_z(20f64.to_radians())),
            Se3Pose::new([0.2, 0.0, 0.0], Quat::about_z(0.0)),
        ];
        let r = evaluate(&pred, &gt, 0.1, 10.0).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12, "{r:?}");
        assert!((r.median_t_m - 0.05).abs() < 1e-12);
    }
}
