//! Planar rigid motions, quaternion utilities and the pinhole model of a
//! camera looking at a fronto-parallel scene plane.
//!
//! Image-plane coordinates use `x` to the right and `y` up, with the origin
//! on the optical axis. A camera motion `(R, t)` maps a point `p` to
//! `R^T (p - t)`; composing `m1` then `m2` gives `(R1 R2, t1 + R1 t2)`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{ensure, Error, Result};

/// Which space a planar motion lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Frame {
    /// Meters on the scene plane.
    Scene,
    /// Image-plane units (pixels).
    Image,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let a = theta.rem_euclid(TAU);
    if a > PI {
        a - TAU
    } else {
        a
    }
}

/// `(cos, sin)` with exact values at multiples of a quarter turn, so that
/// quarter-turn motions act on pixel grids as exact permutations.
pub fn cos_sin(theta: f64) -> (f64, f64) {
    let quarters = theta / FRAC_PI_2;
    let nearest = quarters.round();
    if (quarters - nearest).abs() < 1e-12 {
        match (nearest as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        (theta.cos(), theta.sin())
    }
}

fn rotate2(theta: f64, v: [f64; 2]) -> [f64; 2] {
    let (c, s) = cos_sin(theta);
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// A rigid motion of the plane: roll angle about the optical axis plus a
/// planar translation, tagged with the frame it is expressed in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se2Motion {
    theta: f64,
    t: [f64; 2],
    frame: Frame,
}

impl Se2Motion {
    pub fn new(theta: f64, t: [f64; 2], frame: Frame) -> Self {
        Self {
            theta: normalize_angle(theta),
            t,
            frame,
        }
    }

    pub fn identity(frame: Frame) -> Self {
        Self::new(0.0, [0.0, 0.0], frame)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn translation(&self) -> [f64; 2] {
        self.t
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    /// Row-major 2x2 rotation matrix.
    pub fn rotation(&self) -> [[f64; 2]; 2] {
        let (c, s) = cos_sin(self.theta);
        [[c, -s], [s, c]]
    }

    fn expect_frame(&self, frame: Frame) -> Result<()> {
        ensure!(
            self.frame == frame,
            "motion is tagged {:?}, expected {:?}",
            self.frame,
            frame
        );
        Ok(())
    }
}

/// Applies `m1` then `m2` to the camera.
pub fn se2_compose(m1: &Se2Motion, m2: &Se2Motion) -> Result<Se2Motion> {
    ensure!(
        m1.frame == m2.frame,
        "cannot compose a {:?} motion with a {:?} motion",
        m1.frame,
        m2.frame
    );
    let r1t2 = rotate2(m1.theta, m2.t);
    Ok(Se2Motion::new(
        m1.theta + m2.theta,
        [m1.t[0] + r1t2[0], m1.t[1] + r1t2[1]],
        m1.frame,
    ))
}

pub fn se2_inverse(m: &Se2Motion) -> Se2Motion {
    let rt = rotate2(-m.theta, m.t);
    Se2Motion::new(-m.theta, [-rt[0], -rt[1]], m.frame)
}

/// Effect of a scene-frame camera motion on a 3D point: `R^T (p - (T_X, T_Y, 0))`.
pub fn scene_action(m: &Se2Motion, p: [f64; 3]) -> Result<[f64; 3]> {
    m.expect_frame(Frame::Scene)?;
    let q = rotate2(-m.theta, [p[0] - m.t[0], p[1] - m.t[1]]);
    Ok([q[0], q[1], p[2]])
}

/// Focal distance and scene-plane depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    f: f64,
    z0: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, z0: f64) -> Result<Self> {
        ensure!(f > 0.0 && f.is_finite(), "focal distance must be positive, got {f}");
        ensure!(z0 > 0.0 && z0.is_finite(), "scene depth must be positive, got {z0}");
        Ok(Self { f, z0 })
    }

    pub fn f(&self) -> f64 {
        self.f
    }

    pub fn z0(&self) -> f64 {
        self.z0
    }

    /// Image-plane units per scene meter on the scene plane.
    pub fn scale(&self) -> f64 {
        self.f / self.z0
    }
}

/// Induced image-plane motion of a scene-frame camera motion: same roll,
/// translation scaled by `f / Z0`.
pub fn motion_to_image(m: &Se2Motion, cam: &CameraIntrinsics) -> Result<Se2Motion> {
    m.expect_frame(Frame::Scene)?;
    let s = cam.scale();
    Ok(Se2Motion::new(m.theta, [s * m.t[0], s * m.t[1]], Frame::Image))
}

/// `R^T (p - t)` for an image-frame motion.
pub fn image_point_action(m: &Se2Motion, p: [f64; 2]) -> Result<[f64; 2]> {
    m.expect_frame(Frame::Image)?;
    Ok(rotate2(-m.theta, [p[0] - m.t[0], p[1] - m.t[1]]))
}

/// Unit quaternion `(w, x, y, z)` kept in the `w >= 0` hemisphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat([f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    /// Normalizes and moves to the canonical hemisphere.
    pub fn new(q: [f64; 4]) -> Result<Self> {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(
            n.is_finite() && n > 1e-12,
            "quaternion {q:?} has zero or non-finite norm"
        );
        // Leave rounding-level deviations alone so normalizing is idempotent.
        let q = if (n - 1.0).abs() <= 4.0 * f64::EPSILON { q } else { q.map(|v| v / n) };
        Ok(Self(canonical_hemisphere(q)))
    }

    /// Rotation by `theta` about the optical axis.
    pub fn about_z(theta: f64) -> Self {
        let (c, s) = cos_sin(theta / 2.0);
        Self(canonical_hemisphere([c, 0.0, 0.0, s]))
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }

    pub fn w(&self) -> f64 {
        self.0[0]
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }
}

fn canonical_hemisphere(q: [f64; 4]) -> [f64; 4] {
    let flip = if q[0] != 0.0 {
        q[0] < 0.0
    } else {
        q[1..].iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0)
    };
    if flip {
        q.map(|v| -v)
    } else {
        q
    }
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn inverse(a: &Mat3) -> Option<Mat3> {
    let d = det(a);
    if d.abs() < 1e-300 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / d;
        }
    }
    Some(inv)
}

fn orthonormality_defect(r: &Mat3) -> f64 {
    let rtr = mat_mul(&transpose(r), r);
    let mut worst = 0.0f64;
    for (i, row) in rtr.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
    }
    worst
}

/// Nearest rotation by Newton iteration on the polar decomposition,
/// `R <- (R + R^-T) / 2`.
pub fn nearest_rotation(r: &Mat3) -> Result<Mat3> {
    let mut cur = *r;
    for _ in 0..50 {
        let inv_t = transpose(
            &inverse(&cur).ok_or_else(|| Error::contract("matrix is singular"))?,
        );
        let mut next = [[0.0; 3]; 3];
        let mut change = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] = 0.5 * (cur[i][j] + inv_t[i][j]);
                change = change.max((next[i][j] - cur[i][j]).abs());
            }
        }
        cur = next;
        if change < 1e-15 {
            break;
        }
    }
    Ok(cur)
}

/// Rotation matrix to canonical unit quaternion. Inputs up to `1e-6` away
/// from orthonormal are projected onto the nearest rotation first.
pub fn quat_from_matrix(r: &Mat3) -> Result<Quat> {
    ensure!(
        r.iter().flatten().all(|v| v.is_finite()),
        "rotation matrix has non-finite entries"
    );
    let defect = orthonormality_defect(r);
    ensure!(
        defect <= 1e-6,
        "matrix is not a rotation: |R^T R - I| = {defect:.3e} exceeds 1e-6"
    );
    ensure!(det(r) > 0.0, "matrix is a reflection (negative determinant)");
    let m = nearest_rotation(r)?;

    // Shepperd: pivot on the largest diagonal term for stability.
    let trace = m[0][0] + m[1][1] + m[2][2];
    let q = if trace >= m[0][0] && trace >= m[1][1] && trace >= m[2][2] {
        let s = (1.0 + trace).sqrt() * 2.0;
        [
            0.25 * s,
            (m[2][1] - m[1][2]) / s,
            (m[0][2] - m[2][0]) / s,
            (m[1][0] - m[0][1]) / s,
        ]
    } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [
            (m[2][1] - m[1][2]) / s,
            0.25 * s,
            (m[0][1] + m[1][0]) / s,
            (m[0][2] + m[2][0]) / s,
        ]
    } else if m[1][1] >= m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [
            (m[0][2] - m[2][0]) / s,
            (m[0][1] + m[1][0]) / s,
            0.25 * s,
            (m[1][2] + m[2][1]) / s,
        ]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [
            (m[1][0] - m[0][1]) / s,
            (m[0][2] + m[2][0]) / s,
            (m[1][2] + m[2][1]) / s,
            0.25 * s,
        ]
    };
    Quat::new(q)
}

pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let [w, x, y, z] = q.0;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Geodesic angle between two rotations in degrees, in `[0, 180]`.
///
/// Evaluates `2 acos(|<a, b>|)` as `4 atan2(|a - s b|, |a + s b|)` with
/// `s = sign(<a, b>)`, which stays accurate for nearly equal rotations.
pub fn quat_angle_deg(a: &Quat, b: &Quat) -> f64 {
    let s = if a.dot(b) < 0.0 { -1.0 } else { 1.0 };
    let (mut diff, mut sum) = (0.0, 0.0);
    for (p, q) in a.0.iter().zip(b.0.iter()) {
        diff += (p - s * q).powi(2);
        sum += (p + s * q).powi(2);
    }
    (4.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees()
}

/// Camera pose: position in meters and orientation as a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3Pose {
    pub t: [f64; 3],
    pub q: Quat,
}

impl Se3Pose {
    pub fn new(t: [f64; 3], q: Quat) -> Self {
        Self { t, q }
    }

    /// Lifts a scene-frame planar motion to 3D: `t = (T_X, T_Y, 0)`, roll about z.
    pub fn from_planar(m: &Se2Motion) -> Result<Self> {
        m.expect_frame(Frame::Scene)?;
        Ok(Self {
            t: [m.t[0], m.t[1], 0.0],
            q: Quat::about_z(m.theta),
        })
    }

    pub fn position_error(&self, other: &Se3Pose) -> f64 {
        (0..3)
            .map(|i| (self.t[i] - other.t[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn orientation_error_deg(&self, other: &Se3Pose) -> f64 {
        quat_angle_deg(&self.q, &other.q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    /// 3x3 homogeneous matrix of the camera-to-reference transform; applying
    /// `m1` then `m2` corresponds to the product `H(m1) H(m2)`.
    fn homogeneous(m: &Se2Motion) -> [[f64; 3]; 3] {
        let (c, s) = (m.theta.cos(), m.theta.sin());
        [[c, -s, m.t[0]], [s, c, m.t[1]], [0.0, 0.0, 1.0]]
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn motion() -> impl Strategy<Value = Se2Motion> {
        (-10.0..10.0f64, -5.0..5.0f64, -5.0..5.0f64)
            .prop_map(|(th, x, y)| Se2Motion::new(th, [x, y], Frame::Image))
    }

    fn same_motion(a: &Se2Motion, b: &Se2Motion, tol: f64) -> bool {
        let dth = normalize_angle(a.theta - b.theta).abs();
        dth <= tol && close(a.t[0], b.t[0], tol) && close(a.t[1], b.t[1], tol)
    }

    #[test]
    fn normalize_angle_ties_to_plus_pi() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert_eq!(normalize_angle(3.0 * PI), PI);
        assert!(close(normalize_angle(deg(270.0)), deg(-90.0), 1e-12));
    }

    #[test]
    fn compose_examples() {
        let id = Se2Motion::identity(Frame::Scene);
        let g = Se2Motion::new(0.3, [1.0, -2.0], Frame::Scene);
        assert!(same_motion(&se2_compose(&id, &g).unwrap(), &g, 0.0));

        let m = Se2Motion::new(deg(90.0), [1.0, 0.0], Frame::Scene);
        let c = se2_compose(&m, &m).unwrap();
        let h = homogeneous(&m);
        let mut hh = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                hh[i][j] = (0..3).map(|k| h[i][k] * h[k][j]).sum();
            }
        }
        assert!(close(c.theta, PI, 1e-12));
        assert!(close(c.t[0], hh[0][2], 1e-12) && close(c.t[1], hh[1][2], 1e-12));
        assert!(close(c.t[0], 1.0, 1e-12) && close(c.t[1], 1.0, 1e-12));

        let e = se2_compose(&g, &se2_inverse(&g)).unwrap();
        assert!(same_motion(&e, &id, 1e-12));
    }

    #[test]
    fn compose_rejects_mixed_frames() {
        let a = Se2Motion::identity(Frame::Scene);
        let b = Se2Motion::identity(Frame::Image);
        assert!(matches!(se2_compose(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn inverse_examples() {
        let id = Se2Motion::identity(Frame::Image);
        assert!(same_motion(&se2_inverse(&id), &id, 0.0));
        let m = Se2Motion::new(deg(90.0), [1.0, 0.0], Frame::Image);
        let inv = se2_inverse(&m);
        assert!(close(inv.theta, deg(-90.0), 1e-12));
        assert!(close(inv.t[0], 0.0, 1e-12) && close(inv.t[1], 1.0, 1e-12));
    }

    #[test]
    fn scene_action_examples() {
        let p = [0.4, -1.2, 5.0];
        assert_eq!(scene_action(&Se2Motion::identity(Frame::Scene), p).unwrap(), p);
        let shift = Se2Motion::new(0.0, [1.0, 2.0], Frame::Scene);
        assert_eq!(scene_action(&shift, [1.0, 2.0, 5.0]).unwrap(), [0.0, 0.0, 5.0]);
        let rot = Se2Motion::new(deg(90.0), [0.0, 0.0], Frame::Scene);
        let out = scene_action(&rot, [1.0, 0.0, 5.0]).unwrap();
        // R^T with R = [[0,-1],[1,0]].
        let expected = [0.0 * 1.0 + 1.0 * 0.0, -1.0 * 1.0 + 0.0 * 0.0, 5.0];
        for i in 0..3 {
            assert!(close(out[i], expected[i], 1e-15));
        }
        let img = Se2Motion::identity(Frame::Image);
        assert!(scene_action(&img, p).is_err());
    }

    #[test]
    fn motion_to_image_examples() {
        let cam = CameraIntrinsics::new(1.0, 2.0).unwrap();
        let m = Se2Motion::new(deg(30.0), [0.0, 0.0], Frame::Scene);
        let im = motion_to_image(&m, &cam).unwrap();
        assert_eq!(im.frame(), Frame::Image);
        assert!(close(im.theta, deg(30.0), 1e-15) && im.t == [0.0, 0.0]);

        let m = Se2Motion::new(0.0, [4.0, -2.0], Frame::Scene);
        assert_eq!(motion_to_image(&m, &cam).unwrap().t, [2.0, -1.0]);

        // Project two scene points before and after the motion and fit the
        // rigid image motion that explains them.
        let cam = CameraIntrinsics::new(2.0, 4.0).unwrap();
        let m = Se2Motion::new(deg(30.0), [3.0, 1.0], Frame::Scene);
        let project = |p: [f64; 3]| [cam.f() * p[0] / cam.z0(), cam.f() * p[1] / cam.z0()];
        let (a, b) = ([0.0, 0.0, 4.0], [2.0, 0.0, 4.0]);
        let (a0, b0) = (project(a), project(b));
        let (a1, b1) = (
            project(scene_action(&m, a).unwrap()),
            project(scene_action(&m, b).unwrap()),
        );
        // p' = R^T (p - t): the rotation from the direction change, then
        // t = p - R p'.
        let th0 = (b0[1] - a0[1]).atan2(b0[0] - a0[0]);
        let th1 = (b1[1] - a1[1]).atan2(b1[0] - a1[0]);
        let theta = th0 - th1;
        let (c, s) = (theta.cos(), theta.sin());
        let t = [a0[0] - (c * a1[0] - s * a1[1]), a0[1] - (s * a1[0] + c * a1[1])];
        let im = motion_to_image(&m, &cam).unwrap();
        assert!(close(im.theta, theta, 1e-12));
        assert!(close(im.t[0], t[0], 1e-12) && close(im.t[1], t[1], 1e-12));
        assert!(close(im.t[0], 1.5, 1e-12) && close(im.t[1], 0.5, 1e-12));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0).is_err());
    }

    #[test]
    fn image_point_action_examples() {
        let p = [0.25, -3.0];
        assert_eq!(
            image_point_action(&Se2Motion::identity(Frame::Image), p).unwrap(),
            p
        );
        let m = Se2Motion::new(deg(90.0), [1.0, 0.0], Frame::Image);
        let out = image_point_action(&m, [1.0, 1.0]).unwrap();
        assert!(close(out[0], 1.0, 1e-15) && close(out[1], 0.0, 1e-15));
    }

    #[test]
    fn quaternion_examples() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let q = quat_from_matrix(&id).unwrap();
        assert_eq!(q.as_array(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(quat_angle_deg(&q, &q), 0.0);

        let rz180 = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
        let q = quat_from_matrix(&rz180).unwrap();
        for (a, b) in q.as_array().iter().zip([0.0, 0.0, 0.0, 1.0]) {
            assert!(close(*a, b, 1e-15));
        }
        let neg = Quat(q.as_array().map(|v| -v));
        assert_eq!(quat_angle_deg(&q, &neg), 0.0);
    }

    #[test]
    fn hemisphere_is_canonical() {
        let q = Quat::new([-0.5, 0.5, -0.5, 0.5]).unwrap();
        assert!(q.w() > 0.0);
        let q = Quat::new([0.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(q.as_array(), [0.0, 0.0, 1.0, 0.0]);
        assert!(Quat::new([0.0; 4]).is_err());
    }

    #[test]
    fn quat_from_matrix_rejects_non_rotations() {
        let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        r[0][1] = 1e-3;
        assert!(matches!(quat_from_matrix(&r), Err(Error::Contract(_))));
        let refl = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(quat_from_matrix(&refl).is_err());
    }

    #[test]
    fn slightly_noisy_matrix_is_projected() {
        let q = Quat::new([0.9, 0.1, -0.3, 0.2]).unwrap();
        let mut r = quat_to_matrix(&q);
        r[0][0] += 4e-7;
        r[2][1] -= 3e-7;
        let back = quat_from_matrix(&r).unwrap();
        assert!(quat_angle_deg(&q, &back) < 1e-4);
        let m = quat_to_matrix(&back);
        assert!(orthonormality_defect(&m) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn group_laws(a in motion(), b in motion(), c in motion()) {
            let ab_c = se2_compose(&se2_compose(&a, &b).unwrap(), &c).unwrap();
            let a_bc = se2_compose(&a, &se2_compose(&b, &c).unwrap()).unwrap();
            prop_assert!(same_motion(&ab_c, &a_bc, 1e-12));
            let id = Se2Motion::identity(Frame::Image);
            prop_assert!(same_motion(&se2_compose(&a, &id).unwrap(), &a, 1e-12));
            prop_assert!(same_motion(&se2_compose(&id, &a).unwrap(), &a, 1e-12));
            prop_assert!(same_motion(&se2_compose(&a, &se2_inverse(&a)).unwrap(), &id, 1e-12));
            prop_assert!(same_motion(&se2_compose(&se2_inverse(&a), &a).unwrap(), &id, 1e-12));
            prop_assert!(same_motion(&se2_inverse(&se2_inverse(&a)), &a, 1e-12));
        }

        #[test]
        fn image_action_is_a_homomorphism(a in motion(), b in motion(), x in -50.0..50.0f64, y in -50.0..50.0f64) {
            let lhs = image_point_action(&b, image_point_action(&a, [x, y]).unwrap()).unwrap();
            let rhs = image_point_action(&se2_compose(&a, &b).unwrap(), [x, y]).unwrap();
            prop_assert!(close(lhs[0], rhs[0], 1e-9) && close(lhs[1], rhs[1], 1e-9));
        }

        #[test]
        fn projection_commutes_with_composition(th1 in -4.0..4.0f64, th2 in -4.0..4.0f64,
            x1 in -3.0..3.0f64, y1 in -3.0..3.0f64, x2 in -3.0..3.0f64, y2 in -3.0..3.0f64,
            f in 0.5..800.0f64, z0 in 0.5..20.0f64) {
            let cam = CameraIntrinsics::new(f, z0).unwrap();
            let a = Se2Motion::new(th1, [x1, y1], Frame::Scene);
            let b = Se2Motion::new(th2, [x2, y2], Frame::Scene);
            let lhs = motion_to_image(&se2_compose(&a, &b).unwrap(), &cam).unwrap();
            let rhs = se2_compose(&motion_to_image(&a, &cam).unwrap(), &motion_to_image(&b, &cam).unwrap()).unwrap();
            let scale = 1.0 + lhs.t[0].abs().max(lhs.t[1].abs());
            prop_assert!(same_motion(&lhs, &rhs, 1e-12 * scale));
        }

        #[test]
        fn matrix_quaternion_roundtrip(ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64, angle in 0.0..PI) {
            let n = (ax * ax + ay * ay + az * az).sqrt();
            prop_assume!(n > 1e-3);
            let (ux, uy, uz) = (ax / n, ay / n, az / n);
            // Rodrigues' formula.
            let (c, s) = (angle.cos(), angle.sin());
            let v = 1.0 - c;
            let r = [
                [c + ux * ux * v, ux * uy * v - uz * s, ux * uz * v + uy * s],
                [uy * ux * v + uz * s, c + uy * uy * v, uy * uz * v - ux * s],
                [uz * ux * v - uy * s, uz * uy * v + ux * s, c + uz * uz * v],
            ];
            let q = quat_from_matrix(&r).unwrap();
            let back = quat_to_matrix(&q);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!(close(back[i][j], r[i][j], 1e-9));
                }
            }
            let expected = Quat::new([(angle / 2.0).cos(), ux * (angle / 2.0).sin(), uy * (angle / 2.0).sin(), uz * (angle / 2.0).sin()]).unwrap();
            prop_assert!(quat_angle_deg(&q, &expected) < 1e-6);
        }

        #[test]
        fn angle_is_a_metric(a in prop::array::uniform4(-1.0..1.0f64), b in prop::array::uniform4(-1.0..1.0f64), c in prop::array::uniform4(-1.0..1.0f64)) {
            let (Ok(a), Ok(b), Ok(c)) = (Quat::new(a), Quat::new(b), Quat::new(c)) else { return Ok(()); };
            let ab = quat_angle_deg(&a, &b);
            prop_assert!((ab - quat_angle_deg(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=180.0).contains(&ab));
            prop_assert_eq!(quat_angle_deg(&a, &a), 0.0);
            prop_assert!(ab <= quat_angle_deg(&a, &c) + quat_angle_deg(&c, &b) + 1e-6);
        }
    }
}
