use crate::error::{ensure, Result};
use crate::geom::Se3Pose;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Learned log-variance weights of the pose loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub s_t: f64,
    pub s_r: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { s_t: 0.0, s_r: -3.0 }
    }
}

/// `L_t e^{-s_t} + s_t + L_R e^{-s_R} + s_R` with batch-mean `L_t` and `L_R`.
///
/// `t` is `[B,3]`, `q` is `[B,4]` raw (unnormalized) quaternions, `s_t` and
/// `s_r` are scalars. The ground-truth quaternion of each sample is flipped
/// to the hemisphere of the prediction.
pub fn pose_loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    t: Var,
    q: Var,
    gt: &[Se3Pose],
    s_t: Var,
    s_r: Var,
) -> Result<Var> {
    let b = gt.len();
    ensure!(b > 0, "pose loss over an empty batch");
    ensure!(
        tape.value(t).shape() == [b, 3] && tape.value(q).shape() == [b, 4],
        "pose loss expects [{b},3] and [{b},4], got {:?} and {:?}",
        tape.value(t).shape(),
        tape.value(q).shape()
    );
    let qn = tape.row_normalize(q)?;
    let qv = tape.value(qn).data().to_vec();
    let mut gt_t = Vec::with_capacity(3 * b);
    let mut gt_q = Vec::with_capacity(4 * b);
    for (i, pose) in gt.iter().enumerate() {
        gt_t.extend(pose.t.map(T::of));
        let q0 = pose.q.as_array();
        let dot: f64 = (0..4).map(|j| q0[j] * qv[i * 4 + j].as_f64()).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        gt_q.extend(q0.map(|v| T::of(sign * v)));
    }
    let gt_t = tape.constant(Tensor::new(&[b, 3], gt_t)?);
    let gt_q = tape.constant(Tensor::new(&[b, 4], gt_q)?);
    let dt = tape.sub(gt_t, t)?;
    let lt = tape.row_norm(dt)?;
    let lt = tape.mean(lt)?;
    let dq = tape.sub(gt_q, qn)?;
    let lr = tape.row_norm(dq)?;
    let lr = tape.mean(lr)?;
    let term_t = weighted(tape, lt, s_t)?;
    let term_r = weighted(tape, lr, s_r)?;
    tape.add(term_t, term_r)
}

/// `l e^{-s} + s`.
fn weighted<T: Element>(tape: &mut Tape<T>, l: Var, s: Var) -> Result<Var> {
    let neg = tape.scale(s, -T::one())?;
    let w = tape.exp(neg)?;
    let lw = tape.mul(l, w)?;
    tape.add(lw, s)
}

/// The loss of a single prediction.
pub fn pose_loss(t: [f64; 3], q_raw: [f64; 4], gt: &Se3Pose, lp: &LossParams) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let tv = tape.constant(Tensor::new(&[1, 3], t.to_vec())?);
    let qv = tape.constant(Tensor::new(&[1, 4], q_raw.to_vec())?);
    let st = tape.constant(Tensor::scalar(lp.s_t));
    let sr = tape.constant(Tensor::scalar(lp.s_r));
    let loss = pose_loss_on_tape(&mut tape, tv, qv, std::slice::from_ref(gt), st, sr)?;
    tape.value(loss).item()
}
