use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{pose_loss_on_tape, stack, Model};
use crate::error::{ensure, Result};
use crate::geom::Se3Pose;
use crate::tensor::{adam_step, AdamConfig, AdamState, Element, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub adam: AdamConfig,
    /// Skip a final batch smaller than `batch`.
    pub drop_last: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            adam: AdamConfig::default(),
            drop_last: false,
        }
    }
}

/// A `[C,H,W]` image with its ground-truth pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T: Element> {
    pub image: Tensor<T>,
    pub pose: Se3Pose,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Sample-weighted mean of the batch losses.
    pub mean_loss: f64,
    pub s_t: f64,
    pub s_r: f64,
}

/// One shuffled pass over `data` with an Adam update per batch.
pub fn train_epoch<T: Element>(
    model: &mut Model<T>,
    data: &[Sample<T>],
    opt: &mut AdamState<T>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    ensure!(!data.is_empty(), "cannot train on an empty dataset");
    ensure!(cfg.batch >= 1, "batch size must be positive");
    ensure!(
        !cfg.drop_last || cfg.batch <= data.len(),
        "batch size {} exceeds the {} samples with drop_last set",
        cfg.batch,
        data.len()
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut seen = 0usize;
    for chunk in order.chunks(cfg.batch) {
        if cfg.drop_last && chunk.len() < cfg.batch {
            break;
        }
        let images = chunk
            .iter()
            .map(|&i| model.prepare(&data[i].image, Some(rng)))
            .collect::<Result<Vec<_>>>()?;
        let poses: Vec<Se3Pose> = chunk.iter().map(|&i| data[i].pose).collect();
        let x = stack(&images)?;
        let mut tape = Tape::<T>::new();
        let mut running = std::mem::take(model.running_mut());
        let rec = model.record(&mut tape, x, true, true, &mut running, None);
        *model.running_mut() = running;
        let rec = rec?;
        let n = rec.params.len();
        let loss = pose_loss_on_tape(&mut tape, rec.t, rec.q, &poses, rec.params[n - 2], rec.params[n - 1])?;
        let value = tape.value(loss).item()?.as_f64();
        ensure!(value.is_finite(), "training loss became non-finite");
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<T>> = rec
            .params
            .iter()
            .zip(model.params())
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        adam_step(model.params_mut(), &grads, opt, &cfg.adam)?;
        total += value * chunk.len() as f64;
        seen += chunk.len();
    }
    let lp = model.loss_params();
    Ok(EpochStats {
        mean_loss: if seen > 0 { total / seen as f64 } else { 0.0 },
        s_t: lp.s_t,
        s_r: lp.s_r,
    })
}
