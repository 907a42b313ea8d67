//! The pose regression network: an equivariant backbone, global pooling,
//! two regression branches and the uncertainty-weighted loss.

mod backbone;
mod head;
mod loss;
mod train;

pub use backbone::{Backbone, BackboneConfig, Preset};
pub use head::{FrameMode, HeadConfig, RegressionHead};
pub use loss::{pose_loss, pose_loss_on_tape, LossParams};
pub use train::{train_epoch, EpochStats, Sample, TrainConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::gconv::{disk_mask, CyclicGroup, GFeature, RunningStats};
use crate::geom::{Quat, Se3Pose};
use crate::tensor::{seeded_rng, AdamState, Checkpoint, Element, Tape, Tensor, Var};

/// Image preprocessing applied before the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct InputConfig {
    /// Bilinear resize to a square side.
    pub resize: Option<usize>,
    /// Square crop side: random while training, centered otherwise.
    pub crop: Option<usize>,
    /// Zero everything outside the disk inscribed in the image.
    pub disk: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            resize: None,
            crop: None,
            disk: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub input: InputConfig,
}

/// One regressed pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub t: [f64; 3],
    /// Orientation before normalization, as seen by the loss.
    pub q_raw: [f64; 4],
    /// Unit, hemisphere-normalized pose.
    pub pose: Se3Pose,
}

/// Independent trainable scalars, in total and per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub layers: Vec<(String, usize)>,
}

impl ParamCount {
    fn from_layers(layers: Vec<(String, usize)>) -> Self {
        Self {
            total: layers.iter().map(|(_, n)| n).sum(),
            layers,
        }
    }
}

/// Independent scalars of a backbone alone.
pub fn count_backbone_params(cfg: &BackboneConfig) -> Result<ParamCount> {
    Ok(ParamCount::from_layers(Backbone::new(cfg)?.count_params()))
}

/// Tape handles of one recorded forward pass.
pub struct Recorded {
    pub params: Vec<Var>,
    pub features: Var,
    pub t: Var,
    pub q: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    cfg: ModelConfig,
    backbone: Backbone,
    head: RegressionHead,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
}

impl<T: Element> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(&cfg.backbone)?;
        let head = RegressionHead::new(&cfg.head, cfg.backbone.out_blocks(), cfg.backbone.group)?;
        if let (Some(r), Some(c)) = (cfg.input.resize, cfg.input.crop) {
            ensure!(c <= r, "crop side {c} exceeds resize side {r}");
        }
        let mut rng = seeded_rng(seed);
        let mut params = backbone.init_params::<T>(&mut rng);
        params.extend(head.init_params::<T>(&mut rng));
        let lp = LossParams::default();
        params.push(Tensor::scalar(T::of(lp.s_t)));
        params.push(Tensor::scalar(T::of(lp.s_r)));
        let mut names: Vec<String> = backbone.param_names().to_vec();
        names.extend(head.param_names().iter().cloned());
        names.extend(["loss.s_t".to_string(), "loss.s_r".to_string()]);
        let running = backbone
            .param_names()
            .iter()
            .zip(backbone.param_shapes())
            .filter(|(n, _)| n.ends_with(".gamma"))
            .map(|(_, s)| RunningStats::new(s[0]))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            head,
            names,
            params,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &RegressionHead {
        &self.head
    }

    pub fn group(&self) -> CyclicGroup {
        CyclicGroup::new(self.cfg.backbone.group).expect("validated")
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn loss_params(&self) -> LossParams {
        let n = self.params.len();
        LossParams {
            s_t: self.params[n - 2].data()[0].as_f64(),
            s_r: self.params[n - 1].data()[0].as_f64(),
        }
    }

    pub fn count_params(&self) -> ParamCount {
        let mut layers = self.backbone.count_params();
        layers.extend(self.head.count_params());
        layers.push(("loss".into(), 2));
        ParamCount::from_layers(layers)
    }

    /// Resizes and crops a `[C,H,W]` image. The crop is random when `rng` is
    /// given and centered otherwise.
    pub fn prepare(&self, image: &Tensor<T>, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>> {
        ensure!(image.rank() == 3, "image must be [C,H,W], got {:?}", image.shape());
        let mut img = match self.cfg.input.resize {
            Some(side) => resize_bilinear(image, side),
            None => image.clone(),
        };
        if let Some(side) = self.cfg.input.crop {
            let (h, w) = (img.shape()[1], img.shape()[2]);
            ensure!(side <= h && side <= w, "crop side {side} exceeds image {h}x{w}");
            let (y0, x0) = match rng {
                Some(rng) => (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side)),
                None => ((h - side) / 2, (w - side) / 2),
            };
            img = crop(&img, y0, x0, side);
        }
        Ok(img)
    }

    /// Records the network on `tape` for a prepared `[B,C,H,W]` batch.
    /// Parameters enter as trainable leaves when `trainable` is set.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        x: Tensor<T>,
        training: bool,
        trainable: bool,
        running: &mut [RunningStats<T>],
        taps: Option<&mut Vec<Var>>,
    ) -> Result<Recorded> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let shape = x.shape().to_vec();
        let mut xv = tape.constant(x);
        if self.cfg.input.disk {
            ensure!(shape.len() == 4 && shape[2] == shape[3], "disk input mask needs square images");
            let m = disk_mask(shape[2]);
            let plane = m.len();
            let mask = Tensor::from_fn(&shape, |i| if m[i % plane] { T::one() } else { T::zero() });
            let mv = tape.constant(mask);
            xv = tape.mul(xv, mv)?;
        }
        let nb = self.backbone.param_names().len();
        let nh = self.head.param_names().len();
        let features = self.backbone.forward(tape, &params[..nb], xv, training, running, taps)?;
        let (t, q) = self.head.forward(tape, &params[nb..nb + nh], features)?;
        Ok(Recorded {
            params,
            features,
            t,
            q,
        })
    }

    /// Running statistics, for training loops that update them.
    pub fn running_mut(&mut self) -> &mut Vec<RunningStats<T>> {
        &mut self.running
    }

    fn stack(&self, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        let prepared = images
            .iter()
            .map(|i| self.prepare(i, None))
            .collect::<Result<Vec<_>>>()?;
        stack(&prepared)
    }

    /// Backbone feature map of one `[C,H,W]` image in inference mode.
    pub fn backbone_forward(&self, image: &Tensor<T>) -> Result<GFeature<T>> {
        let x = self.stack(std::slice::from_ref(image))?;
        let mut tape = Tape::new();
        let mut running = self.running.clone();
        let rec = self.record(&mut tape, x, false, false, &mut running, None)?;
        self.to_gfeature(tape.value(rec.features))
    }

    /// Per-layer activations (after each nonlinearity) of one image.
    pub fn layer_features(&self, image: &Tensor<T>) -> Result<Vec<GFeature<T>>> {
        let x = self.stack(std::slice::from_ref(image))?;
        let mut tape = Tape::new();
        let mut running = self.running.clone();
        let mut taps = Vec::new();
        self.record(&mut tape, x, false, false, &mut running, Some(&mut taps))?;
        taps.iter().map(|v| self.to_gfeature(tape.value(*v))).collect()
    }

    fn to_gfeature(&self, t: &Tensor<T>) -> Result<GFeature<T>> {
        let s = t.shape();
        let n = self.cfg.backbone.group;
        GFeature::new(t.clone().reshape(&[s[1] / n, n, s[2], s[3]])?, self.group())
    }

    /// Pose from a backbone feature map.
    pub fn regress_pose(&self, features: &GFeature<T>) -> Result<Prediction> {
        ensure!(features.group() == self.group(), "feature group does not match the model");
        let (k, n, h, w) = features.dims();
        let mut tape = Tape::new();
        let nb = self.backbone.param_names().len();
        let params: Vec<Var> = self.params[nb..]
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let f = tape.constant(features.data().clone().reshape(&[1, k * n, h, w])?);
        let (t, q) = self.head.forward(&mut tape, &params, f)?;
        Ok(to_predictions(tape.value(t), tape.value(q))?.remove(0))
    }

    /// Poses for a list of `[C,H,W]` images, in inference mode.
    pub fn predict(&self, images: &[Tensor<T>]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let x = self.stack(chunk)?;
            let mut tape = Tape::new();
            let mut running = self.running.clone();
            let rec = self.record(&mut tape, x, false, false, &mut running, None)?;
            out.extend(to_predictions(tape.value(rec.t), tape.value(rec.q))?);
        }
        Ok(out)
    }

    /// Parameters and running statistics, plus optimizer state when given.
    pub fn to_checkpoint(&self, opt: Option<&AdamState<T>>) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, p) in self.names.iter().zip(&self.params) {
            ck.insert(name.as_str(), p);
        }
        for (i, r) in self.running.iter().enumerate() {
            ck.insert(format!("running.{i}.mean"), &r.mean);
            ck.insert(format!("running.{i}.var"), &r.var);
        }
        if let Some(opt) = opt {
            for (name, (m, v)) in self.names.iter().zip(opt.m.iter().zip(&opt.v)) {
                ck.insert(format!("adam.m.{name}"), m);
                ck.insert(format!("adam.v.{name}"), v);
            }
            ck.insert("adam.step", &Tensor::<f64>::scalar(opt.step as f64));
        }
        ck
    }

    /// Loads parameters and running statistics; shapes must match the
    /// model's configuration.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut params = Vec::with_capacity(self.params.len());
        for (name, p) in self.names.iter().zip(&self.params) {
            params.push(ck.require::<T>(name, p.shape())?);
        }
        let mut running = Vec::with_capacity(self.running.len());
        for (i, r) in self.running.iter().enumerate() {
            let c = r.mean.shape();
            running.push(RunningStats {
                mean: ck.require(&format!("running.{i}.mean"), c)?,
                var: ck.require(&format!("running.{i}.var"), c)?,
            });
        }
        self.params = params;
        self.running = running;
        Ok(())
    }

    /// Optimizer state stored in `ck`, if any.
    pub fn adam_from_checkpoint(&self, ck: &Checkpoint) -> Result<Option<AdamState<T>>> {
        let Some(step) = ck.get("adam.step") else {
            return Ok(None);
        };
        let mut state = AdamState::new(&self.params);
        for (i, (name, p)) in self.names.iter().zip(&self.params).enumerate() {
            state.m[i] = ck.require(&format!("adam.m.{name}"), p.shape())?;
            state.v[i] = ck.require(&format!("adam.v.{name}"), p.shape())?;
        }
        let s = step.item()?;
        if !(s >= 0.0 && s.fract() == 0.0) {
            return Err(Error::Checkpoint(format!("invalid optimizer step {s}")));
        }
        state.step = s as u64;
        Ok(Some(state))
    }
}

fn to_predictions<T: Element>(t: &Tensor<T>, q: &Tensor<T>) -> Result<Vec<Prediction>> {
    t.data()
        .chunks(3)
        .zip(q.data().chunks(4))
        .map(|(t, q)| {
            let t = [t[0].as_f64(), t[1].as_f64(), t[2].as_f64()];
            let q_raw = [q[0].as_f64(), q[1].as_f64(), q[2].as_f64(), q[3].as_f64()];
            Ok(Prediction {
                t,
                q_raw,
                pose: Se3Pose::new(t, Quat::new(q_raw)?),
            })
        })
        .collect()
}

/// Stacks equally shaped `[C,H,W]` tensors into `[B,C,H,W]`.
pub(crate) fn stack<T: Element>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    ensure!(!images.is_empty(), "cannot stack zero images");
    let s = images[0].shape().to_vec();
    ensure!(
        images.iter().all(|i| i.shape() == s.as_slice()),
        "images in a batch must share one shape"
    );
    let data = images.iter().flat_map(|i| i.data().iter().copied()).collect();
    Tensor::new(&[images.len(), s[0], s[1], s[2]], data)
}

fn crop<T: Element>(img: &Tensor<T>, y0: usize, x0: usize, side: usize) -> Tensor<T> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    Tensor::from_fn(&[c, side, side], |i| {
        let (ch, y, x) = (i / (side * side), (i / side) % side, i % side);
        d[(ch * h + y0 + y) * w + x0 + x]
    })
}

/// Bilinear resampling of a `[C,H,W]` image to `[C,side,side]`, sampling at
/// pixel centers.
pub fn resize_bilinear<T: Element>(img: &Tensor<T>, side: usize) -> Tensor<T> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let coord = |i: usize, from: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * from as f64 / side as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(from - 1), s - lo as f64)
    };
    Tensor::from_fn(&[c, side, side], |i| {
        let (ch, y, x) = (i / (side * side), (i / side) % side, i % side);
        let (y0, y1, fy) = coord(y, h);
        let (x0, x1, fx) = coord(x, w);
        let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx].as_f64();
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        T::of(top * (1.0 - fy) + bottom * fy)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::uniform(Preset::Study10, n, 1, 2),
            head: HeadConfig {
                embed: 8,
                frame: FrameMode::Harmonic,
            },
            input: InputConfig::default(),
        }
    }

    #[test]
    fn lifting_layer_count_example() {
        let mut cfg = BackboneConfig::uniform(Preset::Study10, 4, 1, 4);
        cfg.widths = vec![4; 5];
        let b = Backbone::new(&cfg).unwrap();
        // 36 weights plus 4 biases in the first layer.
        assert_eq!(b.count_params()[0].1, 40);
    }

    #[test]
    fn predictions_are_unit_and_deterministic() {
        let m = Model::<f64>::new(&tiny(4), 3).unwrap();
        let img = Tensor::from_fn(&[1, 16, 16], |i| ((i * 37) % 11) as f64 / 11.0);
        let a = m.predict(&[img.clone()]).unwrap();
        let b = Model::<f64>::new(&tiny(4), 3).unwrap().predict(&[img]).unwrap();
        assert_eq!(a, b);
        let q = a[0].pose.q.as_array();
        assert!((q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let m = Model::<f32>::new(&tiny(4), 5).unwrap();
        let opt = AdamState::new(m.params());
        let ck = m.to_checkpoint(Some(&opt));
        let mut other = Model::<f32>::new(&tiny(4), 6).unwrap();
        assert_ne!(other.params(), m.params());
        other.load_checkpoint(&ck).unwrap();
        assert_eq!(other.params(), m.params());
        assert_eq!(other.adam_from_checkpoint(&ck).unwrap(), Some(opt));
        let wrong = Model::<f32>::new(&tiny(8), 5).unwrap();
        let mut wrong = wrong;
        assert!(wrong.load_checkpoint(&ck).is_err());
    }

    #[test]
    fn resize_keeps_constants_and_crop_centers() {
        let img = Tensor::<f64>::full(&[2, 5, 7], 0.25);
        let r = resize_bilinear(&img, 4);
        assert!(r.data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
        let mut cfg = tiny(1);
        cfg.input.crop = Some(2);
        let m = Model::<f64>::new(&cfg, 0).unwrap();
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        assert_eq!(m.prepare(&img, None).unwrap().data(), &[5.0, 6.0, 9.0, 10.0]);
    }
}
