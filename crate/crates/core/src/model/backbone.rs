use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::gconv::{CyclicGroup, GroupConvLayer, GroupNormLayer, RunningStats};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Layer stack shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Ten convolutions with ELU, a 2x2 max pool after every second one
    /// (except the last pair).
    Study10,
    /// Normalized stem, then two stages of two residual blocks; the second
    /// stage starts with a 2x2 max pool.
    ResnetS,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Study10 => "study10",
            Preset::ResnetS => "resnet-s",
        }
    }

    pub fn stages(&self) -> usize {
        match self {
            Preset::Study10 => 5,
            Preset::ResnetS => 2,
        }
    }

    /// Number of 2x downsamplings.
    pub fn pools(&self) -> usize {
        match self {
            Preset::Study10 => 4,
            Preset::ResnetS => 1,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "study10" => Ok(Preset::Study10),
            "resnet-s" => Ok(Preset::ResnetS),
            _ => Err(Error::contract(format!(
                "unknown backbone preset `{s}` (expected study10 or resnet-s)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub preset: Preset,
    /// Group order `N`; 1 gives a classical CNN.
    pub group: usize,
    pub in_channels: usize,
    /// Fiber blocks `K` per stage.
    pub widths: Vec<usize>,
    /// Odd kernel side.
    pub ksize: usize,
}

impl BackboneConfig {
    /// A preset with the same width in every stage.
    pub fn uniform(preset: Preset, group: usize, in_channels: usize, width: usize) -> Self {
        Self {
            preset,
            group,
            in_channels,
            widths: vec![width; preset.stages()],
            ksize: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.group >= 1, "group order must be positive");
        ensure!(self.in_channels >= 1, "input channels must be positive");
        ensure!(
            self.widths.len() == self.preset.stages(),
            "{} needs {} stage widths, got {}",
            self.preset.name(),
            self.preset.stages(),
            self.widths.len()
        );
        ensure!(self.widths.iter().all(|w| *w >= 1), "all widths must be at least 1");
        ensure!(
            self.ksize % 2 == 1,
            "kernel side must be odd, got {}",
            self.ksize
        );
        Ok(())
    }

    /// The classical network with the same effective channel count `K * N`.
    pub fn matched_classical(&self) -> Self {
        Self {
            group: 1,
            widths: self.widths.iter().map(|w| w * self.group).collect(),
            ..self.clone()
        }
    }

    /// Fiber blocks of the output feature map.
    pub fn out_blocks(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Input side divisor from pooling.
    pub fn downsampling(&self) -> usize {
        1 << self.preset.pools()
    }
}

#[derive(Clone, Debug)]
enum Step {
    Conv(usize),
    Norm(usize),
    Elu,
    Pool,
    Save,
    /// Adds the saved tensor, through a 1x1 projection when given.
    AddSkip(Option<usize>),
}

#[derive(Clone, Debug)]
struct ConvSlot {
    layer: GroupConvLayer,
    weight: usize,
    bias: Option<usize>,
}

#[derive(Clone, Debug)]
struct NormSlot {
    layer: GroupNormLayer,
    gamma: usize,
    beta: usize,
}

/// A compiled backbone: layers, their parameter slots and the step plan.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    convs: Vec<ConvSlot>,
    norms: Vec<NormSlot>,
    plan: Vec<Step>,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Self {
            cfg: cfg.clone(),
            convs: Vec::new(),
            norms: Vec::new(),
            plan: Vec::new(),
            names: Vec::new(),
            shapes: Vec::new(),
        };
        let w = &cfg.widths;
        match cfg.preset {
            Preset::Study10 => {
                let mut c_in = cfg.in_channels;
                for (stage, &k) in w.iter().enumerate() {
                    for j in 0..2 {
                        let lifting = stage == 0 && j == 0;
                        let conv = b.add_conv(lifting, c_in, k, cfg.ksize, true)?;
                        b.plan.extend([Step::Conv(conv), Step::Elu]);
                        c_in = k;
                    }
                    if stage + 1 < w.len() {
                        b.plan.push(Step::Pool);
                    }
                }
            }
            Preset::ResnetS => {
                let stem = b.add_conv(true, cfg.in_channels, w[0], cfg.ksize, false)?;
                let norm = b.add_norm(w[0]);
                b.plan.extend([Step::Conv(stem), Step::Norm(norm), Step::Elu]);
                let mut c_in = w[0];
                for (stage, &k) in w.iter().enumerate() {
                    for block in 0..2 {
                        if stage > 0 && block == 0 {
                            b.plan.push(Step::Pool);
                        }
                        let c1 = b.add_conv(false, c_in, k, cfg.ksize, false)?;
                        let n1 = b.add_norm(k);
                        let c2 = b.add_conv(false, k, k, cfg.ksize, false)?;
                        let n2 = b.add_norm(k);
                        let skip = if c_in != k {
                            Some(b.add_conv(false, c_in, k, 1, false)?)
                        } else {
                            None
                        };
                        b.plan.extend([
                            Step::Save,
                            Step::Conv(c1),
                            Step::Norm(n1),
                            Step::Elu,
                            Step::Conv(c2),
                            Step::Norm(n2),
                            Step::AddSkip(skip),
                            Step::Elu,
                        ]);
                        c_in = k;
                    }
                }
            }
        }
        Ok(b)
    }

    fn group(&self) -> CyclicGroup {
        CyclicGroup::new(self.cfg.group).expect("validated")
    }

    fn push_param(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn add_conv(&mut self, lifting: bool, c_in: usize, c_out: usize, ksize: usize, bias: bool) -> Result<usize> {
        let layer = GroupConvLayer::new(lifting, c_in, c_out, ksize, self.group(), bias)?;
        let i = self.convs.len();
        let weight = self.push_param(format!("backbone.conv{i}.weight"), layer.weight_shape().to_vec());
        let bias = bias.then(|| self.push_param(format!("backbone.conv{i}.bias"), vec![c_out]));
        self.convs.push(ConvSlot { layer, weight, bias });
        Ok(i)
    }

    fn add_norm(&mut self, channels: usize) -> usize {
        let layer = GroupNormLayer::new(channels, self.group());
        let i = self.norms.len();
        let gamma = self.push_param(format!("backbone.norm{i}.gamma"), vec![channels]);
        let beta = self.push_param(format!("backbone.norm{i}.beta"), vec![channels]);
        self.norms.push(NormSlot { layer, gamma, beta });
        i
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn norm_count(&self) -> usize {
        self.norms.len()
    }

    pub fn conv_count(&self) -> usize {
        self.convs.len()
    }

    pub fn init_params<T: Element>(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
        let mut out: Vec<Option<Tensor<T>>> = vec![None; self.names.len()];
        for slot in &self.convs {
            let mut p = slot.layer.init_params::<T>(rng).into_iter();
            out[slot.weight] = p.next();
            if let Some(b) = slot.bias {
                out[b] = p.next();
            }
        }
        for slot in &self.norms {
            let mut p = slot.layer.init_params::<T>().into_iter();
            out[slot.gamma] = p.next();
            out[slot.beta] = p.next();
        }
        out.into_iter().map(|t| t.expect("every slot initialized")).collect()
    }

    /// Independent scalars per layer, in parameter order.
    pub fn count_params(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, slot) in self.convs.iter().enumerate() {
            out.push((format!("backbone.conv{i}"), slot.layer.independent_params()));
        }
        for (i, slot) in self.norms.iter().enumerate() {
            out.push((format!("backbone.norm{i}"), slot.layer.independent_params()));
        }
        out
    }

    /// Checks that `side x side` inputs survive the pooling schedule.
    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        ensure!(
            channels == self.cfg.in_channels,
            "backbone expects {} input channels, got {channels}",
            self.cfg.in_channels
        );
        let d = self.cfg.downsampling();
        ensure!(
            h % d == 0 && w % d == 0 && h >= d && w >= d,
            "input {h}x{w} is not divisible by the downsampling factor {d}"
        );
        Ok(())
    }

    /// Records the stack on `tape` for a `[B, C, H, W]` input; `params` are
    /// the backbone's parameter variables in [`Self::param_names`] order.
    /// Intermediate activations are appended to `taps` when given.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        training: bool,
        running: &mut [RunningStats<T>],
        mut taps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        ensure!(params.len() == self.names.len(), "backbone parameter count mismatch");
        ensure!(running.len() == self.norms.len(), "running statistics count mismatch");
        let s = tape.value(x).shape().to_vec();
        ensure!(s.len() == 4, "backbone input must be [B,C,H,W], got {s:?}");
        self.check_input(s[1], s[2], s[3])?;
        let mut y = x;
        let mut saved = Vec::new();
        for step in &self.plan {
            y = match step {
                Step::Conv(i) => {
                    let slot = &self.convs[*i];
                    slot.layer.forward(tape, y, params[slot.weight], slot.bias.map(|b| params[b]))?
                }
                Step::Norm(i) => {
                    let slot = &self.norms[*i];
                    slot.layer.forward(
                        tape,
                        y,
                        params[slot.gamma],
                        params[slot.beta],
                        &mut running[*i],
                        training,
                    )?
                }
                Step::Elu => {
                    let out = tape.elu(y, T::one())?;
                    if let Some(t) = taps.as_deref_mut() {
                        t.push(out);
                    }
                    out
                }
                Step::Pool => tape.maxpool2d(y, 2, 2)?,
                Step::Save => {
                    saved.push(y);
                    y
                }
                Step::AddSkip(proj) => {
                    let mut skip = saved.pop().expect("plan saves before adding");
                    if let Some(i) = proj {
                        let slot = &self.convs[*i];
                        skip = slot.layer.forward(tape, skip, params[slot.weight], None)?;
                    }
                    tape.add(y, skip)?
                }
            };
        }
        Ok(y)
    }

    /// Radius in input pixels of the region that influences one output pixel.
    pub fn receptive_radius(&self) -> usize {
        let mut scale = 1;
        let mut radius = 0;
        for step in &self.plan {
            match step {
                Step::Conv(i) => radius += (self.convs[*i].layer.ksize / 2) * scale,
                Step::Pool => {
                    radius += scale;
                    scale *= 2;
                }
                _ => {}
            }
        }
        radius
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_the_documented_depth() {
        let s = Backbone::new(&BackboneConfig::uniform(Preset::Study10, 4, 1, 2)).unwrap();
        assert_eq!(s.conv_count(), 10);
        assert_eq!(s.norm_count(), 0);
        let mut cfg = BackboneConfig::uniform(Preset::ResnetS, 4, 1, 2);
        cfg.widths = vec![2, 3];
        let r = Backbone::new(&cfg).unwrap();
        // stem + 4 blocks of two + one projection
        assert_eq!(r.conv_count(), 10);
        assert_eq!(r.norm_count(), 9);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = BackboneConfig::uniform(Preset::Study10, 4, 1, 2);
        cfg.ksize = 4;
        assert!(Backbone::new(&cfg).is_err());
        cfg.ksize = 3;
        cfg.widths.pop();
        assert!(Backbone::new(&cfg).is_err());
        assert!("resnet18".parse::<Preset>().is_err());
        assert_eq!("resnet-s".parse::<Preset>().unwrap(), Preset::ResnetS);
    }

    #[test]
    fn input_sides_must_survive_pooling() {
        let b = Backbone::new(&BackboneConfig::uniform(Preset::Study10, 4, 1, 2)).unwrap();
        assert!(b.check_input(1, 32, 32).is_ok());
        assert!(b.check_input(1, 24, 24).is_err());
        assert!(b.check_input(3, 32, 32).is_err());
    }
}
