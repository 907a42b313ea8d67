//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use epose_core::model::{
    BackboneConfig, FrameMode, HeadConfig, InputConfig, ModelConfig, Preset, TrainConfig,
};
use epose_core::synth::{DatasetSpec, Texture};
use epose_core::tensor::AdamConfig;

use crate::{CliError, Result};

/// How the sweep sizes each group's backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMatch {
    /// Same effective channel count `K * N` for every `N`.
    Channels,
    /// Widest `K` whose unique backbone parameters do not exceed the classical count.
    Params,
}

impl FromStr for SweepMatch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "channels" => Ok(SweepMatch::Channels),
            "params" => Ok(SweepMatch::Params),
            _ => Err("expected channels or params".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset root holding `train/` and `test/`.
    pub data: Option<PathBuf>,
    /// Split evaluated by `eval`.
    pub split: String,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,

    pub dataset: DatasetSpec,

    pub group: usize,
    pub preset: Preset,
    /// One width for every stage, or one per stage.
    pub widths: Vec<usize>,
    pub ksize: usize,
    pub embed: usize,
    pub frame: FrameMode,
    pub disk: bool,
    pub resize: Option<usize>,
    pub crop: Option<usize>,

    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    pub t_thresh: f64,
    pub r_thresh: f64,

    pub verify_tol: f64,
    pub verify_samples: usize,
    pub verify_side: usize,
    pub verify_border: usize,

    pub sweep_groups: Vec<usize>,
    /// Effective channels `K * N` per stage for the sweep.
    pub channels: Vec<usize>,
    pub sweep_match: SweepMatch,
    /// Sweep schedule; `epochs` and `lr` still drive `train`.
    pub sweep_epochs: usize,
    pub sweep_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: None,
            split: "test".into(),
            checkpoint: None,
            resume: None,
            dataset: DatasetSpec::default(),
            group: 4,
            preset: Preset::Study10,
            widths: vec![4],
            ksize: 3,
            embed: 128,
            frame: FrameMode::Harmonic,
            disk: true,
            resize: None,
            crop: None,
            epochs: 200,
            batch: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            t_thresh: 0.1,
            r_thresh: 10.0,
            verify_tol: 1e-4,
            verify_samples: 2,
            verify_side: 32,
            verify_border: 0,
            sweep_groups: vec![1, 4, 8],
            channels: vec![16],
            sweep_match: SweepMatch::Channels,
            sweep_epochs: 150,
            sweep_lr: 1e-3,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value.parse::<V>().map_err(|e| CliError::InvalidValue {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let items = value
        .split(',')
        .map(|s| parse::<usize>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(CliError::InvalidValue {
            key: key.into(),
            value: value.into(),
            msg: "empty list".into(),
        });
    }
    Ok(items)
}

fn parse_optional<V: FromStr>(key: &str, value: &str) -> Result<Option<V>>
where
    V::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Sets one key; unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.dataset;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data" => self.data = Some(PathBuf::from(value)),
            "split" => self.split = value.to_string(),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "resume" => self.resume = parse_optional::<PathBuf>(key, value)?,
            "texture" => d.texture = parse::<Texture>(key, value)?,
            "grid" => d.grid = parse(key, value)?,
            "extent" => d.extent = parse(key, value)?,
            "blur" => d.blur = parse(key, value)?,
            "f" => d.f = parse(key, value)?,
            "z0" => d.z0 = parse(key, value)?,
            "width" => d.width = parse(key, value)?,
            "height" => d.height = parse(key, value)?,
            "t_range" => d.t_range = parse(key, value)?,
            "n_train" => d.n_train = parse(key, value)?,
            "n_test" => d.n_test = parse(key, value)?,
            "held_out_arc" => d.held_out_arc = parse_optional(key, value)?,
            "group" => self.group = parse(key, value)?,
            "preset" => self.preset = parse::<Preset>(key, value)?,
            "widths" => self.widths = parse_list(key, value)?,
            "ksize" => self.ksize = parse(key, value)?,
            "embed" => self.embed = parse(key, value)?,
            "frame" => self.frame = parse::<FrameMode>(key, value)?,
            "disk" => self.disk = parse(key, value)?,
            "resize" => self.resize = parse_optional(key, value)?,
            "crop" => self.crop = parse_optional(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "t_thresh" => self.t_thresh = parse(key, value)?,
            "r_thresh" => self.r_thresh = parse(key, value)?,
            "verify_tol" => self.verify_tol = parse(key, value)?,
            "verify_samples" => self.verify_samples = parse(key, value)?,
            "verify_side" => self.verify_side = parse(key, value)?,
            "verify_border" => self.verify_border = parse(key, value)?,
            "sweep_groups" => self.sweep_groups = parse_list(key, value)?,
            "channels" => self.channels = parse_list(key, value)?,
            "sweep_match" => self.sweep_match = parse(key, value)?,
            "sweep_epochs" => self.sweep_epochs = parse(key, value)?,
            "sweep_lr" => self.sweep_lr = parse(key, value)?,
            _ => return Err(CliError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a config file. `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Config {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at("expected `key = value`".into()))?;
            self.set(k.trim(), v.trim()).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::InvalidValue {
            key: kv.into(),
            value: String::new(),
            msg: "overrides take the form key=value".into(),
        })?;
        self.set(k.trim(), v.trim())
    }

    /// Defaults, then the file, then `--set` overrides, then dedicated flags.
    pub fn load(file: Option<&Path>, sets: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for kv in sets {
            cfg.apply_override(kv)?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o.to_path_buf();
        }
        Ok(cfg)
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| CliError::MissingKey("data".into()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.epnt"))
    }

    fn stage_widths(&self, widths: &[usize]) -> Result<Vec<usize>> {
        let stages = self.preset.stages();
        match widths.len() {
            1 => Ok(vec![widths[0]; stages]),
            n if n == stages => Ok(widths.to_vec()),
            n => Err(CliError::InvalidValue {
                key: "widths".into(),
                value: format!("{widths:?}"),
                msg: format!("{} needs 1 or {stages} widths, got {n}", self.preset.name()),
            }),
        }
    }

    /// The model for `group` with per-stage fiber widths `widths`.
    pub fn model_config_with(&self, group: usize, widths: &[usize], in_channels: usize) -> Result<ModelConfig> {
        let backbone = BackboneConfig {
            preset: self.preset,
            group,
            in_channels,
            widths: self.stage_widths(widths)?,
            ksize: self.ksize,
        };
        backbone.validate()?;
        Ok(ModelConfig {
            backbone,
            head: HeadConfig {
                embed: self.embed,
                frame: self.frame,
            },
            input: InputConfig {
                resize: self.resize,
                crop: self.crop,
                disk: self.disk,
            },
        })
    }

    pub fn model_config(&self, in_channels: usize) -> Result<ModelConfig> {
        self.model_config_with(self.group, &self.widths, in_channels)
    }

    /// Effective channels per stage, expanded to the preset's stage count.
    pub fn stage_channels(&self) -> Result<Vec<usize>> {
        self.stage_widths(&self.channels)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            drop_last: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "# comment\ngroup = 8\nlr = 0.001  # trailing\nheld_out_arc = none\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &["group=1".into()], Some(9), None).unwrap();
        assert_eq!(cfg.group, 1);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dataset.held_out_arc, None);
    }

    #[test]
    fn unknown_keys_cite_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "group = 4\ncolour = red\n").unwrap();
        let e = RunConfig::load(Some(&p), &[], None, None).unwrap_err().to_string();
        assert!(e.contains("run.cfg:2") && e.contains("colour"), "{e}");
        let e = RunConfig::load(None, &["nope=1".into()], None, None).unwrap_err().to_string();
        assert!(e.contains("nope"), "{e}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let e = RunConfig::load(None, &["epochs=many".into()], None, None).unwrap_err().to_string();
        assert!(e.contains("epochs"), "{e}");
    }

    #[test]
    fn widths_expand_per_stage() {
        let mut cfg = RunConfig::default();
        cfg.set("preset", "resnet-s").unwrap();
        cfg.set("widths", "2,3").unwrap();
        assert_eq!(cfg.model_config(1).unwrap().backbone.widths, vec![2, 3]);
        cfg.set("widths", "1,2,3").unwrap();
        assert!(cfg.model_config(1).is_err());
    }
}
