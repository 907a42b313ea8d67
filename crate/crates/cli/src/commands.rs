use std::path::Path;

use epose_core::gconv::{rotate_image, transport_error, Turn};
use epose_core::geom::{Frame, Se2Motion};
use epose_core::metrics;
use epose_core::model::{count_backbone_params, train_epoch, BackboneConfig, EpochStats, Model, ModelConfig, Sample};
use epose_core::synth::{self, generate_dataset, load_dataset, render, PoseDataset};
use epose_core::tensor::{read_checkpoint, seeded_rng, AdamState, Checkpoint, Element, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, SweepMatch};
use crate::report::{
    write_bytes, write_csv, write_json, EvalReport, SampleReport, SweepReport, SweepRow, TurnReport, VerifyReport,
};
use crate::{CliError, Result};

const EPOCH_KEY: &str = "train.epoch";

/// Generates `train/` and `test/` under the `data` key.
pub fn synth_gen(cfg: &RunConfig) -> Result<synth::GeneratedDataset> {
    let root = cfg.require_data()?;
    let ds = generate_dataset(&cfg.dataset, cfg.seed, root)?;
    println!(
        "wrote {} train and {} test images to {}",
        ds.train.len(),
        ds.test.len(),
        root.display()
    );
    Ok(ds)
}

pub fn load_samples<T: Element>(ds: &PoseDataset) -> Result<Vec<Sample<T>>> {
    let images = ds.load_images()?;
    Ok(images
        .iter()
        .zip(&ds.records)
        .map(|(img, rec)| Sample {
            image: img.to_tensor(),
            pose: rec.pose,
        })
        .collect())
}

fn channels_of(ds: &PoseDataset) -> Result<usize> {
    if ds.is_empty() {
        return Err(CliError::Invalid(format!("dataset {} is empty", ds.root.display())));
    }
    Ok(ds.load_image(0)?.channels())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    seeded_rng(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// A trained model with its optimizer state and per-epoch statistics.
pub struct Fit {
    pub model: Model<f32>,
    pub opt: AdamState<f32>,
    pub epochs_done: usize,
    pub curve: Vec<(usize, EpochStats)>,
}

impl Fit {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(Some(&self.opt));
        ck.insert(EPOCH_KEY, &Tensor::<f64>::scalar(self.epochs_done as f64));
        ck
    }
}

/// Trains until `cfg.epochs` epochs have run in total, starting fresh or
/// from `resume`.
pub fn fit(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    data: &[Sample<f32>],
    resume: Option<&Checkpoint>,
    mut progress: impl FnMut(usize, &EpochStats),
) -> Result<Fit> {
    let mut model = Model::<f32>::new(model_cfg, cfg.seed)?;
    let mut opt = AdamState::new(model.params());
    let mut start = 0;
    if let Some(ck) = resume {
        model.load_checkpoint(ck)?;
        if let Some(state) = model.adam_from_checkpoint(ck)? {
            opt = state;
        }
        start = match ck.get(EPOCH_KEY) {
            Some(t) => t.item()? as usize,
            None => 0,
        };
    }
    let train_cfg = cfg.train_config();
    let mut curve = Vec::new();
    for epoch in start..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let stats = train_epoch(&mut model, data, &mut opt, &train_cfg, &mut rng)?;
        progress(epoch + 1, &stats);
        curve.push((epoch + 1, stats));
    }
    Ok(Fit {
        model,
        opt,
        epochs_done: start.max(cfg.epochs),
        curve,
    })
}

fn curve_rows(curve: &[(usize, EpochStats)]) -> Vec<Vec<String>> {
    curve
        .iter()
        .map(|(e, s)| vec![e.to_string(), s.mean_loss.to_string(), s.s_t.to_string(), s.s_r.to_string()])
        .collect()
}

/// Trains on `data/train`, writing `checkpoint.epnt` and `curve.csv` to `out`.
pub fn train(cfg: &RunConfig) -> Result<Fit> {
    let ds = load_dataset(&cfg.require_data()?.join("train"))?;
    let model_cfg = cfg.model_config(channels_of(&ds)?)?;
    let data = load_samples::<f32>(&ds)?;
    let resume = cfg.resume.as_deref().map(read_checkpoint).transpose()?;
    let fit = fit(cfg, &model_cfg, &data, resume.as_ref(), |e, s| {
        if e % 10 == 0 || e == cfg.epochs {
            eprintln!("epoch {e}: loss {:.6} s_t {:.4} s_R {:.4}", s.mean_loss, s.s_t, s.s_r);
        }
    })?;
    write_bytes(&cfg.out.join("checkpoint.epnt"), &fit.checkpoint().to_bytes())?;
    write_csv(&cfg.out.join("curve.csv"), "epoch,mean_loss,s_t,s_R", &curve_rows(&fit.curve))?;
    println!(
        "trained {} epochs on {} samples; checkpoint in {}",
        fit.epochs_done,
        data.len(),
        cfg.out.display()
    );
    Ok(fit)
}

/// Errors of `model` on every record of `ds`.
pub fn evaluate<T: Element>(cfg: &RunConfig, model: &Model<T>, ds: &PoseDataset) -> Result<EvalReport> {
    let images: Vec<Tensor<T>> = ds.load_images()?.iter().map(|i| i.to_tensor()).collect();
    let preds: Vec<_> = model.predict(&images)?.iter().map(|p| p.pose).collect();
    let r = metrics::evaluate(&preds, &ds.poses(), cfg.t_thresh, cfg.r_thresh)?;
    Ok(EvalReport {
        count: ds.len(),
        median_t_m: r.median_t_m,
        median_r_deg: r.median_r_deg,
        acc: r.accuracy,
        t_thresh_m: cfg.t_thresh,
        r_thresh_deg: cfg.r_thresh,
        per_sample: ds
            .records
            .iter()
            .zip(&r.per_sample)
            .map(|(rec, e)| SampleReport {
                path: rec.path.clone(),
                t_m: e.t_m,
                r_deg: e.r_deg,
            })
            .collect(),
    })
}

/// Evaluates the checkpoint on `data/<split>` and writes `report.json`.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ds = load_dataset(&cfg.require_data()?.join(&cfg.split))?;
    let mut model = Model::<f32>::new(&cfg.model_config(channels_of(&ds)?)?, cfg.seed)?;
    let path = cfg.checkpoint_path();
    model
        .load_checkpoint(&read_checkpoint(&path)?)
        .map_err(|e| CliError::Invalid(format!("{}: incompatible with the configured model: {e}", path.display())))?;
    let report = evaluate(cfg, &model, &ds)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    println!(
        "{} samples: median {:.4} m, {:.3} deg, acc@({} m, {} deg) {:.3}",
        report.count, report.median_t_m, report.median_r_deg, cfg.t_thresh, cfg.r_thresh, report.acc
    );
    Ok(report)
}

/// Group elements probed by `verify-equiv`: every element of C_N, plus the
/// quarter turns for the classical model.
pub fn probe_turns(n: usize) -> Vec<Turn> {
    let mut turns: Vec<Turn> = (0..n).map(|r| Turn::new(r, n)).collect();
    if n == 1 {
        turns.extend((1..4).map(Turn::quarter_turns));
    }
    turns
}

/// Per-layer and end-to-end equivariance errors of the configured backbone
/// on rendered views, written to `report.json`.
pub fn verify_equiv(cfg: &RunConfig) -> Result<VerifyReport> {
    let mut model = Model::<f64>::new(&cfg.model_config(1)?, cfg.seed)?;
    if let Some(path) = &cfg.checkpoint {
        model.load_checkpoint(&read_checkpoint(path)?)?;
    }
    let scene = cfg.dataset.scene(cfg.seed)?;
    let mut rng = seeded_rng(cfg.seed ^ 0x7e57);
    let side = cfg.verify_side;
    let images = (0..cfg.verify_samples)
        .map(|_| {
            let m = Se2Motion::new(
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
                Frame::Scene,
            );
            Ok(render(&scene, &m, side, side)?.to_tensor::<f64>())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.group;
    let mut turns = Vec::new();
    let mut pass = true;
    for turn in probe_turns(n) {
        let mut layers: Vec<f64> = Vec::new();
        let mut end: f64 = 0.0;
        for img in &images {
            let moved = rotate_image(img, turn)?;
            let (a, b) = (model.layer_features(img)?, model.layer_features(&moved)?);
            layers.resize(a.len(), 0.0);
            for (i, (fa, fb)) in a.iter().zip(&b).enumerate() {
                layers[i] = layers[i].max(transport_error(fa, fb, turn, cfg.verify_border)?);
            }
            let (fa, fb) = (model.backbone_forward(img)?, model.backbone_forward(&moved)?);
            end = end.max(transport_error(&fa, &fb, turn, cfg.verify_border)?);
        }
        let status = if !turn.is_quarter_multiple() {
            "n/a"
        } else if end <= cfg.verify_tol && layers.iter().all(|e| *e <= cfg.verify_tol) {
            "PASS"
        } else {
            pass = false;
            "FAIL"
        };
        turns.push(TurnReport {
            steps: turn.steps,
            order: turn.order,
            degrees: turn.angle().to_degrees(),
            layers,
            end_to_end: end,
            status: status.into(),
        });
    }
    let report = VerifyReport {
        group: n,
        preset: cfg.preset.name().into(),
        tolerance: cfg.verify_tol,
        samples: images.len(),
        side,
        turns,
        pass,
    };
    write_json(&cfg.out.join("report.json"), &report)?;
    for t in &report.turns {
        println!("{:>7.2} deg  end-to-end {:.3e}  {}", t.degrees, t.end_to_end, t.status);
    }
    Ok(report)
}

/// Per-stage fiber widths for group `n` under the sweep's matching rule.
pub fn sweep_widths(cfg: &RunConfig, n: usize) -> Result<Vec<usize>> {
    let channels = cfg.stage_channels()?;
    match cfg.sweep_match {
        SweepMatch::Channels => channels
            .iter()
            .map(|c| {
                if c % n == 0 {
                    Ok(c / n)
                } else {
                    Err(CliError::InvalidValue {
                        key: "channels".into(),
                        value: c.to_string(),
                        msg: format!("not divisible by group order {n}"),
                    })
                }
            })
            .collect(),
        SweepMatch::Params => {
            let count = |group: usize, widths: Vec<usize>| -> Result<usize> {
                let cfg = BackboneConfig {
                    preset: cfg.preset,
                    group,
                    in_channels: 1,
                    widths,
                    ksize: cfg.ksize,
                };
                Ok(count_backbone_params(&cfg)?.total)
            };
            if channels.iter().any(|c| *c != channels[0]) {
                return Err(CliError::InvalidValue {
                    key: "sweep_match".into(),
                    value: "params".into(),
                    msg: "parameter matching needs a single channel count".into(),
                });
            }
            let target = count(1, channels.clone())?;
            let mut k = 1;
            while count(n, vec![k + 1; channels.len()])? <= target {
                k += 1;
            }
            Ok(vec![k; channels.len()])
        }
    }
}

fn dataset_for_sweep(cfg: &RunConfig) -> Result<(PoseDataset, PoseDataset)> {
    let root = cfg.data.clone().unwrap_or_else(|| cfg.out.join("data"));
    if root.join("train").join("poses.txt").is_file() {
        return Ok((load_dataset(&root.join("train"))?, load_dataset(&root.join("test"))?));
    }
    let ds = generate_dataset(&cfg.dataset, cfg.seed, &root)?;
    Ok((ds.train, ds.test))
}

/// Trains one model per group order with a shared seed and schedule and
/// writes `sweep.csv` and `report.json`.
pub fn sweep(cfg: &RunConfig) -> Result<SweepReport> {
    let cfg = &RunConfig {
        epochs: cfg.sweep_epochs,
        lr: cfg.sweep_lr,
        ..cfg.clone()
    };
    let (train_ds, test_ds) = dataset_for_sweep(cfg)?;
    let in_channels = channels_of(&train_ds)?;
    let data = load_samples::<f32>(&train_ds)?;
    let mut rows = Vec::new();
    for &n in &cfg.sweep_groups {
        let widths = sweep_widths(cfg, n)?;
        let model_cfg = cfg.model_config_with(n, &widths, in_channels)?;
        let fit = fit(cfg, &model_cfg, &data, None, |e, s| {
            if e % 25 == 0 || e == cfg.epochs {
                eprintln!("N={n} epoch {e}: loss {:.6}", s.mean_loss);
            }
        })?;
        let eval = evaluate(cfg, &fit.model, &test_ds)?;
        let row = SweepRow {
            n,
            widths,
            backbone_params: count_backbone_params(&model_cfg.backbone)?.total,
            total_params: fit.model.count_params().total,
            final_loss: fit.curve.last().map_or(f64::NAN, |(_, s)| s.mean_loss),
            acc: eval.acc,
            median_t: eval.median_t_m,
            median_r: eval.median_r_deg,
        };
        println!(
            "N={n}: acc {:.3}, median {:.4} m, {:.2} deg",
            row.acc, row.median_t, row.median_r
        );
        rows.push(row);
    }
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.n.to_string(), r.acc.to_string(), r.median_t.to_string(), r.median_r.to_string()])
        .collect();
    write_csv(&cfg.out.join("sweep.csv"), "N,acc,median_t,median_r", &csv)?;
    let report = SweepReport {
        preset: cfg.preset.name().into(),
        epochs: cfg.epochs,
        t_thresh_m: cfg.t_thresh,
        r_thresh_deg: cfg.r_thresh,
        train_count: train_ds.len(),
        test_count: test_ds.len(),
        rows,
    };
    write_json(&cfg.out.join("report.json"), &report)?;
    Ok(report)
}

pub fn convert_7scenes(src: &Path, dst: &Path) -> Result<PoseDataset> {
    let ds = synth::convert_7scenes(src, dst)?;
    println!("converted {} records into {}", ds.len(), dst.display());
    Ok(ds)
}
