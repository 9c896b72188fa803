//! Commands behind the `ovseg` binary: training, evaluation, correlation
//! heatmaps and report averaging.
//!
//! Output files:
//!
//! | command    | files                                                  |
//! |------------|--------------------------------------------------------|
//! | train      | `loss.log` (`iter bce sem total`), `checkpoint.ovseg`  |
//! | eval       | `metrics.txt` (`key = value`), `metrics.csv`           |
//! | viz-corr   | heatmap PNG, optional overlay PNG                      |
//! | report     | `report.txt`                                           |
//!
//! All files are replaced atomically.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbones::{ClassRegistry, ImageTensor};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::{load_split, normalize, read_rgb, DatasetManifest, Phase};
use crate::error::{Error, Result};
use crate::evaluation::{predict, split_miou, average_reports, ConfusionAccumulator, MetricsReport};
use crate::params::ParamStore;
use crate::pipeline::{Model, ModelConfig, ModelSpec};
use crate::resize::bilinear_tensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{batch_indices, train_step, AdamW, GroundTruthMask, LossRecord, TrainConfig, IGNORE_INDEX};

/// Overrides the output root of every command when set.
pub const OUTPUT_DIR_ENV: &str = "OVSEG_OUTPUT_DIR";
pub const CHECKPOINT_FILE: &str = "checkpoint.ovseg";
pub const LOSS_LOG_FILE: &str = "loss.log";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset manifest; required. Relative paths resolve against the
    /// config file's directory.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub split: String,
    /// Save a checkpoint every this many steps in addition to the last one.
    pub checkpoint_every: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            output_dir: PathBuf::from("runs"),
            seed: 0,
            split: "train".into(),
            checkpoint_every: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        c.train.validate()?;
        if c.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        Ok(c)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &c.manifest {
            c.manifest = Some(base.join(m));
        }
        c.output_dir = base.join(&c.output_dir);
        Ok(c)
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest.as_deref().ok_or_else(|| Error::Config("missing required field `manifest`".into()))
    }
}

/// `dir`, unless the output-root environment variable is set.
pub fn output_root(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => dir.to_path_buf(),
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: usize,
    pub losses: Vec<LossRecord>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

pub fn format_loss_log(losses: &[LossRecord]) -> String {
    let mut out = String::new();
    for (i, r) in losses.iter().enumerate() {
        writeln!(out, "{} {} {} {}", i + 1, r.bce, r.sem, r.total).unwrap();
    }
    out
}

/// Training samples with labels re-indexed to the seen-only vocabulary.
pub fn training_samples<T: Scalar>(
    manifest: &DatasetManifest,
    split: &str,
) -> Result<(ClassRegistry, Vec<(ImageTensor<T>, GroundTruthMask)>)> {
    let full = manifest.registry()?;
    let samples = load_split::<T>(manifest, split, Phase::Train)?
        .into_iter()
        .map(|(img, mask)| Ok((img, mask.to_training_labels(&full)?)))
        .collect::<Result<Vec<_>>>()?;
    let seen = full.seen_only();
    if seen.is_empty() {
        return Err(Error::Config(format!("manifest `{}` has no seen classes", manifest.name)));
    }
    Ok((seen, samples))
}

/// Trains in single precision and writes the loss log and checkpoint. On a
/// non-finite loss the log of completed steps is still written.
pub fn run_train(config: &RunConfig) -> Result<TrainSummary> {
    let manifest = DatasetManifest::load(config.manifest_path()?)?;
    let (registry, samples) = training_samples::<f32>(&manifest, &config.split)?;
    let spec = ModelSpec {
        config: config.model.clone(),
        n_prompts: registry.templates().len(),
        n_train_classes: registry.len(),
    };
    let model = Model::new(spec.clone())?;
    let mut store: ParamStore<f32> = model.init(config.seed);
    let mut opt = AdamW::new();
    let iters = config.train.iterations(&manifest.name);
    let out = output_root(&config.output_dir);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOSS_LOG_FILE);
    let run_config = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    let save = |store: &ParamStore<f32>, iteration: usize| {
        Checkpoint {
            iteration: iteration as u64,
            model: spec.clone(),
            run_config: run_config.clone(),
            train_classes: registry.names().to_vec(),
            params: store.clone(),
        }
        .save(&ckpt_path)
    };

    log::info!("training `{}`: {} samples, {} seen classes, {iters} steps", manifest.name, samples.len(), registry.len());
    let mut losses = Vec::with_capacity(iters);
    for it in 0..iters {
        let batch: Vec<_> =
            batch_indices(samples.len(), config.train.batch_size, it, config.seed).into_iter().map(|i| samples[i].clone()).collect();
        match train_step(&model, &mut store, &mut opt, &registry, &batch, &config.train) {
            Ok(r) => losses.push(r),
            Err(e) => {
                write_atomic(&log_path, format_loss_log(&losses).as_bytes())?;
                return Err(e);
            }
        }
        let step = it + 1;
        if step % 50 == 0 || step == iters {
            log::info!("step {step}: loss {:.5}", losses[it].total);
        }
        if config.checkpoint_every.is_some_and(|k| step % k == 0) && step != iters {
            save(&store, step)?;
            write_atomic(&log_path, format_loss_log(&losses).as_bytes())?;
        }
    }
    save(&store, iters)?;
    write_atomic(&log_path, format_loss_log(&losses).as_bytes())?;
    Ok(TrainSummary { iterations: iters, losses, checkpoint: ckpt_path, loss_log: log_path })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Confusion counts of a model over labeled samples.
pub fn evaluate<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    registry: &ClassRegistry,
    samples: &[(ImageTensor<T>, GroundTruthMask)],
) -> Result<MetricsReport> {
    let mut acc = ConfusionAccumulator::new(registry.len());
    for (image, mask) in samples {
        let logits = model.predict_logits(store, image, registry)?;
        acc.accumulate(&predict(&logits), mask)?;
    }
    split_miou(&acc.per_class_iou(), registry)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub split: String,
    /// Restrict the vocabulary to seen classes; unseen pixels are ignored.
    pub seen_only: bool,
    pub output_dir: PathBuf,
}

/// Evaluates a checkpoint on a manifest split and writes `metrics.txt` and
/// `metrics.csv`. Nothing is written unless evaluation succeeds.
pub fn run_eval(checkpoint: &Path, manifest: &Path, opts: &EvalOptions) -> Result<MetricsReport> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let model = Model::new(ckpt.model.clone())?;
    let manifest = DatasetManifest::load(manifest)?;
    let (registry, samples) = if opts.seen_only {
        training_samples::<f32>(&manifest, &opts.split)?
    } else {
        (manifest.registry()?, load_split::<f32>(&manifest, &opts.split, Phase::Eval)?)
    };
    let report = evaluate(&model, &ckpt.params, &registry, &samples)?;
    let out = output_root(&opts.output_dir);
    write_atomic(&out.join("metrics.txt"), report.to_text().as_bytes())?;
    write_atomic(&out.join("metrics.csv"), report.to_csv().as_bytes())?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Correlation heatmaps

/// Refined-correlation magnitude of one class, resized to the image and
/// min-max normalized to `[0, 1]`; a constant map becomes all zeros.
pub fn correlation_heatmap<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    image: &ImageTensor<T>,
    registry: &ClassRegistry,
    class: usize,
) -> Result<Tensor<f64>> {
    let (_, volume) = model.correlations(store, image, registry)?;
    let (h, w, c) = (volume.height(), volume.width(), volume.channels());
    let mag = Tensor::<f64>::from_fn(&[h, w, 1], |i| {
        (0..c).map(|k| volume.grid.get(&[i[0], i[1], class, k]).to_f64_lossy().powi(2)).sum::<f64>().sqrt()
    });
    let side = image.side();
    let up = bilinear_tensor(&mag, side, side)?;
    let (lo, hi) = up.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    Ok(up.map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 }))
}

/// Dark-blue to yellow ramp for values in `[0, 1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] =
        [[0.05, 0.03, 0.25], [0.35, 0.05, 0.55], [0.75, 0.20, 0.35], [0.98, 0.55, 0.10], [0.99, 0.95, 0.55]];
    let v = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (v.floor() as usize).min(STOPS.len() - 2);
    let t = v - i as f64;
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = ((STOPS[i][k] * (1.0 - t) + STOPS[i + 1][k] * t) * 255.0).round() as u8;
    }
    out
}

#[derive(Clone, Debug)]
pub struct VizOptions {
    pub class_name: String,
    pub out_path: PathBuf,
    /// Also write the heatmap blended half-and-half over the image.
    pub overlay: Option<PathBuf>,
}

/// Writes a heatmap PNG of the named class for a square image. The
/// vocabulary and normalization come from `manifest`.
pub fn run_viz_corr(checkpoint: &Path, manifest: &Path, image_path: &Path, opts: &VizOptions) -> Result<Tensor<f64>> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let model = Model::new(ckpt.model.clone())?;
    let manifest = DatasetManifest::load(manifest)?;
    let registry = manifest.registry()?;
    let class = registry.index_of(&opts.class_name).ok_or_else(|| {
        Error::Config(format!("unknown class `{}`; known classes: {}", opts.class_name, registry.names().join(", ")))
    })?;
    let rgb = read_rgb(image_path)?;
    let image = ImageTensor::new(normalize::<f32>(&rgb, &manifest.normalization))?;
    let heat = correlation_heatmap(&model, &ckpt.params, &image, &registry, class)?;
    let side = image.side() as u32;
    let at = |x: u32, y: u32| heat.data()[(y * side + x) as usize];
    let png = |img: RgbImage, path: &Path| -> Result<()> {
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.into(), source: e })?;
        write_atomic(path, &bytes)
    };
    png(RgbImage::from_fn(side, side, |x, y| Rgb(colormap(at(x, y)))), &output_path(&opts.out_path))?;
    if let Some(p) = &opts.overlay {
        let blended = RgbImage::from_fn(side, side, |x, y| {
            let (a, b) = (rgb.get_pixel(x, y).0, colormap(at(x, y)));
            Rgb([0, 1, 2].map(|k| ((a[k] as u16 + b[k] as u16) / 2) as u8))
        });
        png(blended, &output_path(p))?;
    }
    Ok(heat)
}

/// Relative output paths are placed under the output-root override if set.
fn output_path(p: &Path) -> PathBuf {
    if p.is_relative() {
        if let Some(root) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(root).join(p);
        }
    }
    p.to_path_buf()
}

// ---------------------------------------------------------------------------
// Reports

/// Averages `metrics.txt` files into `report.txt` under `output_dir`.
pub fn run_report(inputs: &[PathBuf], output_dir: &Path) -> Result<MetricsReport> {
    let reports = inputs
        .iter()
        .map(|p| MetricsReport::from_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?))
        .collect::<Result<Vec<_>>>()?;
    let avg = average_reports(&reports)?;
    write_atomic(&output_root(output_dir).join("report.txt"), avg.to_text().as_bytes())?;
    Ok(avg)
}

/// Masks whose labels index a smaller or larger vocabulary: labels outside
/// `0..n_classes` become ignored.
pub fn restrict_mask(mask: &GroundTruthMask, n_classes: usize) -> GroundTruthMask {
    mask.map_labels(|l| if l != IGNORE_INDEX && l as usize >= n_classes { IGNORE_INDEX } else { l })
}
