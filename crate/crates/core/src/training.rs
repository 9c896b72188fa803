//! Losses, the parameter-group policy, AdamW and the optimization step.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbones::{ClassRegistry, ImageTensor};
use crate::backprojection::semantic_loss_vars;
use crate::decoder::SegmentationLogits;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::pipeline::Model;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::Graph;

pub const IGNORE_INDEX: u8 = 255;

/// Square map of class indices; [`IGNORE_INDEX`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMask {
    side: usize,
    labels: Vec<u8>,
}

impl GroundTruthMask {
    pub fn new(side: usize, labels: Vec<u8>) -> Result<Self> {
        if side == 0 || labels.len() != side * side {
            return Err(Error::shape("GroundTruthMask", format!("{} labels for a {side}x{side} mask", labels.len())));
        }
        Ok(GroundTruthMask { side, labels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.side + x]
    }

    /// Rejects labels outside `0..n_classes` other than the ignore value.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l != IGNORE_INDEX && l as usize >= n_classes) {
            Some(i) => Err(Error::Data(format!("mask value {} at pixel {i} is not a class index (< {n_classes})", self.labels[i]))),
            None => Ok(()),
        }
    }

    pub fn map_labels(&self, f: impl Fn(u8) -> u8) -> Self {
        GroundTruthMask { side: self.side, labels: self.labels.iter().map(|&l| f(l)).collect() }
    }

    /// Re-indexes a full-vocabulary mask to the seen-only training vocabulary;
    /// unseen classes become ignored.
    pub fn to_training_labels(&self, registry: &ClassRegistry) -> Result<Self> {
        self.validate(registry.len())?;
        let mut map = [IGNORE_INDEX; 256];
        for (train, full) in registry.seen_indices().into_iter().enumerate() {
            map[full] = train as u8;
        }
        Ok(self.map_labels(|l| if l == IGNORE_INDEX { l } else { map[l as usize] }))
    }
}

// ---------------------------------------------------------------------------
// Losses

/// Per-class binary cross-entropy from logits, summed over classes and
/// averaged over labeled pixels. Returns `None` when every pixel is ignored.
pub fn bce_loss_vars<'g, T: Scalar>(logits: Var<'g, T>, mask: &GroundTruthMask) -> Result<Option<Var<'g, T>>> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != mask.side() || s[1] != mask.side() {
        return Err(Error::shape("bce_loss", format!("logits {s:?} vs {}x{} mask", mask.side(), mask.side())));
    }
    let n = s[2];
    mask.validate(n)?;
    if !logits.value().all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let labeled = mask.labels().iter().filter(|&&l| l != IGNORE_INDEX).count();
    if labeled == 0 {
        return Ok(None);
    }
    let targets = Tensor::from_fn(&s, |i| if mask.get(i[0], i[1]) as usize == i[2] { T::one() } else { T::zero() });
    let valid = Tensor::from_fn(&[s[0], s[1], 1], |i| if mask.get(i[0], i[1]) == IGNORE_INDEX { T::zero() } else { T::one() });
    let g = logits.graph();
    let per = logits.softplus().sub(logits.mul(g.constant(targets))?)?;
    let total = per.mul(g.constant(valid))?.sum_all();
    Ok(Some(total.scale(lit(1.0 / labeled as f64))))
}

pub fn bce_loss<T: Scalar>(logits: &SegmentationLogits<T>, mask: &GroundTruthMask) -> Result<T> {
    let g = Graph::new();
    match bce_loss_vars(g.constant(logits.grid.clone()), mask)? {
        Some(l) => Ok(l.value().data()[0]),
        None => {
            log::warn!("bce_loss: every pixel is ignored; loss defined as 0");
            Ok(T::zero())
        }
    }
}

/// Unit-weight sum of the two objectives.
pub fn total_loss<T: Scalar>(bce: T, sem: T) -> T {
    bce + sem
}

// ---------------------------------------------------------------------------
// Parameter groups

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Query/value projections of the vision-language encoders.
    VlQv,
    /// Everything downstream of the encoders.
    Main,
    /// Remaining encoder weights.
    Frozen,
}

pub fn classify_param(name: &str) -> Result<ParamGroup> {
    let top = name.split('.').next().unwrap_or("");
    match top {
        "vl" => {
            let qv = name.split('.').any(|s| s == "q_proj" || s == "v_proj");
            Ok(if qv { ParamGroup::VlQv } else { ParamGroup::Frozen })
        }
        "guidance" => Ok(ParamGroup::Frozen),
        "fusion" | "refine" | "backproj" | "decoder" => Ok(ParamGroup::Main),
        _ => Err(Error::UnclassifiedParam(name.to_string())),
    }
}

/// Parameter names per group, in store order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamPartition {
    pub vl_qv: Vec<String>,
    pub main: Vec<String>,
    pub frozen: Vec<String>,
}

impl ParamPartition {
    pub fn group(&self, g: ParamGroup) -> &[String] {
        match g {
            ParamGroup::VlQv => &self.vl_qv,
            ParamGroup::Main => &self.main,
            ParamGroup::Frozen => &self.frozen,
        }
    }
}

pub fn partition_parameters<T: Scalar>(store: &ParamStore<T>) -> Result<ParamPartition> {
    let mut p = ParamPartition::default();
    for name in store.names() {
        let list = match classify_param(name)? {
            ParamGroup::VlQv => &mut p.vl_qv,
            ParamGroup::Main => &mut p.main,
            ParamGroup::Frozen => &mut p.frozen,
        };
        list.push(name.to_string());
    }
    Ok(p)
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("norm") || name.ends_with("rel_bias"))
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_vl: f64,
    pub lr_other: f64,
    pub batch_size: usize,
    /// Defaults to the per-dataset budget of the matching preset.
    pub max_iters: Option<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub bce_weight: f64,
    pub sem_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_vl: 2e-6,
            lr_other: 2e-4,
            batch_size: 4,
            max_iters: None,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            bce_weight: 1.0,
            sem_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [("lr_vl", self.lr_vl), ("lr_other", self.lr_other)];
        for (k, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a non-negative finite number, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("optimizer betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }

    /// Iteration budget for a dataset: the explicit setting, else the preset
    /// budget for known benchmark names, else 10000.
    pub fn iterations(&self, dataset: &str) -> usize {
        self.max_iters
            .or_else(|| crate::data::preset_manifest(dataset).map(|(_, n)| n))
            .unwrap_or(10_000)
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::VlQv => self.lr_vl,
            ParamGroup::Main => self.lr_other,
            ParamGroup::Frozen => 0.0,
        }
    }
}

/// AdamW with decoupled weight decay. Frozen parameters get no state and are
/// never written.
#[derive(Clone, Debug, Default)]
pub struct AdamW<T> {
    pub step: u64,
    moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new() -> Self {
        AdamW { step: 0, moments: HashMap::new() }
    }

    /// Applies one update. `grads` must contain every non-frozen parameter.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &ParamStore<T>, cfg: &TrainConfig) -> Result<()> {
        let partition = partition_parameters(store)?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for group in [ParamGroup::VlQv, ParamGroup::Main] {
            let lr = cfg.lr(group);
            for name in partition.group(group) {
                let g = grads.require(name)?;
                let p = store.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
                let (m, v) = self
                    .moments
                    .entry(name.clone())
                    .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
                let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
                let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
                for i in 0..pd.len() {
                    let gi = gd[i].to_f64_lossy();
                    let mi = b1 * md[i].to_f64_lossy() + (1.0 - b1) * gi;
                    let vi = b2 * vd[i].to_f64_lossy() + (1.0 - b2) * gi * gi;
                    md[i] = T::from_f64_lossy(mi);
                    vd[i] = T::from_f64_lossy(vi);
                    let mut x = pd[i].to_f64_lossy();
                    x -= lr * wd * x;
                    x -= lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                    pd[i] = T::from_f64_lossy(x);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Step

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub bce: f64,
    pub sem: f64,
    pub total: f64,
}

/// Weighted batch losses on the graph: `(bce, sem, total)`.
pub fn batch_losses<'g, T: Scalar>(
    b: &Binder<'g, T>,
    model: &Model,
    registry: &ClassRegistry,
    batch: &[(ImageTensor<T>, GroundTruthMask)],
    cfg: &TrainConfig,
) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let g = b.graph();
    let text = model.encode_text(b, registry)?;
    let mut bce_terms = Vec::new();
    let mut sem_terms = Vec::new();
    for (image, mask) in batch {
        let out = model.forward(b, g.constant(image.pixels().clone()), &text, true)?;
        match bce_loss_vars(out.logits, mask)? {
            Some(l) => bce_terms.push(l),
            None => log::warn!("training image with every pixel ignored contributes no classification loss"),
        }
        let psi = out.psi.expect("training forward produces a reconstruction");
        sem_terms.push(semantic_loss_vars(psi, out.guidance3)?);
    }
    let mean = |terms: &[Var<'g, T>]| -> Result<Var<'g, T>> {
        if terms.is_empty() {
            return Ok(g.constant(Tensor::scalar(T::zero())));
        }
        let n = terms.len();
        let stacked = Var::concat(&terms.iter().map(|t| t.reshape(&[1])).collect::<Result<Vec<_>>>()?, 0)?;
        Ok(stacked.sum_all().scale(lit(1.0 / n as f64)))
    };
    let bce = mean(&bce_terms)?;
    let sem = mean(&sem_terms)?;
    let total = bce.scale(lit(cfg.bce_weight)).add(sem.scale(lit(cfg.sem_weight)))?;
    Ok((bce, sem, total))
}

/// Forward, backward and one optimizer update. On a non-finite loss or
/// gradient the parameters and optimizer state are left untouched.
pub fn train_step<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    registry: &ClassRegistry,
    batch: &[(ImageTensor<T>, GroundTruthMask)],
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let grads = {
        let graph = Graph::new();
        let binder = Binder::new(&graph, &*store, true);
        let (bce, sem, total) = batch_losses(&binder, model, registry, batch, cfg)?;
        let record = LossRecord {
            bce: bce.value().data()[0].to_f64_lossy(),
            sem: sem.value().data()[0].to_f64_lossy(),
            total: total.value().data()[0].to_f64_lossy(),
        };
        if !(record.bce.is_finite() && record.sem.is_finite() && record.total.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at step {} (bce {}, sem {}, total {})",
                opt.step + 1,
                record.bce,
                record.sem,
                record.total
            )));
        }
        let g = graph.backward(total)?;
        let grads = binder.gradients(&g);
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at step {}", opt.step + 1)));
        }
        (grads, record)
    };
    opt.update(store, &grads.0, cfg)?;
    Ok(grads.1)
}

/// Sample indices for iteration `iter` (0-based): epochs are seeded
/// shuffles of `0..n`, consumed `batch` at a time with wrap-around.
pub fn batch_indices(n: usize, batch: usize, iter: usize, seed: u64) -> Vec<usize> {
    let mut cache: IndexMap<usize, Vec<usize>> = IndexMap::new();
    let mut order = |epoch: usize| {
        cache
            .entry(epoch)
            .or_insert_with(|| {
                let mut v: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                v.shuffle(&mut rng);
                v
            })
            .clone()
    };
    (0..batch)
        .map(|k| {
            let pos = iter * batch + k;
            order(pos / n)[pos % n]
        })
        .collect()
}
