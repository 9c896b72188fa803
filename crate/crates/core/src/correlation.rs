//! Image-text cosine correlation and its fusion across rotations and prompts.
//!
//! Inside the graph, correlation volumes are class-major `(classes, h, w,
//! channels)` so that per-class spatial operators can treat the class axis as
//! a batch. The public [`CorrelationVolume`] type uses `(h, w, classes,
//! channels)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbones::{DenseFeatureMap, TextEmbeddingSet};
use crate::error::{Error, Result};
use crate::params::{conv, init_conv, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Graph;

/// Per-position, per-class correlation features `(h, w, classes, channels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume<T> {
    pub grid: Tensor<T>,
}

impl<T: Scalar> CorrelationVolume<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        let s = grid.shape();
        if s.len() != 4 || s.iter().any(|&d| d == 0) {
            return Err(Error::shape("CorrelationVolume", format!("expected (h, w, classes, channels), got {s:?}")));
        }
        if !grid.all_finite() {
            return Err(Error::NonFinite("correlation volume".into()));
        }
        Ok(CorrelationVolume { grid })
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn n_classes(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[3]
    }

    /// Class-major `(classes, h, w, channels)` copy.
    pub fn to_class_major(&self) -> Tensor<T> {
        self.grid.permute(&[2, 0, 1, 3]).expect("rank 4")
    }

    pub fn from_class_major(t: &Tensor<T>) -> Result<Self> {
        Self::new(t.permute(&[1, 2, 0, 3])?)
    }

    /// Volume whose class `i` is this volume's class `perm[i]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        let s = self.grid.shape();
        let grid = Tensor::from_fn(s, |i| self.grid.get(&[i[0], i[1], perm[i[2]], i[3]]));
        CorrelationVolume { grid }
    }
}

/// Cosine similarity of every visual cell with every class prompt:
/// `(h, w, d)` x `(classes, prompts, d)` -> `(h, w, classes, prompts)`.
/// Zero vectors correlate to 0.
pub fn cosine_correlation_vars<'g, T: Scalar>(visual: Var<'g, T>, text: Var<'g, T>) -> Result<Var<'g, T>> {
    let (vs, ts) = (visual.shape(), text.shape());
    if vs.len() != 3 || ts.len() != 3 || vs[2] != ts[2] {
        return Err(Error::shape("cosine_correlation", format!("visual {vs:?} vs text {ts:?}")));
    }
    let (h, w, d) = (vs[0], vs[1], vs[2]);
    let (n, p) = (ts[0], ts[1]);
    let v = visual.reshape(&[h * w, d])?.l2_normalize_last()?;
    let t = text.reshape(&[n * p, d])?.l2_normalize_last()?;
    let sim = v.matmul(t.transpose_last()?)?.clamp(-T::one(), T::one());
    sim.reshape(&[h, w, n, p])
}

pub fn cosine_correlation<T: Scalar>(visual: &DenseFeatureMap<T>, text: &TextEmbeddingSet<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let out = cosine_correlation_vars(g.constant(visual.grid.clone()), g.constant(text.per_prompt.clone()))?;
    Ok((*out.value()).clone())
}

/// Stacks per-angle `(h, w, classes, prompts)` maps angle-major along the
/// last axis: channel `a * prompts + i` is angle `a`, prompt `i`.
pub fn stack_angles<'g, T: Scalar>(per_angle: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let first = per_angle.first().ok_or_else(|| Error::shape("stack_angles", "no angles"))?.shape();
    for v in per_angle {
        if v.shape() != first {
            return Err(Error::shape("stack_angles", format!("{:?} vs {:?}", v.shape(), first)));
        }
    }
    Var::concat(per_angle, 3)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// `|angles| * prompts`.
    pub in_channels: usize,
    pub d_phi: usize,
    pub kernel: usize,
}

/// Convolution over the stacked correlation channels, shared across classes.
#[derive(Clone, Debug)]
pub struct CorrelationFusion {
    pub config: FusionConfig,
    pub prefix: String,
}

impl CorrelationFusion {
    pub fn new(config: FusionConfig, prefix: impl Into<String>) -> Self {
        CorrelationFusion { config, prefix: prefix.into() }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = &self.config;
        init_conv(store, &self.prefix, c.kernel, c.in_channels, c.d_phi, rng);
    }

    /// `(h, w, classes, in_channels)` stacked maps to class-major
    /// `(classes, h, w, d_phi)`.
    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, T>, stacked: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = stacked.shape();
        if s.len() != 4 || s[3] != self.config.in_channels {
            return Err(Error::shape(
                "fuse_correlations",
                format!("stacked maps {s:?}, expected {} channels", self.config.in_channels),
            ));
        }
        conv(b, &self.prefix, stacked.permute(&[2, 0, 1, 3])?)
    }
}

/// Fuses per-angle raw maps `(h, w, classes, prompts)` into the initial
/// correlation feature.
pub fn fuse_correlations<T: Scalar>(
    per_angle_raw: &[Tensor<T>],
    fusion: &CorrelationFusion,
    store: &ParamStore<T>,
) -> Result<CorrelationVolume<T>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let vars: Vec<Var<'_, T>> = per_angle_raw.iter().map(|t| g.constant(t.clone())).collect();
    for v in &vars {
        if v.shape().len() != 4 {
            return Err(Error::shape("fuse_correlations", format!("raw map {:?} is not (h, w, classes, prompts)", v.shape())));
        }
    }
    let out = fusion.forward(&b, stack_angles(&vars)?)?;
    CorrelationVolume::from_class_major(&out.value())
}
