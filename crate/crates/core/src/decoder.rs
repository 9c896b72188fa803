//! Two-stage attention-aware upsampling decoder and the per-class logit head.
//!
//! Each stage doubles the grid with a stride-2 transposed convolution, derives
//! spatial and channel attention from the class-averaged result, uses them to
//! modulate a guidance map at the new resolution, and fuses the two with a
//! convolution shared across classes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbones::DenseFeatureMap;
use crate::correlation::CorrelationVolume;
use crate::error::{Error, Result};
use crate::params::{conv, init_conv, init_linear, join, linear, Binder, ParamStore};
use crate::resize::{bilinear, nearest};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Graph;

pub const SPATIAL_ATTENTION_KERNEL: usize = 7;
pub const FUSION_KERNEL: usize = 3;
pub const HEAD_KERNEL: usize = 3;

/// Per-class logits `(out_px, out_px, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationLogits<T> {
    pub grid: Tensor<T>,
}

impl<T: Scalar> SegmentationLogits<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        if grid.rank() != 3 || grid.shape()[0] != grid.shape()[1] {
            return Err(Error::shape("SegmentationLogits", format!("expected (px, px, classes), got {:?}", grid.shape())));
        }
        Ok(SegmentationLogits { grid })
    }

    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.grid.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub guidance_dim: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub config: StageConfig,
    pub prefix: String,
}

impl DecoderStage {
    pub fn new(config: StageConfig, prefix: impl Into<String>) -> Self {
        DecoderStage { config, prefix: prefix.into() }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = &self.config;
        let p = &self.prefix;
        let std = (1.0 / c.in_dim as f64).sqrt();
        store.insert(join(p, "up.weight"), Tensor::randn(&[2, 2, c.in_dim, c.out_dim], std, rng));
        store.insert(join(p, "up.bias"), Tensor::zeros(&[c.out_dim]));
        init_conv(store, &join(p, "attn_spatial"), SPATIAL_ATTENTION_KERNEL, 1, 1, rng);
        init_linear(store, &join(p, "attn_channel"), c.out_dim, c.guidance_dim, rng);
        init_conv(store, &join(p, "fuse"), FUSION_KERNEL, c.out_dim + c.guidance_dim, c.out_dim, rng);
    }

    /// Stride-2, 2x2 transposed convolution on `(classes, h, w, in_dim)`:
    /// input cell `(y, x)` writes `K[a, b]` scaled by its features to output
    /// cell `(2y + a, 2x + b)`.
    pub fn upsample<'g, T: Scalar>(&self, b: &Binder<'g, T>, phi: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = phi.shape();
        let c = &self.config;
        if s.len() != 4 || s[3] != c.in_dim {
            return Err(Error::shape("upsample2x", format!("volume {s:?}, expected {} channels", c.in_dim)));
        }
        let (n, h, w) = (s[0], s[1], s[2]);
        let k = b
            .param(&join(&self.prefix, "up.weight"))?
            .permute(&[2, 0, 1, 3])?
            .reshape(&[c.in_dim, 4 * c.out_dim])?;
        let y = phi.matmul(k)?.reshape(&[n, h, w, 2, 2, c.out_dim])?;
        let y = y.permute(&[0, 1, 3, 2, 4, 5])?.reshape(&[n, 2 * h, 2 * w, c.out_dim])?;
        y.add(b.param(&join(&self.prefix, "up.bias"))?)
    }

    /// Spatial `(h, w, 1)` and channel `(1, 1, guidance_dim)` attention from a
    /// class-averaged `(h, w, out_dim)` feature.
    pub fn attentions<'g, T: Scalar>(&self, b: &Binder<'g, T>, avg: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = avg.shape();
        if s.len() != 3 || s[2] != self.config.out_dim {
            return Err(Error::shape("compute_attentions", format!("feature {s:?}, expected {} channels", self.config.out_dim)));
        }
        let pooled_map = avg.mean_axis(2, true)?.reshape(&[1, s[0], s[1], 1])?;
        let a_sp = conv(b, &join(&self.prefix, "attn_spatial"), pooled_map)?.reshape(&[s[0], s[1], 1])?;
        let pooled_vec = avg.mean_axis(0, false)?.mean_axis(0, true)?;
        let a_ch = linear(b, &join(&self.prefix, "attn_channel"), pooled_vec)?.reshape(&[1, 1, self.config.guidance_dim])?;
        Ok((a_sp, a_ch))
    }

    /// Concatenates each class slice with the modulated guidance and applies
    /// the fusion convolution.
    pub fn fuse<'g, T: Scalar>(&self, b: &Binder<'g, T>, up: Var<'g, T>, guidance: Var<'g, T>) -> Result<Var<'g, T>> {
        let (s, gs) = (up.shape(), guidance.shape());
        if s.len() != 4 || gs.len() != 3 || gs[..2] != s[1..3] || gs[2] != self.config.guidance_dim || s[3] != self.config.out_dim {
            return Err(Error::shape("fuse_stage", format!("volume {s:?} vs guidance {gs:?}")));
        }
        let g = guidance.broadcast_to(&[s[0], s[1], s[2], gs[2]])?;
        conv(b, &join(&self.prefix, "fuse"), Var::concat(&[up, g], 3)?)
    }

    /// Full stage; `guidance` must already be at the output grid.
    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, T>, phi: Var<'g, T>, guidance: Var<'g, T>) -> Result<Var<'g, T>> {
        let up = self.upsample(b, phi)?;
        let (a_sp, a_ch) = self.attentions(b, up.mean_axis(0, false)?)?;
        let fg = modulate_guidance(guidance, a_sp, a_ch)?;
        self.fuse(b, up, fg)
    }
}

/// `A_sp ⊙ g + A_ch ⊙ g + g`, with `A_sp` broadcast over channels and `A_ch`
/// over space. `g` is already at the attention grid.
pub fn modulate_guidance<'g, T: Scalar>(g: Var<'g, T>, a_sp: Var<'g, T>, a_ch: Var<'g, T>) -> Result<Var<'g, T>> {
    let (gs, ss, cs) = (g.shape(), a_sp.shape(), a_ch.shape());
    if gs.len() != 3 || ss != [gs[0], gs[1], 1] || cs != [1, 1, gs[2]] {
        return Err(Error::shape("transform_guidance", format!("guidance {gs:?}, spatial {ss:?}, channel {cs:?}")));
    }
    g.mul(a_sp)?.add(g.mul(a_ch)?)?.add(g)
}

/// Brings a raw guidance map to a stage grid: nearest x2 when it sits at half
/// the grid, identity when it already matches, bilinear resampling otherwise.
/// Maps coarser than half the grid are rejected.
pub fn align_guidance<'g, T: Scalar>(g: Var<'g, T>, grid: usize) -> Result<Var<'g, T>> {
    let s = g.shape();
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::shape("align_guidance", format!("expected a square (h, w, c) map, got {s:?}")));
    }
    if s[0] * 2 == grid {
        nearest(g, 0, 2)
    } else if s[0] == grid {
        Ok(g)
    } else if s[0] * 2 > grid {
        bilinear(g, 0, grid, grid)
    } else {
        Err(Error::shape("align_guidance", format!("guidance side {} too coarse for stage grid {grid}", s[0])))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_phi: usize,
    /// Feature width after each stage.
    pub dims: [usize; 2],
    /// Channel widths of the guidance levels feeding each stage (level 2,
    /// then level 1).
    pub guidance_dims: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub stages: [DecoderStage; 2],
    pub prefix: String,
}

impl Decoder {
    pub fn new(config: DecoderConfig, prefix: impl Into<String>) -> Self {
        let prefix = prefix.into();
        let s1 = StageConfig { in_dim: config.d_phi, out_dim: config.dims[0], guidance_dim: config.guidance_dims[0] };
        let s2 = StageConfig { in_dim: config.dims[0], out_dim: config.dims[1], guidance_dim: config.guidance_dims[1] };
        let stages = [DecoderStage::new(s1, join(&prefix, "stage1")), DecoderStage::new(s2, join(&prefix, "stage2"))];
        Decoder { config, stages, prefix }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for s in &self.stages {
            s.init(store, rng);
        }
        init_conv(store, &join(&self.prefix, "head"), HEAD_KERNEL, self.config.dims[1], 1, rng);
    }

    /// Class-major `(classes, h, w, d_phi)` plus raw guidance levels 2 and 1
    /// to logits `(out_px, out_px, classes)`. A GELU follows each stage.
    pub fn forward<'g, T: Scalar>(
        &self,
        b: &Binder<'g, T>,
        phi: Var<'g, T>,
        level2: Var<'g, T>,
        level1: Var<'g, T>,
        out_px: usize,
    ) -> Result<Var<'g, T>> {
        let s = phi.shape();
        if s.len() != 4 || s[1] != s[2] {
            return Err(Error::shape("decode", format!("expected a square class-major volume, got {s:?}")));
        }
        let (n, side) = (s[0], s[1]);
        let g2 = align_guidance(level2, 2 * side)?;
        let x = self.stages[0].forward(b, phi, g2)?.gelu();
        let g1 = align_guidance(level1, 4 * side)?;
        let x = self.stages[1].forward(b, x, g1)?.gelu();
        let logits = conv(b, &join(&self.prefix, "head"), x)?.reshape(&[n, 4 * side, 4 * side])?;
        bilinear(logits, 1, out_px, out_px)?.permute(&[1, 2, 0])
    }
}

// ---------------------------------------------------------------------------
// Tensor-level entry points.

pub fn upsample2x<T: Scalar>(phi: &CorrelationVolume<T>, stage: &DecoderStage, store: &ParamStore<T>) -> Result<CorrelationVolume<T>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let out = stage.upsample(&b, g.constant(phi.to_class_major()))?;
    CorrelationVolume::from_class_major(&out.value())
}

/// Returns `(A_sp (h, w, 1), A_ch (1, 1, guidance_dim))`.
pub fn compute_attentions<T: Scalar>(
    class_avg: &DenseFeatureMap<T>,
    stage: &DecoderStage,
    store: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let (a, c) = stage.attentions(&b, g.constant(class_avg.grid.clone()))?;
    Ok(((*a.value()).clone(), (*c.value()).clone()))
}

/// Nearest x2 upsampling of `g` followed by attention modulation.
pub fn transform_guidance<T: Scalar>(g: &DenseFeatureMap<T>, a_sp: &Tensor<T>, a_ch: &Tensor<T>) -> Result<DenseFeatureMap<T>> {
    let graph = Graph::new();
    let up = nearest(graph.constant(g.grid.clone()), 0, 2)?;
    let out = modulate_guidance(up, graph.constant(a_sp.clone()), graph.constant(a_ch.clone()))?;
    DenseFeatureMap::new((*out.value()).clone(), (g.stride / 2).max(1))
}

pub fn fuse_stage<T: Scalar>(
    phi2x: &CorrelationVolume<T>,
    fg: &DenseFeatureMap<T>,
    stage: &DecoderStage,
    store: &ParamStore<T>,
) -> Result<CorrelationVolume<T>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let out = stage.fuse(&b, g.constant(phi2x.to_class_major()), g.constant(fg.grid.clone()))?;
    CorrelationVolume::from_class_major(&out.value())
}

pub fn decode<T: Scalar>(
    phi: &CorrelationVolume<T>,
    level2: &DenseFeatureMap<T>,
    level1: &DenseFeatureMap<T>,
    decoder: &Decoder,
    store: &ParamStore<T>,
    out_px: usize,
) -> Result<SegmentationLogits<T>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let out = decoder.forward(
        &b,
        g.constant(phi.to_class_major()),
        g.constant(level2.grid.clone()),
        g.constant(level1.grid.clone()),
        out_px,
    )?;
    SegmentationLogits::new((*out.value()).clone())
}
