//! Correlation feature refinement: guidance-conditioned (shifted-)window
//! attention over space, then linear attention over classes.
//!
//! All graph-level functions take and return class-major volumes
//! `(classes, h, w, d_phi)`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbones::{DenseFeatureMap, TextEmbeddingSet};
use crate::correlation::CorrelationVolume;
use crate::error::{Error, Result};
use crate::params::{init_layer_norm, init_linear, join, layer_norm, linear, Binder, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::Graph;

/// Additive score for attention pairs that straddle a cyclic-shift seam.
pub const SHIFT_MASK_VALUE: f64 = -100.0;

/// Stabilizer in the linear-attention normalizer.
pub const LINEAR_ATTENTION_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialRefineConfig {
    pub dim: usize,
    pub guidance_dim: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRefineConfig {
    pub dim: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

fn split_heads<'g, T: Scalar>(x: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    // (batch, tokens, c) -> (batch, heads, tokens, c / heads)
    let s = x.shape();
    x.reshape(&[s[0], s[1], heads, s[2] / heads])?.permute(&[0, 2, 1, 3])
}

fn merge_heads<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    x.permute(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], s[1] * s[3]])
}

fn init_mlp<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, ratio: usize, rng: &mut impl Rng) {
    init_linear(store, &join(prefix, "fc1"), dim, dim * ratio, rng);
    init_linear(store, &join(prefix, "fc2"), dim * ratio, dim, rng);
}

fn mlp<'g, T: Scalar>(b: &Binder<'g, T>, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    linear(b, &join(prefix, "fc2"), linear(b, &join(prefix, "fc1"), x)?.gelu())
}

// ---------------------------------------------------------------------------
// Spatial refinement

/// Two consecutive windowed attention blocks (regular, then shifted) applied
/// to every class slice with shared weights. Queries and keys see the slice
/// concatenated with projected guidance; values see the slice alone.
#[derive(Clone, Debug)]
pub struct SpatialRefiner {
    pub config: SpatialRefineConfig,
    pub prefix: String,
}

/// Effective `(window, shift)` for a grid side: the window shrinks to the
/// grid when the grid is smaller, and no shift is applied in that case.
pub fn window_and_shift(configured: usize, side: usize) -> (usize, usize) {
    if side <= configured {
        (side, 0)
    } else {
        (configured, configured / 2)
    }
}

/// Swin-style relative-position index for a `window x window` patch, into a
/// table sized for `table_window`.
fn relative_position_index(window: usize, table_window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * table_window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for a in 0..t {
        for b in 0..t {
            let dy = (a / window) as isize - (b / window) as isize + table_window as isize - 1;
            let dx = (a % window) as isize - (b % window) as isize + table_window as isize - 1;
            idx.push(dy as usize * span + dx as usize);
        }
    }
    idx
}

/// `(windows, t, t)` additive mask for the cyclically shifted grid.
fn shift_mask<T: Scalar>(h: usize, w: usize, window: usize, shift: (usize, usize)) -> Tensor<T> {
    let region = |i: usize, n: usize, shift: usize| {
        if shift == 0 || i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / window, w / window);
    let t = window * window;
    Tensor::from_fn(&[nh * nw, t, t], |i| {
        let (wy, wx) = (i[0] / nw, i[0] % nw);
        let cell = |k: usize| {
            let (y, x) = (wy * window + k / window, wx * window + k % window);
            region(y, h, shift.0) * 3 + region(x, w, shift.1)
        };
        if cell(i[1]) == cell(i[2]) {
            T::zero()
        } else {
            lit(SHIFT_MASK_VALUE)
        }
    })
}

fn roll_spatial<'g, T: Scalar>(x: Var<'g, T>, shift: (usize, usize), sign: isize) -> Result<Var<'g, T>> {
    let mut y = x;
    if shift.0 > 0 {
        y = y.roll(1, sign * shift.0 as isize)?;
    }
    if shift.1 > 0 {
        y = y.roll(2, sign * shift.1 as isize)?;
    }
    Ok(y)
}

impl SpatialRefiner {
    pub fn new(config: SpatialRefineConfig, prefix: impl Into<String>) -> Result<Self> {
        let c = &config;
        if c.heads == 0 || c.dim % c.heads != 0 || c.window == 0 {
            return Err(Error::Config(format!("spatial refinement: dim {} / heads {} / window {}", c.dim, c.heads, c.window)));
        }
        Ok(SpatialRefiner { config, prefix: prefix.into() })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = &self.config;
        let d = c.dim;
        init_linear(store, &join(&self.prefix, "guidance_proj"), c.guidance_dim, d, rng);
        for blk in ["block0", "block1"] {
            let p = join(&self.prefix, blk);
            init_layer_norm(store, &join(&p, "norm1"), d);
            init_linear(store, &join(&p, "q"), 2 * d, d, rng);
            init_linear(store, &join(&p, "k"), 2 * d, d, rng);
            init_linear(store, &join(&p, "v"), d, d, rng);
            let span = 2 * c.window - 1;
            store.insert(join(&p, "rel_bias"), Tensor::randn(&[span * span, c.heads], 0.02, rng));
            init_linear(store, &join(&p, "proj"), d, d, rng);
            init_layer_norm(store, &join(&p, "norm2"), d);
            init_mlp(store, &join(&p, "mlp"), d, c.mlp_ratio, rng);
        }
    }

    /// `phi` is class-major `(classes, h, w, d)`; `guidance` is `(h, w, d_g)`.
    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, T>, phi: Var<'g, T>, guidance: Var<'g, T>) -> Result<Var<'g, T>> {
        let (s, gs) = (phi.shape(), guidance.shape());
        let c = &self.config;
        if s.len() != 4 || s[3] != c.dim {
            return Err(Error::shape("spatial_refine", format!("volume {s:?}, expected (classes, h, w, {})", c.dim)));
        }
        if gs != [s[1], s[2], c.guidance_dim] {
            return Err(Error::shape(
                "spatial_refine",
                format!("guidance {gs:?} not aligned with grid ({}, {}, {})", s[1], s[2], c.guidance_dim),
            ));
        }
        let (win_h, shift_h) = window_and_shift(c.window, s[1]);
        let (win_w, shift_w) = window_and_shift(c.window, s[2]);
        if win_h != win_w || s[1] % win_h != 0 || s[2] % win_w != 0 {
            return Err(Error::shape(
                "spatial_refine",
                format!("window {} does not tile a {}x{} grid", c.window, s[1], s[2]),
            ));
        }
        let shift = (shift_h, shift_w);
        let pg = linear(b, &join(&self.prefix, "guidance_proj"), guidance)?.broadcast_to(&s)?;
        let x = self.block(b, "block0", phi, pg, win_h, (0, 0))?;
        self.block(b, "block1", x, pg, win_h, shift)
    }

    fn partition<'g, T: Scalar>(x: Var<'g, T>, window: usize) -> Result<Var<'g, T>> {
        let s = x.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        x.reshape(&[n, h / window, window, w / window, window, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n * (h / window) * (w / window), window * window, c])
    }

    fn unpartition<'g, T: Scalar>(x: Var<'g, T>, n: usize, h: usize, w: usize, window: usize) -> Result<Var<'g, T>> {
        let c = *x.shape().last().unwrap();
        x.reshape(&[n, h / window, w / window, window, window, c])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n, h, w, c])
    }

    fn block<'g, T: Scalar>(
        &self,
        b: &Binder<'g, T>,
        name: &str,
        x: Var<'g, T>,
        guidance: Var<'g, T>,
        window: usize,
        shift: (usize, usize),
    ) -> Result<Var<'g, T>> {
        let c = &self.config;
        let p = join(&self.prefix, name);
        let s = x.shape();
        let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
        let heads = c.heads;
        let t = window * window;

        let hn = layer_norm(b, &join(&p, "norm1"), x)?;
        let shifted = shift != (0, 0);
        let qk_in = roll_spatial(Var::concat(&[hn, guidance], 3)?, shift, -1)?;
        let v_in = roll_spatial(hn, shift, -1)?;
        let qk_win = Self::partition(qk_in, window)?;
        let v_win = Self::partition(v_in, window)?;
        let q = split_heads(linear(b, &join(&p, "q"), qk_win)?, heads)?;
        let k = split_heads(linear(b, &join(&p, "k"), qk_win)?, heads)?;
        let v = split_heads(linear(b, &join(&p, "v"), v_win)?, heads)?;

        let scale = lit::<T>(1.0 / ((d / heads) as f64).sqrt());
        let mut scores = q.matmul(k.transpose_last()?)?.scale(scale); // (n * nw, heads, t, t)
        let bias = b
            .param(&join(&p, "rel_bias"))?
            .index_select(Rc::new(relative_position_index(window, c.window)))?
            .reshape(&[t, t, heads])?
            .permute(&[2, 0, 1])?;
        scores = scores.add(bias)?;
        let nw = (h / window) * (w / window);
        if shifted {
            let mask = b.constant(shift_mask::<T>(h, w, window, shift)).reshape(&[nw, 1, t, t])?;
            scores = scores.reshape(&[n, nw, heads, t, t])?.add(mask)?.reshape(&[n * nw, heads, t, t])?;
        }
        let attn = scores.softmax_last()?.matmul(v)?;
        let out = linear(b, &join(&p, "proj"), merge_heads(attn)?)?;
        let out = roll_spatial(Self::unpartition(out, n, h, w, window)?, shift, 1)?;
        let x = x.add(out)?;
        let m = mlp(b, &join(&p, "mlp"), layer_norm(b, &join(&p, "norm2"), x)?)?;
        x.add(m)
    }
}

// ---------------------------------------------------------------------------
// Class refinement

/// Position-free linear-attention transformer layer over the class axis,
/// applied at every spatial position with shared weights. Queries and keys
/// see each class slot concatenated with its projected text embedding.
#[derive(Clone, Debug)]
pub struct ClassRefiner {
    pub config: ClassRefineConfig,
    pub prefix: String,
}

impl ClassRefiner {
    pub fn new(config: ClassRefineConfig, prefix: impl Into<String>) -> Result<Self> {
        if config.heads == 0 || config.dim % config.heads != 0 {
            return Err(Error::Config(format!("class refinement: dim {} / heads {}", config.dim, config.heads)));
        }
        Ok(ClassRefiner { config, prefix: prefix.into() })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = &self.config;
        let d = c.dim;
        let p = &self.prefix;
        init_linear(store, &join(p, "text_proj"), c.text_dim, d, rng);
        init_layer_norm(store, &join(p, "norm1"), d);
        init_linear(store, &join(p, "q"), 2 * d, d, rng);
        init_linear(store, &join(p, "k"), 2 * d, d, rng);
        init_linear(store, &join(p, "v"), d, d, rng);
        init_linear(store, &join(p, "proj"), d, d, rng);
        init_layer_norm(store, &join(p, "norm2"), d);
        init_mlp(store, &join(p, "mlp"), d, c.mlp_ratio, rng);
    }

    /// `phi` is class-major `(classes, h, w, d)`; `text` is the prompt-averaged
    /// `(classes, text_dim)`.
    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, T>, phi: Var<'g, T>, text: Var<'g, T>) -> Result<Var<'g, T>> {
        let (s, ts) = (phi.shape(), text.shape());
        let c = &self.config;
        if s.len() != 4 || s[3] != c.dim {
            return Err(Error::shape("class_refine", format!("volume {s:?}, expected (classes, h, w, {})", c.dim)));
        }
        if ts != [s[0], c.text_dim] {
            return Err(Error::shape(
                "class_refine",
                format!("text {ts:?} does not match {} classes of width {}", s[0], c.text_dim),
            ));
        }
        let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
        let p = &self.prefix;
        let x = phi.permute(&[1, 2, 0, 3])?.reshape(&[h * w, n, d])?;
        let guide = linear(b, &join(p, "text_proj"), text)?.broadcast_to(&[h * w, n, d])?;

        let hn = layer_norm(b, &join(p, "norm1"), x)?;
        let qk_in = Var::concat(&[hn, guide], 2)?;
        let q = split_heads(linear(b, &join(p, "q"), qk_in)?, c.heads)?.elu_plus_one();
        let k = split_heads(linear(b, &join(p, "k"), qk_in)?, c.heads)?.elu_plus_one();
        let v = split_heads(linear(b, &join(p, "v"), hn)?, c.heads)?;
        // Σ_j φ(k_j) v_jᵀ and Σ_j φ(k_j), contracted with φ(q_i).
        let kv = k.transpose_last()?.matmul(v)?;
        let num = q.matmul(kv)?;
        let ksum = k.sum_axis(2, true)?.transpose_last()?;
        let den = q.matmul(ksum)?.add_scalar(lit(LINEAR_ATTENTION_EPS));
        let attn = num.div(den)?;
        let out = linear(b, &join(p, "proj"), merge_heads(attn)?)?;
        let x = x.add(out)?;
        let x = x.add(mlp(b, &join(p, "mlp"), layer_norm(b, &join(p, "norm2"), x)?)?)?;
        x.reshape(&[h, w, n, d])?.permute(&[2, 0, 1, 3])
    }
}

// ---------------------------------------------------------------------------
// Stack

/// One spatial + class refinement stage.
#[derive(Clone, Debug)]
pub struct RefineBlock {
    pub spatial: SpatialRefiner,
    pub class: ClassRefiner,
}

#[derive(Clone, Debug)]
pub struct RefineStack {
    pub blocks: Vec<RefineBlock>,
}

impl RefineStack {
    pub fn new(
        spatial: SpatialRefineConfig,
        class: ClassRefineConfig,
        count: usize,
        prefix: &str,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("refinement stack needs at least one block".into()));
        }
        let blocks = (0..count)
            .map(|i| {
                let p = join(prefix, &i.to_string());
                Ok(RefineBlock {
                    spatial: SpatialRefiner::new(spatial.clone(), join(&p, "spatial"))?,
                    class: ClassRefiner::new(class.clone(), join(&p, "class"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RefineStack { blocks })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for blk in &self.blocks {
            blk.spatial.init(store, rng);
            blk.class.init(store, rng);
        }
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        b: &Binder<'g, T>,
        phi: Var<'g, T>,
        guidance: Var<'g, T>,
        text: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let mut x = phi;
        for blk in &self.blocks {
            x = blk.spatial.forward(b, x, guidance)?;
            x = blk.class.forward(b, x, text)?;
        }
        Ok(x)
    }
}

/// Tensor-level spatial refinement on an `(h, w, classes, d)` volume.
pub fn spatial_refine<T: Scalar>(
    phi: &CorrelationVolume<T>,
    guidance: &DenseFeatureMap<T>,
    refiner: &SpatialRefiner,
    store: &ParamStore<T>,
) -> Result<CorrelationVolume<T>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let out = refiner.forward(&b, g.constant(phi.to_class_major()), g.constant(guidance.grid.clone()))?;
    CorrelationVolume::from_class_major(&out.value())
}

/// Tensor-level class refinement on an `(h, w, classes, d)` volume.
pub fn class_refine<T: Scalar>(
    phi: &CorrelationVolume<T>,
    text: &TextEmbeddingSet<T>,
    refiner: &ClassRefiner,
    store: &ParamStore<T>,
) -> Result<CorrelationVolume<T>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let out = refiner.forward(&b, g.constant(phi.to_class_major()), g.constant(text.prompt_averaged.clone()))?;
    CorrelationVolume::from_class_major(&out.value())
}

pub fn refine_stack<T: Scalar>(
    phi: &CorrelationVolume<T>,
    guidance: &DenseFeatureMap<T>,
    text: &TextEmbeddingSet<T>,
    stack: &RefineStack,
    store: &ParamStore<T>,
) -> Result<CorrelationVolume<T>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let out = stack.forward(
        &b,
        g.constant(phi.to_class_major()),
        g.constant(guidance.grid.clone()),
        g.constant(text.prompt_averaged.clone()),
    )?;
    CorrelationVolume::from_class_major(&out.value())
}
