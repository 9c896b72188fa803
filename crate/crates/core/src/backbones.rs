//! Encoder interfaces, the rotation ensemble, prompt construction and the
//! deterministic stub encoders used for desk-scale runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{flip_tensor, Var};
use crate::error::{Error, Result};
use crate::params::{init_linear, join, linear, Binder, ParamStore};
use crate::resize;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use crate::Graph;

/// Placeholder substituted with the class name in prompt templates.
pub const CLASS_PLACEHOLDER: &str = "[CLS]";

/// Prompt templates tailored to overhead imagery.
pub const REMOTE_SENSING_TEMPLATES: [&str; 4] = [
    "A satellite image of a [CLS]",
    "A land use image of a [CLS]",
    "A remote sensing image of a [CLS]",
    "An aerial image of a [CLS]",
];

// ---------------------------------------------------------------------------
// Domain types

/// Square RGB image, channels-last `(side, side, 3)`, already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    pixels: Tensor<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 3 || s[0] == 0 {
            return Err(Error::shape("ImageTensor", format!("expected (side, side, 3), got {s:?}")));
        }
        if s[0] != s[1] {
            return Err(Error::shape("ImageTensor", format!("image must be square, got {}x{}", s[0], s[1])));
        }
        if !pixels.all_finite() {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(ImageTensor { pixels })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<T> {
        self.pixels
    }

    pub fn rotated(&self, angle_deg: i32) -> Result<Self> {
        Ok(ImageTensor { pixels: rotate_grid(&self.pixels, angle_deg)? })
    }
}

/// Spatial feature grid `(h, w, channels)` with its stride in input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatureMap<T> {
    pub grid: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> DenseFeatureMap<T> {
    pub fn new(grid: Tensor<T>, stride: usize) -> Result<Self> {
        let s = grid.shape();
        if s.len() != 3 || s.iter().any(|&d| d == 0) || stride == 0 {
            return Err(Error::shape("DenseFeatureMap", format!("grid {s:?}, stride {stride}")));
        }
        if !grid.all_finite() {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(DenseFeatureMap { grid, stride })
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn rotated(&self, angle_deg: i32) -> Result<Self> {
        Ok(DenseFeatureMap { grid: rotate_grid(&self.grid, angle_deg)?, stride: self.stride })
    }
}

/// Three guidance levels, shallow to deep.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePyramid<T> {
    pub levels: [DenseFeatureMap<T>; 3],
}

impl<T: Scalar> GuidancePyramid<T> {
    pub fn level(&self, i: usize) -> &DenseFeatureMap<T> {
        &self.levels[i]
    }

    /// Bilinearly resizes the deepest level onto a `grid x grid` lattice.
    pub fn align_deepest(&mut self, grid: usize, image_side: usize) -> Result<()> {
        let l3 = &self.levels[2];
        if l3.height() != grid || l3.width() != grid {
            let resized = resize::bilinear_tensor(&l3.grid, grid, grid)?;
            self.levels[2] = DenseFeatureMap::new(resized, (image_side / grid).max(1))?;
        }
        Ok(())
    }
}

/// Text embeddings per class and prompt, plus their prompt average.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingSet<T> {
    pub per_prompt: Tensor<T>,
    pub prompt_averaged: Tensor<T>,
}

impl<T: Scalar> TextEmbeddingSet<T> {
    /// Builds the set from `(classes, prompts, dim)` embeddings.
    pub fn from_per_prompt(per_prompt: Tensor<T>) -> Result<Self> {
        let s = per_prompt.shape().to_vec();
        if s.len() != 3 || s.iter().any(|&d| d == 0) {
            return Err(Error::shape("TextEmbeddingSet", format!("expected (classes, prompts, dim), got {s:?}")));
        }
        if !per_prompt.all_finite() {
            return Err(Error::NonFinite("text embeddings".into()));
        }
        let (n, p, d) = (s[0], s[1], s[2]);
        let inv = T::one() / lit::<T>(p as f64);
        let avg = Tensor::from_fn(&[n, d], |i| (0..p).map(|k| per_prompt.get(&[i[0], k, i[1]])).sum::<T>() * inv);
        Ok(TextEmbeddingSet { per_prompt, prompt_averaged: avg })
    }

    pub fn n_classes(&self) -> usize {
        self.per_prompt.shape()[0]
    }

    pub fn n_prompts(&self) -> usize {
        self.per_prompt.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.per_prompt.shape()[2]
    }
}

/// Ordered class vocabulary with seen/unseen flags and prompt templates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRegistry {
    names: Vec<String>,
    seen: Vec<bool>,
    templates: Vec<String>,
}

impl ClassRegistry {
    pub fn new(names: Vec<String>, seen: Vec<bool>, templates: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("class registry is empty".into()));
        }
        if names.len() != seen.len() {
            return Err(Error::Config(format!("{} class names but {} seen flags", names.len(), seen.len())));
        }
        if !seen.iter().any(|&s| s) {
            return Err(Error::Config("class registry needs at least one seen class".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        if templates.is_empty() {
            return Err(Error::Config("at least one prompt template is required".into()));
        }
        Ok(ClassRegistry { names, seen, templates })
    }

    /// Registry using the remote-sensing templates.
    pub fn with_default_templates(names: &[&str], seen: &[bool]) -> Result<Self> {
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            seen.to_vec(),
            REMOTE_SENSING_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn seen_flags(&self) -> &[bool] {
        &self.seen
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen[class]
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn seen_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.seen[i]).collect()
    }

    pub fn unseen_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.seen[i]).collect()
    }

    /// The training vocabulary: seen classes only, in registry order.
    pub fn seen_only(&self) -> ClassRegistry {
        let idx = self.seen_indices();
        ClassRegistry {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            seen: vec![true; idx.len()],
            templates: self.templates.clone(),
        }
    }

    /// Registry whose class `i` is this registry's class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<ClassRegistry> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.len()).collect::<Vec<_>>() {
            return Err(Error::Config(format!("{perm:?} is not a permutation of {} classes", self.len())));
        }
        Ok(ClassRegistry {
            names: perm.iter().map(|&i| self.names[i].clone()).collect(),
            seen: perm.iter().map(|&i| self.seen[i]).collect(),
            templates: self.templates.clone(),
        })
    }
}

/// Ensemble rotation angles in degrees.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RotationAngleSet {
    angles: Vec<i32>,
}

impl RotationAngleSet {
    pub fn new(angles: Vec<i32>) -> Result<Self> {
        for (i, &a) in angles.iter().enumerate() {
            if ![0, 90, 180, 270].contains(&a) {
                return Err(Error::Angle(a));
            }
            if angles[..i].contains(&a) {
                return Err(Error::Config(format!("rotation angle {a} listed twice")));
            }
        }
        if !angles.contains(&0) {
            return Err(Error::Config("rotation angle set must contain 0".into()));
        }
        Ok(RotationAngleSet { angles })
    }

    pub fn full() -> Self {
        RotationAngleSet { angles: vec![0, 90, 180, 270] }
    }

    pub fn angles(&self) -> &[i32] {
        &self.angles
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }
}

impl Default for RotationAngleSet {
    fn default() -> Self {
        Self::full()
    }
}

// ---------------------------------------------------------------------------
// Rotation

/// Counter-clockwise quarter turns for a multiple of 90 degrees in
/// `[-270, 270]`.
pub fn quarter_turns(angle_deg: i32) -> Result<usize> {
    if angle_deg % 90 != 0 || !(-270..=270).contains(&angle_deg) {
        return Err(Error::Angle(angle_deg));
    }
    Ok((angle_deg / 90).rem_euclid(4) as usize)
}

/// Rotates the two leading (spatial) axes counter-clockwise by `angle_deg`.
/// Pure permutation: results are bitwise exact.
pub fn rotate_grid<T: Scalar>(t: &Tensor<T>, angle_deg: i32) -> Result<Tensor<T>> {
    let turns = quarter_turns(angle_deg)?;
    let s = t.shape();
    if s.len() < 2 || s[0] != s[1] {
        return Err(Error::shape("rotate", format!("spatial grid must be square, got {s:?}")));
    }
    let mut axes: Vec<usize> = (0..s.len()).collect();
    axes.swap(0, 1);
    Ok(match turns {
        0 => t.clone(),
        1 => flip_tensor(&t.permute(&axes)?, 0),
        2 => flip_tensor(&flip_tensor(t, 0), 1),
        _ => flip_tensor(&t.permute(&axes)?, 1),
    })
}

/// Graph version of [`rotate_grid`] acting on axes `(axis, axis + 1)`.
pub fn rotate_var<'g, T: Scalar>(v: Var<'g, T>, angle_deg: i32, axis: usize) -> Result<Var<'g, T>> {
    let turns = quarter_turns(angle_deg)?;
    let s = v.shape();
    if axis + 1 >= s.len() || s[axis] != s[axis + 1] {
        return Err(Error::shape("rotate", format!("spatial grid must be square, got {s:?}")));
    }
    let mut axes: Vec<usize> = (0..s.len()).collect();
    axes.swap(axis, axis + 1);
    match turns {
        0 => Ok(v),
        1 => v.permute(&axes)?.flip(axis),
        2 => v.flip(axis)?.flip(axis + 1),
        _ => v.permute(&axes)?.flip(axis + 1),
    }
}

// ---------------------------------------------------------------------------
// Encoder interfaces

/// Dense image encoder of the vision-language backbone.
pub trait VisionEncoder<T: Scalar> {
    /// Embedding width `d`.
    fn dim(&self) -> usize;
    /// Registers this encoder's parameters.
    fn init_params(&self, store: &mut ParamStore<T>);
    /// `(side, side, 3)` image to `(h, w, dim)` embeddings.
    fn encode<'g>(&self, b: &Binder<'g, T>, image: Var<'g, T>) -> Result<Var<'g, T>>;
}

/// Text encoder of the vision-language backbone.
pub trait TextEncoder<T: Scalar> {
    fn dim(&self) -> usize;
    fn init_params(&self, store: &mut ParamStore<T>);
    /// One `dim`-vector per prompt, stacked as `(prompts, dim)`.
    fn encode<'g>(&self, b: &Binder<'g, T>, prompts: &[String]) -> Result<Var<'g, T>>;
}

/// Frozen segmentation-foundation encoder supplying the guidance pyramid.
pub trait GuidanceEncoder<T: Scalar> {
    /// Channel widths of the taps, shallow to deep.
    fn dims(&self) -> Vec<usize>;
    fn init_params(&self, store: &mut ParamStore<T>);
    /// Intermediate feature taps, shallow to deep, each `(h, w, c)`.
    fn encode<'g>(&self, b: &Binder<'g, T>, image: Var<'g, T>) -> Result<Vec<Var<'g, T>>>;
}

// ---------------------------------------------------------------------------
// Operations

fn check_square_map(op: &'static str, shape: &[usize], dim: usize) -> Result<()> {
    if shape.len() != 3 || shape[0] != shape[1] || shape[2] != dim {
        return Err(Error::shape(op, format!("encoder produced {shape:?}, expected square (h, h, {dim})")));
    }
    Ok(())
}

/// One embedding map per angle, each rotated back to the input orientation:
/// entry `θ` is `rotate(encoder(rotate(image, θ)), −θ)`.
pub fn encode_image_ensemble_vars<'g, T: Scalar, E: VisionEncoder<T> + ?Sized>(
    b: &Binder<'g, T>,
    image: Var<'g, T>,
    angles: &RotationAngleSet,
    encoder: &E,
) -> Result<Vec<Var<'g, T>>> {
    angles
        .angles()
        .iter()
        .map(|&theta| {
            let rotated = rotate_var(image, theta, 0)?;
            let emb = encoder.encode(b, rotated)?;
            check_square_map("encode_image_ensemble", &emb.shape(), encoder.dim())?;
            rotate_var(emb, -theta, 0)
        })
        .collect()
}

/// Tensor-level rotation ensemble.
pub fn encode_image_ensemble<T: Scalar, E: VisionEncoder<T> + ?Sized>(
    image: &ImageTensor<T>,
    angles: &RotationAngleSet,
    encoder: &E,
    store: &ParamStore<T>,
) -> Result<Vec<DenseFeatureMap<T>>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let maps = encode_image_ensemble_vars(&b, g.constant(image.pixels().clone()), angles, encoder)?;
    maps.into_iter()
        .map(|m| {
            let grid = (*m.value()).clone();
            let stride = image.side() / grid.shape()[0];
            DenseFeatureMap::new(grid, stride.max(1))
        })
        .collect()
}

/// All `classes x templates` prompts, class-major.
pub fn build_prompts(registry: &ClassRegistry) -> Result<Vec<String>> {
    for t in registry.templates() {
        if t.matches(CLASS_PLACEHOLDER).count() != 1 {
            return Err(Error::Config(format!("template `{t}` must contain exactly one {CLASS_PLACEHOLDER}")));
        }
    }
    Ok(registry
        .names()
        .iter()
        .flat_map(|name| registry.templates().iter().map(move |t| t.replace(CLASS_PLACEHOLDER, name)))
        .collect())
}

/// Text embeddings on a graph: `(classes, prompts, d)` and the `(classes, d)`
/// prompt average.
pub struct TextVars<'g, T> {
    pub per_prompt: Var<'g, T>,
    pub averaged: Var<'g, T>,
}

pub fn encode_text_vars<'g, T: Scalar, E: TextEncoder<T> + ?Sized>(
    b: &Binder<'g, T>,
    prompts: &[String],
    encoder: &E,
    registry: &ClassRegistry,
) -> Result<TextVars<'g, T>> {
    let (n, p) = (registry.len(), registry.templates().len());
    if prompts.len() != n * p {
        return Err(Error::shape("encode_text", format!("{} prompts for {n} classes x {p} templates", prompts.len())));
    }
    let emb = encoder.encode(b, prompts)?;
    let d = encoder.dim();
    if emb.shape() != [n * p, d] {
        return Err(Error::shape("encode_text", format!("encoder returned {:?}, expected [{}, {d}]", emb.shape(), n * p)));
    }
    let per_prompt = emb.reshape(&[n, p, d])?;
    let averaged = per_prompt.mean_axis(1, false)?;
    Ok(TextVars { per_prompt, averaged })
}

pub fn encode_text<T: Scalar, E: TextEncoder<T> + ?Sized>(
    prompts: &[String],
    encoder: &E,
    registry: &ClassRegistry,
    store: &ParamStore<T>,
) -> Result<TextEmbeddingSet<T>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let vars = encode_text_vars(&b, prompts, encoder, registry)?;
    TextEmbeddingSet::from_per_prompt((*vars.per_prompt.value()).clone())
}

/// Exactly three guidance taps, shallow to deep.
pub fn encode_guidance_vars<'g, T: Scalar, E: GuidanceEncoder<T> + ?Sized>(
    b: &Binder<'g, T>,
    image: Var<'g, T>,
    encoder: &E,
) -> Result<[Var<'g, T>; 3]> {
    let taps = encoder.encode(b, image)?;
    if taps.len() != 3 {
        return Err(Error::shape("encode_guidance", format!("expected 3 feature taps, encoder produced {}", taps.len())));
    }
    for t in &taps {
        let s = t.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(Error::shape("encode_guidance", format!("tap must be square (h, h, c), got {s:?}")));
        }
    }
    Ok([taps[0], taps[1], taps[2]])
}

pub fn encode_guidance<T: Scalar, E: GuidanceEncoder<T> + ?Sized>(
    image: &ImageTensor<T>,
    encoder: &E,
    store: &ParamStore<T>,
) -> Result<GuidancePyramid<T>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let taps = encode_guidance_vars(&b, g.constant(image.pixels().clone()), encoder)?;
    let mk = |v: Var<'_, T>| {
        let grid = (*v.value()).clone();
        let stride = (image.side() / grid.shape()[0]).max(1);
        DenseFeatureMap::new(grid, stride)
    };
    Ok(GuidancePyramid { levels: [mk(taps[0])?, mk(taps[1])?, mk(taps[2])?] })
}

// ---------------------------------------------------------------------------
// Stub encoders

fn seeded_rng(seed: u64, salt: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

/// Unit-norm pseudo-random vector derived from a string and a seed.
pub fn hashed_unit_vector<T: Scalar>(seed: u64, text: &str, dim: usize) -> Tensor<T> {
    let mut rng = seeded_rng(seed, text);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    Tensor::new(vec![dim], v.into_iter().map(|x| T::from_f64_lossy(x / norm)).collect()).unwrap()
}

/// `(side, side, c)` to `(side / p, side / p, p * p * c)` non-overlapping patches.
pub fn patchify<'g, T: Scalar>(image: Var<'g, T>, patch: usize) -> Result<Var<'g, T>> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || s[0] % patch != 0 || s[1] % patch != 0 {
        return Err(Error::shape("patchify", format!("{s:?} not divisible into {patch}x{patch} patches")));
    }
    let (h, w, c) = (s[0] / patch, s[1] / patch, s[2]);
    image
        .reshape(&[h, patch, w, patch, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[h, w, patch * patch * c])
}

/// Single-head self-attention update with learnable query/value projections,
/// applied as a residual over a token set without positional information.
fn qv_attention<'g, T: Scalar>(b: &Binder<'g, T>, prefix: &str, tokens: Var<'g, T>) -> Result<Var<'g, T>> {
    let d = *tokens.shape().last().unwrap();
    let q = linear(b, &join(prefix, "q_proj"), tokens)?;
    let k = linear(b, &join(prefix, "k_proj"), tokens)?;
    let v = linear(b, &join(prefix, "v_proj"), tokens)?;
    let scores = q.matmul(k.transpose_last()?)?.scale(lit::<T>(1.0 / (d as f64).sqrt()));
    scores.softmax_last()?.matmul(v)
}

fn init_qv_attention<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for name in ["q_proj", "k_proj"] {
        init_linear(store, &join(prefix, name), d, d, rng);
    }
    let p = join(prefix, "v_proj");
    store.insert(join(&p, "weight"), Tensor::randn(&[d, d], 0.1 / (d as f64).sqrt(), rng));
    store.insert(join(&p, "bias"), Tensor::zeros(&[d]));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubVisionConfig {
    pub patch: usize,
    pub dim: usize,
    pub seed: u64,
    /// Adds a residual self-attention layer with tunable query/value
    /// projections on top of the fixed patch projection.
    pub qv_adapter: bool,
}

impl Default for StubVisionConfig {
    fn default() -> Self {
        StubVisionConfig { patch: 8, dim: 32, seed: 0, qv_adapter: true }
    }
}

/// Patchify + fixed random projection (+ optional position-free attention).
///
/// Every stage treats patches as an unordered set, so the encoder commutes
/// with quarter-turn rotations of the patch grid.
#[derive(Clone, Debug)]
pub struct StubVisionEncoder {
    pub config: StubVisionConfig,
}

pub const VISION_PREFIX: &str = "vl.image";
pub const TEXT_PREFIX: &str = "vl.text";
pub const GUIDANCE_PREFIX: &str = "guidance";

impl<T: Scalar> VisionEncoder<T> for StubVisionEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn init_params(&self, store: &mut ParamStore<T>) {
        let c = &self.config;
        let mut rng = seeded_rng(c.seed, VISION_PREFIX);
        init_linear(store, &join(VISION_PREFIX, "patch_embed"), c.patch * c.patch * 3, c.dim, &mut rng);
        if c.qv_adapter {
            init_qv_attention(store, &join(VISION_PREFIX, "attn"), c.dim, &mut rng);
        }
    }

    fn encode<'g>(&self, b: &Binder<'g, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
        let patches = patchify(image, self.config.patch)?;
        let x = linear(b, &join(VISION_PREFIX, "patch_embed"), patches)?;
        if !self.config.qv_adapter {
            return Ok(x);
        }
        let s = x.shape();
        let tokens = x.reshape(&[s[0] * s[1], s[2]])?;
        let out = tokens.add(qv_attention(b, &join(VISION_PREFIX, "attn"), tokens)?)?;
        out.reshape(&s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubTextConfig {
    pub dim: usize,
    pub seed: u64,
    pub qv_adapter: bool,
}

impl Default for StubTextConfig {
    fn default() -> Self {
        StubTextConfig { dim: 32, seed: 0, qv_adapter: true }
    }
}

/// Hashes each prompt (and, with the adapter, each of its words) to seeded
/// unit vectors; the adapter attends from the prompt token over the words.
/// Outputs are unit-norm.
#[derive(Clone, Debug)]
pub struct StubTextEncoder {
    pub config: StubTextConfig,
}

impl<T: Scalar> TextEncoder<T> for StubTextEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn init_params(&self, store: &mut ParamStore<T>) {
        if self.config.qv_adapter {
            let mut rng = seeded_rng(self.config.seed, TEXT_PREFIX);
            init_qv_attention(store, &join(TEXT_PREFIX, "attn"), self.config.dim, &mut rng);
        }
    }

    fn encode<'g>(&self, b: &Binder<'g, T>, prompts: &[String]) -> Result<Var<'g, T>> {
        let (d, seed) = (self.config.dim, self.config.seed);
        let mut rows = Vec::with_capacity(prompts.len());
        for p in prompts {
            let mut tokens = vec![hashed_unit_vector::<T>(seed, p, d)];
            if self.config.qv_adapter {
                tokens.extend(p.split_whitespace().map(|w| hashed_unit_vector::<T>(seed, &format!("word:{w}"), d)));
            }
            let n = tokens.len();
            let data: Vec<T> = tokens.into_iter().flat_map(Tensor::into_data).collect();
            let x = b.constant(Tensor::new(vec![n, d], data)?);
            let row = if self.config.qv_adapter {
                let upd = qv_attention(b, &join(TEXT_PREFIX, "attn"), x)?;
                x.add(upd)?.narrow(0, 0, 1)?
            } else {
                x
            };
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::shape("text encoder", "no prompts"));
        }
        Var::concat(&rows, 0)?.l2_normalize_last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubGuidanceConfig {
    pub patches: [usize; 3],
    pub dims: [usize; 3],
    pub seed: u64,
}

impl Default for StubGuidanceConfig {
    fn default() -> Self {
        StubGuidanceConfig { patches: [4, 8, 8], dims: [32, 64, 64], seed: 0 }
    }
}

/// Three independent patchify + fixed projection taps.
#[derive(Clone, Debug)]
pub struct StubGuidanceEncoder {
    pub config: StubGuidanceConfig,
}

impl<T: Scalar> GuidanceEncoder<T> for StubGuidanceEncoder {
    fn dims(&self) -> Vec<usize> {
        self.config.dims.to_vec()
    }

    fn init_params(&self, store: &mut ParamStore<T>) {
        let mut rng = seeded_rng(self.config.seed, GUIDANCE_PREFIX);
        for (i, (&p, &d)) in self.config.patches.iter().zip(&self.config.dims).enumerate() {
            init_linear(store, &join(GUIDANCE_PREFIX, &format!("level{}", i + 1)), p * p * 3, d, &mut rng);
        }
    }

    fn encode<'g>(&self, b: &Binder<'g, T>, image: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        self.config
            .patches
            .iter()
            .enumerate()
            .map(|(i, &p)| linear(b, &join(GUIDANCE_PREFIX, &format!("level{}", i + 1)), patchify(image, p)?))
            .collect()
    }
}
