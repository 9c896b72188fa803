//! The full model: encoders, correlation, refinement, back-projection and
//! decoder wired together, with its configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbones::{
    build_prompts, encode_guidance_vars, encode_image_ensemble_vars, encode_text_vars, ClassRegistry, GuidanceEncoder,
    ImageTensor, RotationAngleSet, StubGuidanceConfig, StubGuidanceEncoder, StubTextConfig, StubTextEncoder,
    StubVisionConfig, StubVisionEncoder, TextEncoder, TextVars, VisionEncoder,
};
use crate::backprojection::{BackProjectionConfig, BackProjector};
use crate::correlation::{cosine_correlation_vars, stack_angles, CorrelationFusion, CorrelationVolume, FusionConfig};
use crate::decoder::{Decoder, DecoderConfig, SegmentationLogits};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::refinement::{ClassRefineConfig, RefineStack, SpatialRefineConfig};
use crate::resize::bilinear;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Graph;

/// Which vision-language encoder to build. Both are deterministic stubs;
/// `Adapter` adds trainable query/value projections on top of the frozen
/// embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Stub,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub vision_patch: usize,
    pub vl_dim: usize,
    pub vl_seed: u64,
    pub guidance: StubGuidanceConfig,
    pub angles: Vec<i32>,
    pub d_phi: usize,
    pub fusion_kernel: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub refine_blocks: usize,
    pub decoder_dims: [usize; 2],
    /// Hidden width of the back-projection head; defaults to the deepest
    /// guidance width.
    pub backproj_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Adapter,
            vision_patch: 8,
            vl_dim: 32,
            vl_seed: 0,
            guidance: StubGuidanceConfig::default(),
            angles: vec![0, 90, 180, 270],
            d_phi: 128,
            fusion_kernel: 3,
            window: 4,
            heads: 4,
            mlp_ratio: 4,
            refine_blocks: 2,
            decoder_dims: [64, 32],
            backproj_hidden: None,
        }
    }
}

/// Configuration plus the two sizes fixed by the training vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    /// Prompt templates per class; fixes the fusion input width.
    pub n_prompts: usize,
    /// Training class count; fixes the back-projection input width.
    pub n_train_classes: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub vision: StubVisionEncoder,
    pub text: StubTextEncoder,
    pub guidance: StubGuidanceEncoder,
    pub angles: RotationAngleSet,
    pub fusion: CorrelationFusion,
    pub refine: RefineStack,
    pub backproj: BackProjector,
    pub decoder: Decoder,
}

/// Graph outputs of one image's forward pass.
pub struct Forward<'g, T> {
    /// `(out_px, out_px, classes)`.
    pub logits: Var<'g, T>,
    /// Pre-fusion correlations `(h, w, classes, angles * prompts)`.
    pub stacked: Var<'g, T>,
    /// Refined class-major volume `(classes, h, w, d_phi)`.
    pub refined: Var<'g, T>,
    /// Deepest guidance level aligned to the correlation grid.
    pub guidance3: Var<'g, T>,
    /// Reconstruction of `guidance3`, present in training mode.
    pub psi: Option<Var<'g, T>>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let c = &spec.config;
        if spec.n_prompts == 0 || spec.n_train_classes == 0 {
            return Err(Error::Config("model needs at least one prompt and one training class".into()));
        }
        if c.fusion_kernel % 2 == 0 {
            return Err(Error::Config(format!("fusion_kernel must be odd, got {}", c.fusion_kernel)));
        }
        let adapter = c.encoder == EncoderKind::Adapter;
        let vision = StubVisionEncoder {
            config: StubVisionConfig { patch: c.vision_patch, dim: c.vl_dim, seed: c.vl_seed, qv_adapter: adapter },
        };
        let text = StubTextEncoder { config: StubTextConfig { dim: c.vl_dim, seed: c.vl_seed, qv_adapter: adapter } };
        let guidance = StubGuidanceEncoder { config: c.guidance.clone() };
        let angles = RotationAngleSet::new(c.angles.clone())?;
        let gd = c.guidance.dims;
        let fusion = CorrelationFusion::new(
            FusionConfig { in_channels: angles.len() * spec.n_prompts, d_phi: c.d_phi, kernel: c.fusion_kernel },
            "fusion",
        );
        let refine = RefineStack::new(
            SpatialRefineConfig { dim: c.d_phi, guidance_dim: gd[2], window: c.window, heads: c.heads, mlp_ratio: c.mlp_ratio },
            ClassRefineConfig { dim: c.d_phi, text_dim: c.vl_dim, heads: c.heads, mlp_ratio: c.mlp_ratio },
            c.refine_blocks,
            "refine",
        )?;
        let backproj = BackProjector::new(
            BackProjectionConfig {
                n_classes: spec.n_train_classes,
                d_phi: c.d_phi,
                hidden: c.backproj_hidden.unwrap_or(gd[2]),
                out_dim: gd[2],
            },
            "backproj",
        );
        let decoder =
            Decoder::new(DecoderConfig { d_phi: c.d_phi, dims: c.decoder_dims, guidance_dims: [gd[1], gd[0]] }, "decoder");
        Ok(Model { spec, vision, text, guidance, angles, fusion, refine, backproj, decoder })
    }

    /// Fresh parameters. Encoder weights depend only on their own seeds; the
    /// remaining modules draw from `seed`.
    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        VisionEncoder::<T>::init_params(&self.vision, &mut store);
        TextEncoder::<T>::init_params(&self.text, &mut store);
        GuidanceEncoder::<T>::init_params(&self.guidance, &mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.fusion.init(&mut store, &mut rng);
        self.refine.init(&mut store, &mut rng);
        self.backproj.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        store
    }

    /// Prompt embeddings for a vocabulary; shared across a batch.
    pub fn encode_text<'g, T: Scalar>(&self, b: &Binder<'g, T>, registry: &ClassRegistry) -> Result<TextVars<'g, T>> {
        if registry.templates().len() != self.spec.n_prompts {
            return Err(Error::Config(format!(
                "registry has {} prompt templates, model was built for {}",
                registry.templates().len(),
                self.spec.n_prompts
            )));
        }
        encode_text_vars(b, &build_prompts(registry)?, &self.text, registry)
    }

    /// Forward pass for one `(side, side, 3)` image. Back-projection runs only
    /// when `train` is set.
    pub fn forward<'g, T: Scalar>(
        &self,
        b: &Binder<'g, T>,
        image: Var<'g, T>,
        text: &TextVars<'g, T>,
        train: bool,
    ) -> Result<Forward<'g, T>> {
        let side = image.shape()[0];
        let maps = encode_image_ensemble_vars(b, image, &self.angles, &self.vision)?;
        let per_angle = maps
            .into_iter()
            .map(|m| cosine_correlation_vars(m, text.per_prompt))
            .collect::<Result<Vec<_>>>()?;
        let stacked = stack_angles(&per_angle)?;
        let grid = stacked.shape()[0];
        let phi = self.fusion.forward(b, stacked)?;

        // The guidance encoder is frozen, so its taps are constants to every
        // loss; in particular the reconstruction target stays gradient-free
        // on the refinement path too.
        let [level1, level2, level3] = encode_guidance_vars(b, image, &self.guidance)?.map(|v| v.detach());
        let guidance3 = bilinear(level3, 0, grid, grid)?;
        let refined = self.refine.forward(b, phi, guidance3, text.averaged)?;
        let psi = if train { Some(self.backproj.forward(b, refined)?) } else { None };
        let logits = self.decoder.forward(b, refined, level2, level1, side)?;
        Ok(Forward { logits, stacked, refined, guidance3, psi })
    }

    /// Inference on one image; back-projection is skipped, so any vocabulary
    /// size works.
    pub fn predict_logits<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &ImageTensor<T>,
        registry: &ClassRegistry,
    ) -> Result<SegmentationLogits<T>> {
        let g = Graph::new();
        let b = Binder::new(&g, store, false);
        let text = self.encode_text(&b, registry)?;
        let out = self.forward(&b, g.constant(image.pixels().clone()), &text, false)?;
        let logits = (*out.logits.value()).clone();
        if !logits.all_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        SegmentationLogits::new(logits)
    }

    /// Pre-fusion stacked correlations and the refined volume.
    pub fn correlations<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &ImageTensor<T>,
        registry: &ClassRegistry,
    ) -> Result<(Tensor<T>, CorrelationVolume<T>)> {
        let g = Graph::new();
        let b = Binder::new(&g, store, false);
        let text = self.encode_text(&b, registry)?;
        let out = self.forward(&b, g.constant(image.pixels().clone()), &text, false)?;
        let stacked = (*out.stacked.value()).clone();
        Ok((stacked, CorrelationVolume::from_class_major(&out.refined.value())?))
    }
}
