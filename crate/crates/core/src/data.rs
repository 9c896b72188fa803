//! Dataset manifests, sample loading, tiling and the synthetic generator.
//!
//! A manifest is a TOML file:
//!
//! ```toml
//! name = "synthetic"
//! ignore_index = 255
//! tile_px = 256
//! templates = ["An aerial image of a [CLS]"]
//!
//! [normalization]
//! mean = [0.5, 0.5, 0.5]
//! std = [0.25, 0.25, 0.25]
//!
//! [[classes]]
//! name = "background"
//! seen = true
//!
//! [[samples]]
//! image = "images/0000.png"
//! mask = "masks/0000.png"
//! split = "train"
//! ```
//!
//! Sample paths are relative to the manifest's directory. Images are RGB
//! PNGs; masks are 8-bit grayscale PNGs holding class indices, with
//! `ignore_index` for unlabeled pixels.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{ClassRegistry, ImageTensor, REMOTE_SENSING_TEMPLATES};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{GroundTruthMask, IGNORE_INDEX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub seen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.5; 3], std: [0.25; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "train".into()
}

fn default_ignore() -> u8 {
    IGNORE_INDEX
}

fn default_tile() -> usize {
    256
}

fn default_templates() -> Vec<String> {
    REMOTE_SENSING_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default = "default_ignore")]
    pub ignore_index: u8,
    #[serde(default = "default_tile")]
    pub tile_px: usize,
    #[serde(default = "default_templates")]
    pub templates: Vec<String>,
    #[serde(default)]
    pub normalization: Normalization,
    pub classes: Vec<ClassEntry>,
    #[serde(default)]
    pub samples: Vec<SampleRecord>,
    /// Directory sample paths are resolved against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Unseen-class pixels are hidden (set to the ignore value).
    Train,
    /// Masks are returned as stored.
    Eval,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.root = root.into();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if (self.ignore_index as usize) < self.classes.len() {
            return Err(Error::Config(format!(
                "ignore_index {} collides with a class index ({} classes)",
                self.ignore_index,
                self.classes.len()
            )));
        }
        if self.tile_px == 0 {
            return Err(Error::Config("tile_px must be positive".into()));
        }
        if self.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        self.registry().map(|_| ())
    }

    pub fn registry(&self) -> Result<ClassRegistry> {
        ClassRegistry::new(
            self.classes.iter().map(|c| c.name.clone()).collect(),
            self.classes.iter().map(|c| c.seen).collect(),
            self.templates.clone(),
        )
    }

    /// Indices of samples in `split`.
    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

// ---------------------------------------------------------------------------
// Presets

fn preset(name: &str, seen: &[&str], unseen: &[&str], tile: usize) -> DatasetManifest {
    let classes = seen
        .iter()
        .map(|n| ClassEntry { name: n.to_string(), seen: true })
        .chain(unseen.iter().map(|n| ClassEntry { name: n.to_string(), seen: false }))
        .collect();
    DatasetManifest {
        name: name.into(),
        ignore_index: IGNORE_INDEX,
        tile_px: tile,
        templates: default_templates(),
        normalization: Normalization::default(),
        classes,
        samples: vec![],
        root: PathBuf::new(),
    }
}

/// Class splits of the public aerial benchmarks, plus default iteration
/// budgets. Sample lists are left empty.
pub fn preset_manifest(name: &str) -> Option<(DatasetManifest, usize)> {
    match name.to_ascii_lowercase().as_str() {
        "isaid" => Some((
            preset(
                "iSAID",
                &[
                    "ship",
                    "storage tank",
                    "baseball diamond",
                    "basketball court",
                    "ground track field",
                    "large vehicle",
                    "swimming pool",
                    "roundabout",
                    "plane",
                ],
                &["tennis court", "bridge", "small vehicle", "helicopter", "soccer ball field", "harbor"],
                256,
            ),
            10_000,
        )),
        "dlrsd" => Some((
            preset(
                "DLRSD",
                &["chaparral", "court", "dock", "field", "grass", "mobile home", "sand", "ship", "tanks", "water"],
                &["airplane", "bare soil", "buildings", "cars", "pavement", "sea", "trees"],
                256,
            ),
            5_000,
        )),
        "oem" | "openearthmap" => Some((
            preset(
                "OEM",
                &["bareland", "rangeland", "road", "building"],
                &["developed space", "tree", "water", "agriculture land"],
                256,
            ),
            15_000,
        )),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Loading

/// Row-major label raster of arbitrary size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.to_rgb8())
}

pub fn read_mask(path: &Path) -> Result<RawMask> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    let g = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Data(format!(
                "{}: masks must be 8-bit single-channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(RawMask { height: g.height() as usize, width: g.width() as usize, labels: g.into_raw() })
}

/// `(h, w, 3)` normalized tensor from 8-bit RGB.
pub fn normalize<T: Scalar>(img: &RgbImage, norm: &Normalization) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[h, w, 3], |i| {
        let v = raw[(i[0] * w + i[1]) * 3 + i[2]] as f64 / 255.0;
        T::from_f64_lossy((v - norm.mean[i[2]]) / norm.std[i[2]])
    })
}

/// Hides unseen classes. Idempotent.
pub fn mask_unseen(mask: &GroundTruthMask, registry: &ClassRegistry) -> GroundTruthMask {
    mask.map_labels(|l| if l != IGNORE_INDEX && (l as usize) < registry.len() && !registry.is_seen(l as usize) { IGNORE_INDEX } else { l })
}

fn check_labels(labels: &[u8], n_classes: usize, ignore: u8, index: usize) -> Result<()> {
    if let Some(p) = labels.iter().position(|&l| l != ignore && l as usize >= n_classes) {
        return Err(Error::Data(format!("sample {index}: mask value {} at pixel {p} is not a class index", labels[p])));
    }
    Ok(())
}

/// Loads one square sample. In the training phase unseen-class pixels are
/// set to the ignore value; evaluation masks are returned untouched.
pub fn load_sample<T: Scalar>(manifest: &DatasetManifest, index: usize, phase: Phase) -> Result<(ImageTensor<T>, GroundTruthMask)> {
    let rec = manifest
        .samples
        .get(index)
        .ok_or_else(|| Error::Data(format!("sample {index} out of range ({} samples)", manifest.samples.len())))?;
    let img = read_rgb(&manifest.resolve(&rec.image))?;
    let raw = read_mask(&manifest.resolve(&rec.mask))?;
    if (raw.width, raw.height) != (img.width() as usize, img.height() as usize) {
        return Err(Error::Data(format!("sample {index}: image and mask sizes differ")));
    }
    if raw.width != raw.height {
        return Err(Error::Data(format!("sample {index}: {}x{} is not square; tile it first", raw.width, raw.height)));
    }
    check_labels(&raw.labels, manifest.classes.len(), manifest.ignore_index, index)?;
    let labels = if manifest.ignore_index == IGNORE_INDEX {
        raw.labels
    } else {
        raw.labels.into_iter().map(|l| if l == manifest.ignore_index { IGNORE_INDEX } else { l }).collect()
    };
    let mask = GroundTruthMask::new(raw.width, labels)?;
    let image = ImageTensor::new(normalize(&img, &manifest.normalization))?;
    let mask = match phase {
        Phase::Train => mask_unseen(&mask, &manifest.registry()?),
        Phase::Eval => mask,
    };
    Ok((image, mask))
}

pub fn load_split<T: Scalar>(manifest: &DatasetManifest, split: &str, phase: Phase) -> Result<Vec<(ImageTensor<T>, GroundTruthMask)>> {
    let idx = manifest.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("manifest `{}` has no samples in split `{split}`", manifest.name)));
    }
    idx.into_iter().map(|i| load_sample(manifest, i, phase)).collect()
}

/// Non-overlapping `tile_px` tiles of an `(h, w, c)` image and its mask, row
/// by row; right and bottom remainders are dropped.
pub fn tile<T: Scalar>(image: &Tensor<T>, mask: &RawMask, tile_px: usize) -> Result<Vec<(ImageTensor<T>, GroundTruthMask)>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != mask.height || s[1] != mask.width {
        return Err(Error::shape("tile", format!("image {s:?} vs mask {}x{}", mask.height, mask.width)));
    }
    if tile_px == 0 || s[0] < tile_px || s[1] < tile_px {
        return Err(Error::Data(format!("{}x{} input is smaller than the {tile_px}px tile", s[0], s[1])));
    }
    let c = s[2];
    let mut out = Vec::new();
    for ti in 0..s[0] / tile_px {
        for tj in 0..s[1] / tile_px {
            let (y0, x0) = (ti * tile_px, tj * tile_px);
            let img = Tensor::from_fn(&[tile_px, tile_px, c], |i| image.get(&[y0 + i[0], x0 + i[1], i[2]]));
            let labels = (0..tile_px * tile_px)
                .map(|p| mask.labels[(y0 + p / tile_px) * mask.width + x0 + p % tile_px])
                .collect();
            out.push((ImageTensor::new(img)?, GroundTruthMask::new(tile_px, labels)?));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic data

const SYNTHETIC_NAMES: [&str; 17] = [
    "background", "pond", "meadow", "rooftop", "runway", "orchard", "quarry", "marsh", "parking lot", "vineyard",
    "dune", "pier", "greenhouse", "stadium", "reservoir", "silo", "glacier",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub image_px: usize,
    /// Including the background class 0.
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub shapes_per_image: usize,
    /// Amplitude of per-pixel noise in 8-bit units; 0 gives flat colors.
    pub noise: u8,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { seed: 0, image_px: 64, n_classes: 4, n_train: 8, n_val: 0, shapes_per_image: 3, noise: 0 }
    }
}

/// Distinct saturated colors for class indices.
fn class_color(c: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 17] = [
        [96, 96, 96],
        [220, 40, 40],
        [40, 200, 60],
        [40, 80, 230],
        [240, 220, 40],
        [220, 60, 220],
        [40, 220, 220],
        [250, 140, 20],
        [140, 60, 20],
        [150, 150, 250],
        [20, 120, 90],
        [250, 180, 190],
        [120, 20, 120],
        [200, 250, 150],
        [10, 10, 120],
        [255, 255, 255],
        [0, 0, 0],
    ];
    PALETTE[c % PALETTE.len()]
}

/// Writes images, masks and `manifest.toml` into `dir`; returns the manifest
/// path. Class 0 is the background and the last class is unseen; shapes cycle
/// through the foreground classes so each appears once there are enough
/// shapes.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    if spec.n_classes < 3 || spec.n_classes > SYNTHETIC_NAMES.len() {
        return Err(Error::Config(format!("synthetic n_classes must be in 3..={}", SYNTHETIC_NAMES.len())));
    }
    if spec.image_px < 8 || spec.n_train + spec.n_val == 0 || spec.shapes_per_image == 0 {
        return Err(Error::Config("synthetic spec needs image_px >= 8, at least one image and one shape".into()));
    }
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let px = spec.image_px as u32;
    let fg = spec.n_classes - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::new();
    let total = spec.n_train + spec.n_val;
    for i in 0..total {
        let mut img: RgbImage = ImageBuffer::from_pixel(px, px, Rgb(class_color(0)));
        let mut mask: GrayImage = ImageBuffer::from_pixel(px, px, Luma([0]));
        // Textured background: coarse checker modulation.
        for (x, y, p) in img.enumerate_pixels_mut() {
            if ((x / 8) + (y / 8)) % 2 == 0 {
                p.0 = p.0.map(|v| v.saturating_add(16));
            }
        }
        for k in 0..spec.shapes_per_image {
            let class = 1 + (i * spec.shapes_per_image + k) % fg;
            let color = class_color(class);
            let lo = (spec.image_px / 5).max(2) as u32;
            let hi = (spec.image_px * 2 / 5).max(lo as usize + 1) as u32;
            let (w, h) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            let (x0, y0) = (rng.random_range(0..px - w), rng.random_range(0..px - h));
            let ellipse = rng.random_bool(0.5);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    if ellipse {
                        let dx = (x as f64 + 0.5 - x0 as f64 - w as f64 / 2.0) / (w as f64 / 2.0);
                        let dy = (y as f64 + 0.5 - y0 as f64 - h as f64 / 2.0) / (h as f64 / 2.0);
                        if dx * dx + dy * dy > 1.0 {
                            continue;
                        }
                    }
                    img.put_pixel(x, y, Rgb(color));
                    mask.put_pixel(x, y, Luma([class as u8]));
                }
            }
        }
        if spec.noise > 0 {
            let a = spec.noise as i16;
            for p in img.pixels_mut() {
                for v in p.0.iter_mut() {
                    *v = (*v as i16 + rng.random_range(-a..=a)).clamp(0, 255) as u8;
                }
            }
        }
        let image_rel = PathBuf::from(format!("images/{i:04}.png"));
        let mask_rel = PathBuf::from(format!("masks/{i:04}.png"));
        img.save(dir.join(&image_rel)).map_err(|e| Error::Image { path: dir.join(&image_rel), source: e })?;
        mask.save(dir.join(&mask_rel)).map_err(|e| Error::Image { path: dir.join(&mask_rel), source: e })?;
        let split = if i < spec.n_train { "train" } else { "val" };
        samples.push(SampleRecord { image: image_rel, mask: mask_rel, split: split.into() });
    }
    let classes = (0..spec.n_classes)
        .map(|c| ClassEntry { name: SYNTHETIC_NAMES[c].into(), seen: c + 1 < spec.n_classes })
        .collect();
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", spec.seed),
        ignore_index: IGNORE_INDEX,
        tile_px: spec.image_px,
        templates: default_templates(),
        normalization: Normalization::default(),
        classes,
        samples,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.toml");
    fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
