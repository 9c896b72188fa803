//! Plain-loop reference implementations shared by the integration suites.
#![allow(dead_code)]

pub mod derived;

use ovseg::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn w<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    store.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

/// `x · W + b` with `W` stored `(in, out)`.
pub fn lin(store: &ParamStore<f64>, prefix: &str, x: &[f64]) -> Vec<f64> {
    let wt = w(store, &format!("{prefix}.weight"));
    let b = w(store, &format!("{prefix}.bias"));
    let (fi, fo) = (wt.shape()[0], wt.shape()[1]);
    assert_eq!(x.len(), fi);
    (0..fo).map(|o| b.data()[o] + (0..fi).map(|i| x[i] * wt.data()[i * fo + o]).sum::<f64>()).collect()
}

pub fn layer_norm(store: &ParamStore<f64>, prefix: &str, x: &[f64]) -> Vec<f64> {
    let g = w(store, &format!("{prefix}.weight"));
    let b = w(store, &format!("{prefix}.bias"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) / sd * g.data()[i] + b.data()[i]).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn mlp(store: &ParamStore<f64>, prefix: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = lin(store, &format!("{prefix}.fc1"), x).into_iter().map(gelu).collect();
    lin(store, &format!("{prefix}.fc2"), &h)
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b).unwrap();
    assert!(d <= tol, "max abs diff {d:e} > {tol:e}");
}

/// Small model for 16-pixel images: a 4x4 correlation grid, guidance taps at
/// 8, 4 and 4 cells.
pub fn tiny_config() -> ovseg::pipeline::ModelConfig {
    use ovseg::backbones::StubGuidanceConfig;
    ovseg::pipeline::ModelConfig {
        vision_patch: 4,
        vl_dim: 8,
        guidance: StubGuidanceConfig { patches: [2, 4, 4], dims: [4, 6, 6], seed: 0 },
        d_phi: 8,
        window: 2,
        heads: 2,
        mlp_ratio: 2,
        refine_blocks: 1,
        decoder_dims: [6, 4],
        ..Default::default()
    }
}

pub fn registry(n: usize, n_seen: usize) -> ovseg::backbones::ClassRegistry {
    let names: Vec<String> = (0..n).map(|i| format!("class{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let seen: Vec<bool> = (0..n).map(|i| i < n_seen).collect();
    ovseg::backbones::ClassRegistry::with_default_templates(&refs, &seen).unwrap()
}

pub fn random_image<T: ovseg::Scalar>(side: usize, seed: u64) -> ovseg::backbones::ImageTensor<T> {
    ovseg::backbones::ImageTensor::new(Tensor::randn(&[side, side, 3], 1.0, &mut rng(seed))).unwrap()
}

/// Mask of vertical bands, one per class.
pub fn band_mask(side: usize, n: usize) -> ovseg::training::GroundTruthMask {
    let labels = (0..side * side).map(|i| ((i % side) * n / side) as u8).collect();
    ovseg::training::GroundTruthMask::new(side, labels).unwrap()
}
