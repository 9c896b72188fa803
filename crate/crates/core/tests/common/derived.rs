//! Worked examples checked against brute-force references. Each function
//! panics on a mismatch; the module suites and the acceptance gate both call
//! them.

use super::*;
use ovseg::backbones::*;
use ovseg::backprojection::*;
use ovseg::correlation::*;
use ovseg::decoder::*;
use ovseg::evaluation::{predict, ConfusionAccumulator, PredictionMap};
use ovseg::gradcheck::{check, worst, GradCheckOptions};
use ovseg::params::join;
use ovseg::pipeline::{EncoderKind, Model, ModelConfig, ModelSpec};
use ovseg::refinement::*;
use ovseg::training::*;
use ovseg::{Binder, Result, Var};

// ---------------------------------------------------------------- encoders

/// Average-pools 2x2 blocks: the "input downsampled" encoder.
pub struct Downsample;

impl VisionEncoder<f64> for Downsample {
    fn dim(&self) -> usize {
        3
    }

    fn init_params(&self, _: &mut ParamStore<f64>) {}

    fn encode<'g>(&self, _: &Binder<'g, f64>, image: Var<'g, f64>) -> Result<Var<'g, f64>> {
        let p = patchify(image, 2)?;
        let s = p.shape();
        p.reshape(&[s[0], s[1], 4, 3])?.mean_axis(2, false)
    }
}

pub fn rotation_ensemble() {
    let img: ImageTensor<f64> = random_image(8, 1);
    let store = ParamStore::new();
    let full = RotationAngleSet::full();
    let base = encode_image_ensemble(&img, &full, &Downsample, &store).unwrap();
    let rotated = encode_image_ensemble(&img.rotated(90).unwrap(), &full, &Downsample, &store).unwrap();
    // Pooling commutes with rotation, so every entry is the plain pooled map.
    for m in &base {
        assert_close(&m.grid, &base[0].grid, 1e-12);
    }
    // Rotated input: its theta=90 entry is the theta=0 entry of the original,
    // rotated into the new frame.
    assert_close(&rotated[1].grid, &rotate_grid(&base[0].grid, 90).unwrap(), 1e-12);
    for y in 0..4 {
        for x in 0..4 {
            for c in 0..3 {
                let want: f64 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| img.pixels().get(&[2 * y + dy, 2 * x + dx, c]))
                    .sum::<f64>()
                    / 4.0;
                assert!((base[0].grid.get(&[y, x, c]) - want).abs() < 1e-12);
            }
        }
    }
}

/// Half-pixel bilinear interpolation evaluated directly.
pub fn bilinear_oracle(x: &Tensor<f64>, out: usize) -> Tensor<f64> {
    let (n, c) = (x.shape()[0], x.shape()[2]);
    let coord = |o: usize| {
        let s = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    Tensor::from_fn(&[out, out, c], |i| {
        let (y0, y1, ty) = coord(i[0]);
        let (x0, x1, tx) = coord(i[1]);
        let g = |y: usize, xx: usize| x.get(&[y, xx, i[2]]);
        (1.0 - ty) * ((1.0 - tx) * g(y0, x0) + tx * g(y0, x1)) + ty * ((1.0 - tx) * g(y1, x0) + tx * g(y1, x1))
    })
}

pub fn deepest_level_resize() {
    let raw = Tensor::randn(&[4, 4, 3], 1.0, &mut rng(4));
    let mut pyr = GuidancePyramid {
        levels: [
            DenseFeatureMap::new(Tensor::zeros(&[8, 8, 2]), 2).unwrap(),
            DenseFeatureMap::new(Tensor::zeros(&[4, 4, 2]), 4).unwrap(),
            DenseFeatureMap::new(raw.clone(), 4).unwrap(),
        ],
    };
    pyr.align_deepest(8, 16).unwrap();
    assert_close(&pyr.level(2).grid, &bilinear_oracle(&raw, 8), 1e-12);
}

pub fn cosine_diagonal() {
    let v = DenseFeatureMap::new(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap(), 1).unwrap();
    let t = TextEmbeddingSet::from_per_prompt(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
    let got = cosine_correlation(&v, &t).unwrap().data()[0];
    let want = 1.0 / (2.0f64).sqrt();
    assert!((got - want).abs() < 1e-12 && (got - 0.70711).abs() < 1e-5, "{got}");
}

pub fn fusion_sliding_window() {
    let f = CorrelationFusion::new(FusionConfig { in_channels: 4, d_phi: 2, kernel: 3 }, "fusion");
    let mut store = ParamStore::new();
    f.init(&mut store, &mut rng(5));
    store.insert(join("fusion", "bias"), Tensor::randn(&[2], 1.0, &mut rng(6)));
    let raws: Vec<Tensor<f64>> = (0..2).map(|a| Tensor::randn(&[4, 4, 3, 2], 1.0, &mut rng(7 + a))).collect();
    let out = fuse_correlations(&raws, &f, &store).unwrap();
    assert_eq!(out.grid.shape(), &[4, 4, 3, 2]);
    let wt = store.get("fusion.weight").unwrap();
    let bias = store.get("fusion.bias").unwrap();
    for y in 0..4i64 {
        for x in 0..4i64 {
            for n in 0..3 {
                for o in 0..2 {
                    let mut acc = bias.data()[o];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, x + kx - 1);
                            if !(0..4).contains(&sy) || !(0..4).contains(&sx) {
                                continue;
                            }
                            // Channels are angle-major, prompt-minor.
                            for ch in 0..4 {
                                let v = raws[ch / 2].get(&[sy as usize, sx as usize, n, ch % 2]);
                                acc += v * wt.get(&[ky as usize, kx as usize, ch, o]);
                            }
                        }
                    }
                    assert!((out.grid.get(&[y as usize, x as usize, n, o]) - acc).abs() < 1e-5);
                }
            }
        }
    }
    // Classes share weights: permuting the class axis permutes the output.
    let perm = [1, 2, 0];
    let praws: Vec<Tensor<f64>> =
        raws.iter().map(|r| Tensor::from_fn(r.shape(), |i| r.get(&[i[0], i[1], perm[i[2]], i[3]]))).collect();
    assert_eq!(fuse_correlations(&praws, &f, &store).unwrap(), out.permute_classes(&perm));
}

// -------------------------------------------------------------- refinement

pub fn spatial_cfg(dim: usize, gdim: usize, window: usize, heads: usize) -> SpatialRefineConfig {
    SpatialRefineConfig { dim, guidance_dim: gdim, window, heads, mlp_ratio: 2 }
}

pub fn class_cfg(dim: usize, tdim: usize, heads: usize) -> ClassRefineConfig {
    ClassRefineConfig { dim, text_dim: tdim, heads, mlp_ratio: 2 }
}

/// Replaces every parameter with a fresh Gaussian draw so norms and biases
/// are exercised too.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for (_, t) in store.iter_mut() {
        *t = Tensor::randn(t.shape(), 0.5, &mut r);
    }
}

pub fn spatial_setup(cfg: SpatialRefineConfig, seed: u64) -> (SpatialRefiner, ParamStore<f64>) {
    let s = SpatialRefiner::new(cfg, "sp").unwrap();
    let mut store = ParamStore::new();
    s.init(&mut store, &mut rng(seed));
    randomize(&mut store, seed + 100);
    (s, store)
}

pub fn class_setup(cfg: ClassRefineConfig, seed: u64) -> (ClassRefiner, ParamStore<f64>) {
    let c = ClassRefiner::new(cfg, "cls").unwrap();
    let mut store = ParamStore::new();
    c.init(&mut store, &mut rng(seed));
    randomize(&mut store, seed + 100);
    (c, store)
}

pub fn volume(h: usize, w: usize, n: usize, d: usize, seed: u64) -> CorrelationVolume<f64> {
    CorrelationVolume::new(Tensor::randn(&[h, w, n, d], 1.0, &mut rng(seed))).unwrap()
}

pub fn guidance(h: usize, w: usize, d: usize, seed: u64) -> DenseFeatureMap<f64> {
    DenseFeatureMap::new(Tensor::randn(&[h, w, d], 1.0, &mut rng(seed)), 1).unwrap()
}

pub fn text(n: usize, d: usize, seed: u64) -> TextEmbeddingSet<f64> {
    TextEmbeddingSet::from_per_prompt(Tensor::randn(&[n, 2, d], 1.0, &mut rng(seed))).unwrap()
}

pub fn cell(v: &Tensor<f64>, y: usize, x: usize, n: usize) -> Vec<f64> {
    let d = v.shape()[3];
    (0..d).map(|c| v.get(&[y, x, n, c])).collect()
}

/// Every cell attends to every other cell sharing its window in the shifted
/// frame, with region masking across the wrap-around seam. No partitioning,
/// rolling or batching.
pub fn spatial_oracle(store: &ParamStore<f64>, cfg: &SpatialRefineConfig, phi: &Tensor<f64>, g: &DenseFeatureMap<f64>) -> Tensor<f64> {
    let (h, wd, nc, d) = (phi.shape()[0], phi.shape()[1], phi.shape()[2], phi.shape()[3]);
    let heads = cfg.heads;
    let dh = d / heads;
    let win = cfg.window.min(h);
    let span = 2 * cfg.window - 1;
    let mut out = Tensor::zeros(phi.shape());
    let pg: Vec<Vec<f64>> = (0..h * wd)
        .map(|p| {
            let gv: Vec<f64> = (0..g.channels()).map(|c| g.grid.get(&[p / wd, p % wd, c])).collect();
            lin(store, "sp.guidance_proj", &gv)
        })
        .collect();
    for n in 0..nc {
        let mut x: Vec<Vec<f64>> = (0..h * wd).map(|p| cell(phi, p / wd, p % wd, n)).collect();
        for (blk, shifted) in [("sp.block0", false), ("sp.block1", true)] {
            let shift_y = if shifted && h > cfg.window { cfg.window / 2 } else { 0 };
            let shift_x = if shifted && wd > cfg.window { cfg.window / 2 } else { 0 };
            let rel = w(store, &format!("{blk}.rel_bias"));
            let hn: Vec<Vec<f64>> = x.iter().map(|v| layer_norm(store, &format!("{blk}.norm1"), v)).collect();
            let q: Vec<Vec<f64>> = (0..h * wd).map(|p| lin(store, &format!("{blk}.q"), &cat(&hn[p], &pg[p]))).collect();
            let k: Vec<Vec<f64>> = (0..h * wd).map(|p| lin(store, &format!("{blk}.k"), &cat(&hn[p], &pg[p]))).collect();
            let v: Vec<Vec<f64>> = hn.iter().map(|t| lin(store, &format!("{blk}.v"), t)).collect();
            let region = |i: usize, len: usize, s: usize| {
                if s == 0 || i < len - win {
                    0
                } else if i < len - s {
                    1
                } else {
                    2
                }
            };
            let mut next = Vec::new();
            for p in 0..h * wd {
                let sy = (p / wd + h - shift_y) % h;
                let sx = (p % wd + wd - shift_x) % wd;
                let mut attn_out = vec![0.0; d];
                for head in 0..heads {
                    let r = head * dh..(head + 1) * dh;
                    let mut scores = Vec::new();
                    let mut vals = Vec::new();
                    for p2 in 0..h * wd {
                        let ty = (p2 / wd + h - shift_y) % h;
                        let tx = (p2 % wd + wd - shift_x) % wd;
                        if ty / win != sy / win || tx / win != sx / win {
                            continue;
                        }
                        let dy = (sy % win) as isize - (ty % win) as isize + cfg.window as isize - 1;
                        let dx = (sx % win) as isize - (tx % win) as isize + cfg.window as isize - 1;
                        let mut s = dot(&q[p][r.clone()], &k[p2][r.clone()]) / (dh as f64).sqrt();
                        s += rel.get(&[dy as usize * span + dx as usize, head]);
                        if region(sy, h, shift_y) != region(ty, h, shift_y) || region(sx, wd, shift_x) != region(tx, wd, shift_x) {
                            s += -100.0;
                        }
                        scores.push(s);
                        vals.push(&v[p2][r.clone()]);
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (ei, vv) in e.iter().zip(&vals) {
                        for (j, val) in vv.iter().enumerate() {
                            attn_out[head * dh + j] += ei / z * val;
                        }
                    }
                }
                let y = add(&x[p], &lin(store, &format!("{blk}.proj"), &attn_out));
                let m = mlp(store, &format!("{blk}.mlp"), &layer_norm(store, &format!("{blk}.norm2"), &y));
                next.push(add(&y, &m));
            }
            x = next;
        }
        for p in 0..h * wd {
            for c in 0..d {
                out.set(&[p / wd, p % wd, n, c], x[p][c]);
            }
        }
    }
    out
}

/// Quadratic-cost kernelized attention over classes at every cell.
pub fn class_oracle(store: &ParamStore<f64>, cfg: &ClassRefineConfig, phi: &Tensor<f64>, t: &TextEmbeddingSet<f64>) -> Tensor<f64> {
    let (h, wd, nc, d) = (phi.shape()[0], phi.shape()[1], phi.shape()[2], phi.shape()[3]);
    let dh = d / cfg.heads;
    let feat = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let guide: Vec<Vec<f64>> = (0..nc)
        .map(|n| {
            let row: Vec<f64> = (0..cfg.text_dim).map(|c| t.prompt_averaged.get(&[n, c])).collect();
            lin(store, "cls.text_proj", &row)
        })
        .collect();
    let mut out = Tensor::zeros(phi.shape());
    for y in 0..h {
        for x in 0..wd {
            let toks: Vec<Vec<f64>> = (0..nc).map(|n| cell(phi, y, x, n)).collect();
            let hn: Vec<Vec<f64>> = toks.iter().map(|v| layer_norm(store, "cls.norm1", v)).collect();
            let q: Vec<Vec<f64>> = (0..nc).map(|n| lin(store, "cls.q", &cat(&hn[n], &guide[n])).into_iter().map(feat).collect()).collect();
            let k: Vec<Vec<f64>> = (0..nc).map(|n| lin(store, "cls.k", &cat(&hn[n], &guide[n])).into_iter().map(feat).collect()).collect();
            let v: Vec<Vec<f64>> = hn.iter().map(|t| lin(store, "cls.v", t)).collect();
            for i in 0..nc {
                let mut a = vec![0.0; d];
                for head in 0..cfg.heads {
                    let r = head * dh..(head + 1) * dh;
                    let sims: Vec<f64> = (0..nc).map(|j| dot(&q[i][r.clone()], &k[j][r.clone()])).collect();
                    let z: f64 = sims.iter().sum::<f64>() + 1e-6;
                    for j in 0..nc {
                        for c in 0..dh {
                            a[head * dh + c] += sims[j] * v[j][head * dh + c] / z;
                        }
                    }
                }
                let yv = add(&toks[i], &lin(store, "cls.proj", &a));
                let m = mlp(store, "cls.mlp", &layer_norm(store, "cls.norm2", &yv));
                for (c, val) in add(&yv, &m).into_iter().enumerate() {
                    out.set(&[y, x, i, c], val);
                }
            }
        }
    }
    out
}

/// Spatial refinement of random inputs against the per-window oracle for a
/// given `(side, window, heads)`.
pub fn spatial_window_case(side: usize, window: usize, heads: usize, seed: u64) {
    let cfg = spatial_cfg(8, 5, window, heads);
    let (s, store) = spatial_setup(cfg.clone(), seed);
    let phi = volume(side, side, 3, 8, seed + 10);
    let g = guidance(side, side, 5, seed + 20);
    let got = spatial_refine(&phi, &g, &s, &store).unwrap();
    assert_close(&got.grid, &spatial_oracle(&store, &cfg, &phi.grid, &g), 1e-9);
}

pub fn spatial_window_attention() {
    spatial_window_case(4, 2, 2, 1);
}

pub fn class_linear_attention() {
    let cfg = class_cfg(8, 6, 2);
    let (c, store) = class_setup(cfg.clone(), 20);
    let phi = volume(2, 3, 3, 8, 21);
    let t = text(3, 6, 22);
    let got = class_refine(&phi, &t, &c, &store).unwrap();
    assert_close(&got.grid, &class_oracle(&store, &cfg, &phi.grid, &t), 1e-9);
}

// ---------------------------------------------------------- back-projection

pub fn backproj_setup(n: usize, d: usize, hidden: usize, out: usize, seed: u64) -> (BackProjector, ParamStore<f64>) {
    let p = BackProjector::new(BackProjectionConfig { n_classes: n, d_phi: d, hidden, out_dim: out }, "backproj");
    let mut store = ParamStore::new();
    p.init(&mut store, &mut rng(seed));
    randomize(&mut store, seed + 1);
    (p, store)
}

pub fn backproj_matmul() {
    let (p, store) = backproj_setup(3, 4, 6, 5, 1);
    let phi = CorrelationVolume::new(Tensor::randn(&[2, 2, 3, 4], 1.0, &mut rng(2))).unwrap();
    let out = back_project(&phi, &p, &store).unwrap();
    assert_eq!(out.grid.shape(), &[2, 2, 5]);
    for y in 0..2 {
        for x in 0..2 {
            let flat: Vec<f64> = (0..3).flat_map(|n| (0..4).map(move |c| (n, c))).map(|(n, c)| phi.grid.get(&[y, x, n, c])).collect();
            let h1: Vec<f64> = lin(&store, "backproj.fc1", &flat).into_iter().map(gelu).collect();
            let h2: Vec<f64> = lin(&store, "backproj.fc2", &h1).into_iter().map(gelu).collect();
            let want = lin(&store, "backproj.fc3", &h2);
            for c in 0..5 {
                assert!((out.grid.get(&[y, x, c]) - want[c]).abs() < 1e-10);
            }
        }
    }
}

pub fn semantic_loss_elementwise() {
    let map = |t: Tensor<f64>| DenseFeatureMap::new(t, 1).unwrap();
    let g = Tensor::randn(&[2, 2, 8], 1.0, &mut rng(5));
    let psi = Tensor::randn(&[2, 2, 8], 1.0, &mut rng(6));
    let mut want = 0.0;
    for i in 0..psi.len() {
        let d = psi.data()[i] - g.data()[i];
        want += d * d;
    }
    want /= psi.len() as f64;
    let got = semantic_loss(&map(psi), &map(g)).unwrap();
    assert!(got >= 0.0 && (got - want).abs() < 1e-12);
}

// ------------------------------------------------------------------ decoder

pub fn stage(cin: usize, cout: usize, cg: usize, seed: u64) -> (DecoderStage, ParamStore<f64>) {
    let s = DecoderStage::new(StageConfig { in_dim: cin, out_dim: cout, guidance_dim: cg }, "dec");
    let mut store = ParamStore::new();
    s.init(&mut store, &mut rng(seed));
    randomize(&mut store, seed + 1);
    (s, store)
}

pub fn fmap(shape: [usize; 3], seed: u64) -> DenseFeatureMap<f64> {
    DenseFeatureMap::new(Tensor::randn(&shape, 1.0, &mut rng(seed)), 1).unwrap()
}

/// Same-padded sliding-window convolution at one output cell of a
/// `(h, w, c)` grid.
pub fn conv_at(x: &Tensor<f64>, k: &Tensor<f64>, bias: &Tensor<f64>, y: usize, xx: usize, o: usize) -> f64 {
    let (h, w, cin) = (x.shape()[0] as isize, x.shape()[1] as isize, x.shape()[2]);
    let ks = k.shape()[0] as isize;
    let r = ks / 2;
    let mut acc = bias.data()[o];
    for dy in 0..ks {
        for dx in 0..ks {
            let (sy, sx) = (y as isize + dy - r, xx as isize + dx - r);
            if sy < 0 || sx < 0 || sy >= h || sx >= w {
                continue;
            }
            for c in 0..cin {
                acc += x.get(&[sy as usize, sx as usize, c]) * k.get(&[dy as usize, dx as usize, c, o]);
            }
        }
    }
    acc
}

pub fn upsample_scatter() {
    let (s, store) = stage(3, 4, 1, 3);
    let phi = volume(3, 3, 2, 3, 4);
    let out = upsample2x(&phi, &s, &store).unwrap();
    let k = store.get("dec.up.weight").unwrap();
    let bias = store.get("dec.up.bias").unwrap();
    let mut want = Tensor::from_fn(&[6, 6, 2, 4], |i| bias.data()[i[3]]);
    for y in 0..3 {
        for x in 0..3 {
            for n in 0..2 {
                for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    for o in 0..4 {
                        let mut v = want.get(&[2 * y + a, 2 * x + b, n, o]);
                        for c in 0..3 {
                            v += phi.grid.get(&[y, x, n, c]) * k.get(&[a, b, c, o]);
                        }
                        want.set(&[2 * y + a, 2 * x + b, n, o], v);
                    }
                }
            }
        }
    }
    assert_close(&out.grid, &want, 1e-12);
}

pub fn attention_pooling() {
    let (s, store) = stage(2, 3, 4, 5);
    let avg = fmap([4, 4, 3], 6);
    let (a_sp, a_ch) = compute_attentions(&avg, &s, &store).unwrap();
    assert_eq!(a_sp.shape(), &[4, 4, 1]);
    assert_eq!(a_ch.shape(), &[1, 1, 4]);
    let pooled = Tensor::from_fn(&[4, 4, 1], |i| (0..3).map(|c| avg.grid.get(&[i[0], i[1], c])).sum::<f64>() / 3.0);
    let k = store.get("dec.attn_spatial.weight").unwrap();
    let kb = store.get("dec.attn_spatial.bias").unwrap();
    for y in 0..4 {
        for x in 0..4 {
            assert!((a_sp.get(&[y, x, 0]) - conv_at(&pooled, k, kb, y, x, 0)).abs() < 1e-12);
        }
    }
    let vec: Vec<f64> = (0..3).map(|c| (0..16).map(|p| avg.grid.get(&[p / 4, p % 4, c])).sum::<f64>() / 16.0).collect();
    let want = lin(&store, "dec.attn_channel", &vec);
    for c in 0..4 {
        assert!((a_ch.data()[c] - want[c]).abs() < 1e-12);
    }
}

pub fn modulate_broadcast() {
    let g = fmap([2, 2, 3], 8);
    let up = Tensor::from_fn(&[4, 4, 3], |i| g.grid.get(&[i[0] / 2, i[1] / 2, i[2]]));
    let a_sp = Tensor::randn(&[4, 4, 1], 1.0, &mut rng(9));
    let a_ch = Tensor::randn(&[1, 1, 3], 1.0, &mut rng(10));
    let got = transform_guidance(&g, &a_sp, &a_ch).unwrap();
    let want = Tensor::from_fn(&[4, 4, 3], |i| {
        let u = up.get(i);
        a_sp.get(&[i[0], i[1], 0]) * u + a_ch.get(&[0, 0, i[2]]) * u + u
    });
    assert_close(&got.grid, &want, 1e-12);
}

pub fn fuse_conv() {
    let (s, store) = stage(2, 3, 2, 11);
    let phi = volume(4, 4, 2, 3, 12);
    let fg = fmap([4, 4, 2], 13);
    let got = fuse_stage(&phi, &fg, &s, &store).unwrap();
    let k = store.get("dec.fuse.weight").unwrap();
    let kb = store.get("dec.fuse.bias").unwrap();
    for n in 0..2 {
        let slice = Tensor::from_fn(&[4, 4, 5], |i| if i[2] < 3 { phi.grid.get(&[i[0], i[1], n, i[2]]) } else { fg.grid.get(&[i[0], i[1], i[2] - 3]) });
        for y in 0..4 {
            for x in 0..4 {
                for o in 0..3 {
                    assert!((got.grid.get(&[y, x, n, o]) - conv_at(&slice, k, kb, y, x, o)).abs() < 1e-12);
                }
            }
        }
    }
}

/// Whole decoder on `(H, W, classes, d_phi) = (4, 4, 2, 4)` against central
/// differences in 64-bit, with bilinear guidance alignment on stage 2 and a
/// bilinear head resize.
pub fn decoder_gradients() {
    let d = Decoder::new(DecoderConfig { d_phi: 4, dims: [4, 3], guidance_dims: [3, 2] }, "decoder");
    let mut store = ParamStore::<f64>::new();
    d.init(&mut store, &mut rng(42));
    let mut r = rng(43);
    store.insert("phi", Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r));
    store.insert("l2", Tensor::randn(&[4, 4, 3], 1.0, &mut r));
    store.insert("l1", Tensor::randn(&[12, 12, 2], 1.0, &mut r));
    let wt = Tensor::randn(&[20, 20, 2], 1.0, &mut r);
    let reports = check(&store, &[], &GradCheckOptions::default(), |b| {
        let out = d.forward(b, b.param("phi")?, b.param("l2")?, b.param("l1")?, 20)?;
        Ok(out.mul(b.constant(wt.clone()))?.sum_all())
    })
    .unwrap();
    assert!(worst(&reports) <= 1e-6, "{reports:#?}");
}

// ----------------------------------------------------------------- training

pub fn bce_oracle(x: &Tensor<f64>, mask: &GroundTruthMask) -> f64 {
    let (side, n) = (x.shape()[0], x.shape()[2]);
    let (mut total, mut count) = (0.0, 0);
    for y in 0..side {
        for c in 0..side {
            let l = mask.get(y, c);
            if l == IGNORE_INDEX {
                continue;
            }
            count += 1;
            for k in 0..n {
                let p = 1.0 / (1.0 + (-x.get(&[y, c, k])).exp());
                let t = if l as usize == k { 1.0 } else { 0.0 };
                total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
        }
    }
    total / count as f64
}

pub fn bce_loop() {
    let x = Tensor::randn(&[5, 5, 4], 2.0, &mut rng(1));
    let labels = (0..25).map(|i| if i % 7 == 3 { IGNORE_INDEX } else { (i * 5 % 4) as u8 }).collect();
    let mask = GroundTruthMask::new(5, labels).unwrap();
    let got = bce_loss(&SegmentationLogits::new(x.clone()).unwrap(), &mask).unwrap();
    assert!((got - bce_oracle(&x, &mask)).abs() < 1e-6);
}

pub fn tiny_model(encoder: EncoderKind, n_train: usize) -> Model {
    let config = ModelConfig { encoder, ..tiny_config() };
    Model::new(ModelSpec { config, n_prompts: 4, n_train_classes: n_train }).unwrap()
}

pub fn random_batch(n_classes: usize) -> Vec<(ImageTensor<f64>, GroundTruthMask)> {
    (0..2).map(|i| (random_image(16, 10 + i), band_mask(16, n_classes))).collect()
}

/// Trains `steps` steps and checks the frozen group is bitwise untouched
/// while every trainable parameter moved.
pub fn frozen_after(steps: usize) {
    let m = tiny_model(EncoderKind::Adapter, 3);
    let reg = registry(3, 3);
    let mut store: ParamStore<f64> = m.init(1);
    let before = store.clone();
    let mut opt = AdamW::new();
    let cfg = TrainConfig { lr_vl: 1e-3, lr_other: 1e-3, ..Default::default() };
    let data = random_batch(3);
    for _ in 0..steps {
        train_step(&m, &mut store, &mut opt, &reg, &data, &cfg).unwrap();
    }
    let p = partition_parameters(&store).unwrap();
    assert_eq!(p.vl_qv.len() + p.main.len() + p.frozen.len(), store.len());
    for n in &p.frozen {
        let (a, b) = (store.get(n).unwrap(), before.get(n).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{n} changed");
    }
    assert!(!p.vl_qv.is_empty() && !p.main.is_empty());
    for n in p.main.iter().chain(&p.vl_qv) {
        assert_ne!(store.get(n).unwrap(), before.get(n).unwrap(), "{n} did not change");
    }
}

/// One two-tone image repeated: left half dark, right half bright.
pub fn repeated_batch_descent() {
    let m = tiny_model(EncoderKind::Stub, 2);
    let reg = registry(2, 2);
    let mut store: ParamStore<f64> = m.init(3);
    let img = ImageTensor::new(Tensor::from_fn(&[16, 16, 3], |i| if i[1] < 8 { -1.0 } else { 1.0 })).unwrap();
    let data = vec![(img, band_mask(16, 2))];
    let cfg = TrainConfig { lr_other: 2e-4, ..Default::default() };
    let mut opt = AdamW::new();
    let losses: Vec<f64> = (0..50).map(|_| train_step(&m, &mut store, &mut opt, &reg, &data, &cfg).unwrap().total).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "loss rose: {} -> {}", w[0], w[1]);
    }
    assert!(losses[49] < losses[0]);
}

// --------------------------------------------------------------- evaluation

pub fn argmax_loop() {
    let x = Tensor::<f64>::randn(&[6, 6, 5], 1.0, &mut rng(1));
    let got = predict(&SegmentationLogits::new(x.clone()).unwrap());
    for y in 0..6 {
        for c in 0..6 {
            let mut best = 0;
            for k in 0..5 {
                if x.get(&[y, c, k]) > x.get(&[y, c, best]) {
                    best = k;
                }
            }
            assert_eq!(got.labels[y * 6 + c], best);
        }
    }
}

pub fn iou_hand_case() {
    // Class 1 predicted on 6 cells, present on 4, overlapping on 3.
    let p = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
    let g = [1, 1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0];
    let mut acc = ConfusionAccumulator::new(2);
    acc.accumulate(&PredictionMap { side: 4, labels: p.to_vec() }, &GroundTruthMask::new(4, g.to_vec()).unwrap()).unwrap();
    assert_eq!((acc.intersection[1], acc.union[1]), (3, 7));
    assert_eq!(acc.per_class_iou()[1], Some(3.0 / 7.0));
}

// --------------------------------------------------------------------- data

pub fn synthetic_coverage() {
    use ovseg::data::{generate_synthetic, load_sample, DatasetManifest, Phase, SyntheticSpec};
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { n_classes: 4, n_train: 8, n_val: 0, ..Default::default() };
    let m = DatasetManifest::load(&generate_synthetic(&spec, dir.path()).unwrap()).unwrap();
    let mut present = [false; 4];
    for i in m.split_indices("train") {
        let (_, mask) = load_sample::<f32>(&m, i, Phase::Eval).unwrap();
        for &l in mask.labels() {
            present[l as usize] = true;
        }
    }
    assert_eq!(m.split_indices("train").len(), 8);
    assert_eq!(present, [true; 4]);
}

// ---------------------------------------------------- gradients and properties

/// Spatial then class refinement on `(4, 4, 3, 8)` with a shifted second
/// block, inputs included.
pub fn refine_gradients() {
    let (s, mut store) = spatial_setup(spatial_cfg(8, 5, 2, 2), 50);
    let (c, cstore) = class_setup(class_cfg(8, 6, 2), 51);
    store.extend(cstore);
    let mut r = rng(52);
    store.insert("phi", Tensor::randn(&[3, 4, 4, 8], 1.0, &mut r));
    store.insert("g", Tensor::randn(&[4, 4, 5], 1.0, &mut r));
    store.insert("t", Tensor::randn(&[3, 6], 1.0, &mut r));
    let weights = Tensor::randn(&[3, 4, 4, 8], 1.0, &mut r);
    let reports = check(&store, &[], &GradCheckOptions::default(), |b| {
        let x = s.forward(b, b.param("phi")?, b.param("g")?)?;
        let x = c.forward(b, x, b.param("t")?)?;
        Ok(x.mul(b.constant(weights.clone()))?.sum_all())
    })
    .unwrap();
    assert!(worst(&reports) <= 1e-6, "{reports:#?}");
}

/// Back-projection followed by the reconstruction loss.
pub fn backproj_gradients() {
    let (p, mut store) = backproj_setup(2, 4, 6, 5, 9);
    let mut r = rng(10);
    store.insert("phi", Tensor::randn(&[2, 3, 3, 4], 1.0, &mut r));
    let target = Tensor::randn(&[3, 3, 5], 1.0, &mut r);
    let reports = check(&store, &[], &GradCheckOptions::default(), |b| {
        let psi = p.forward(b, b.param("phi")?)?;
        semantic_loss_vars(psi, b.constant(target.clone()))
    })
    .unwrap();
    assert!(worst(&reports) <= 1e-6, "{reports:#?}");
}

/// Upsampling, pooled attentions, guidance modulation and fusion of a stage.
pub fn stage_gradients() {
    let (s, mut store) = stage(3, 4, 2, 40);
    let mut r = rng(41);
    store.insert("phi", Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r));
    store.insert("g", Tensor::randn(&[6, 6, 2], 1.0, &mut r));
    let wt = Tensor::randn(&[2, 6, 6, 4], 1.0, &mut r);
    let reports = check(&store, &[], &GradCheckOptions::default(), |b| {
        let up = s.upsample(b, b.param("phi")?)?;
        let (a_sp, a_ch) = s.attentions(b, up.mean_axis(0, false)?)?;
        let fg = modulate_guidance(b.param("g")?, a_sp, a_ch)?;
        Ok(s.fuse(b, up, fg)?.mul(b.constant(wt.clone()))?.sum_all())
    })
    .unwrap();
    assert!(worst(&reports) <= 1e-6, "{reports:#?}");
}

pub fn model_batch() -> Vec<(ImageTensor<f64>, GroundTruthMask)> {
    vec![(random_image(16, 20), band_mask(16, 2))]
}

/// Total loss of the assembled model over every trainable parameter. The
/// refined volume is `(4, 4, 2, 8)`: a 4x4 grid, two classes, eight channels.
pub fn pipeline_gradients() {
    let m = tiny_model(EncoderKind::Adapter, 2);
    let store: ParamStore<f64> = m.init(5);
    let reg = registry(2, 2);
    let data = model_batch();
    let cfg = TrainConfig::default();
    let p = partition_parameters(&store).unwrap();
    let names: Vec<&str> = p.main.iter().chain(&p.vl_qv).map(String::as_str).collect();
    let opts = GradCheckOptions { max_entries: 6, ..Default::default() };
    let reports = check(&store, &names, &opts, |b| Ok(batch_losses(b, &m, &reg, &data, &cfg)?.2)).unwrap();
    assert!(worst(&reports) <= 1e-6, "{:#?}", reports.iter().filter(|r| r.rel_error > 1e-6).collect::<Vec<_>>());
}

/// The reconstruction loss leaves the guidance encoder untouched but trains
/// the back-projection head.
pub fn stop_gradient_pipeline() {
    let m = tiny_model(EncoderKind::Adapter, 2);
    let store: ParamStore<f64> = m.init(6);
    let reg = registry(2, 2);
    let data = model_batch();
    let cfg = TrainConfig::default();
    let grads = ovseg::gradcheck::analytic(&store, &|b| Ok(batch_losses(b, &m, &reg, &data, &cfg)?.1)).unwrap();
    let mut n_guidance = 0;
    for (n, t) in grads.iter() {
        if n.starts_with("guidance.") {
            n_guidance += 1;
            assert!(t.data().iter().all(|&v| v == 0.0), "{n}");
        }
    }
    assert!(n_guidance > 0);
    for n in ["backproj.fc1.weight", "backproj.fc3.weight"] {
        assert!(grads.get(n).unwrap().data().iter().any(|&v| v != 0.0), "{n}");
    }
}

/// The reconstruction target is a constant even when produced by learnable
/// values.
pub fn stop_gradient_target() {
    let (p, mut store) = backproj_setup(2, 3, 4, 5, 7);
    let mut r = rng(8);
    store.insert("phi", Tensor::randn(&[2, 2, 2, 3], 1.0, &mut r));
    store.insert("enc", Tensor::randn(&[5, 5], 1.0, &mut r));
    store.insert("raw", Tensor::randn(&[2, 2, 5], 1.0, &mut r));
    let grads = ovseg::gradcheck::analytic(&store, &|b| {
        let psi = p.forward(b, b.param("phi")?)?;
        let target = b.param("raw")?.matmul(b.param("enc")?)?;
        semantic_loss_vars(psi, target)
    })
    .unwrap();
    assert!(grads.get("enc").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.get("raw").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.get("backproj.fc1.weight").unwrap().data().iter().any(|&v| v != 0.0));
    assert!(grads.get("phi").unwrap().data().iter().any(|&v| v != 0.0));
}

/// Angle block `a` of a stacked `(h, w, classes, angles * prompts)` volume.
fn angle_block(t: &Tensor<f64>, a: usize, prompts: usize) -> Tensor<f64> {
    let s = t.shape();
    Tensor::from_fn(&[s[0], s[1], s[2] * prompts], |i| t.get(&[i[0], i[1], i[2] / prompts, a * prompts + i[2] % prompts]))
}

/// Largest deviation between the stacked correlations of a 90-degree rotated
/// image and the rotated, angle-shifted correlations of the original.
pub fn stacked_rotation_error() -> f64 {
    let m = tiny_model(EncoderKind::Adapter, 3);
    let store: ParamStore<f64> = m.init(0);
    let reg = registry(3, 2);
    let img: ImageTensor<f64> = random_image(16, 1);
    let (base, _) = m.correlations(&store, &img, &reg).unwrap();
    let (rot, _) = m.correlations(&store, &img.rotated(90).unwrap(), &reg).unwrap();
    assert_eq!(base.shape(), &[4, 4, 3, 16]);
    let mut worst = 0.0f64;
    for a in 0..4 {
        let want = rotate_grid(&angle_block(&base, (a + 1) % 4, 4), 90).unwrap();
        worst = worst.max(angle_block(&rot, a, 4).max_abs_diff(&want).unwrap());
    }
    worst
}

/// Reordering the vocabulary reorders the predicted labels and nothing else.
pub fn class_permutation_predictions() {
    let m = tiny_model(EncoderKind::Adapter, 3);
    let store: ParamStore<f64> = m.init(1);
    let reg = registry(4, 3);
    let perm = [2, 0, 3, 1];
    let preg = reg.permuted(&perm).unwrap();
    for seed in 0..3 {
        let img = random_image(16, 10 + seed);
        let a = predict(&m.predict_logits(&store, &img, &reg).unwrap());
        let b = predict(&m.predict_logits(&store, &img, &preg).unwrap());
        // Class k under the permuted registry is class perm[k] originally.
        let relabeled: Vec<usize> = b.labels.iter().map(|&k| perm[k]).collect();
        assert_eq!(relabeled, a.labels);
    }
}
