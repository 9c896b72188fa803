//! Manifests, loading, tiling, synthetic data and checkpoints.

mod common;

use std::fs;

use common::*;
use ovseg::checkpoint::{Checkpoint, MAGIC};
use ovseg::data::*;
use ovseg::pipeline::{Model, ModelSpec};
use ovseg::training::{GroundTruthMask, IGNORE_INDEX};
use ovseg::{Error, ParamStore, Tensor};

fn raw(h: usize, w: usize) -> RawMask {
    RawMask { height: h, width: w, labels: (0..h * w).map(|i| (i % 251) as u8).collect() }
}

#[test]
fn tile_counts_and_alignment() {
    let img = Tensor::<f32>::from_fn(&[512, 512, 3], |i| (i[0] * 512 + i[1]) as f32 + i[2] as f32 * 0.25);
    let tiles = tile(&img, &raw(512, 512), 256).unwrap();
    assert_eq!(tiles.len(), 4);
    let (t, m) = &tiles[3];
    for &(r, c) in &[(0, 0), (17, 200), (255, 255)] {
        assert_eq!(t.pixels().get(&[r, c, 1]), img.get(&[256 + r, 256 + c, 1]));
        assert_eq!(m.get(r, c), raw(512, 512).labels[(256 + r) * 512 + 256 + c]);
    }
    let img300 = Tensor::<f32>::zeros(&[300, 300, 3]);
    assert_eq!(tile(&img300, &raw(300, 300), 256).unwrap().len(), 1);
    let small = Tensor::<f32>::zeros(&[100, 100, 3]);
    assert!(matches!(tile(&small, &raw(100, 100), 256), Err(Error::Data(_))));
}

#[test]
fn tiles_partition_the_kept_region() {
    let img = Tensor::<f64>::from_fn(&[10, 7, 3], |i| (i[0] * 7 + i[1]) as f64);
    let tiles = tile(&img, &raw(10, 7), 3).unwrap();
    assert_eq!(tiles.len(), 6);
    let mut values: Vec<i64> =
        tiles.iter().flat_map(|(t, _)| t.pixels().data().iter().step_by(3).map(|&v| v as i64)).collect();
    values.sort();
    let kept: Vec<i64> = (0..9).flat_map(|y| (0..6).map(move |x| y * 7 + x)).collect();
    assert_eq!(values, kept);
}

fn synthetic(dir: &std::path::Path, seed: u64) -> DatasetManifest {
    let spec = SyntheticSpec { seed, n_val: 2, ..Default::default() };
    DatasetManifest::load(&generate_synthetic(&spec, dir).unwrap()).unwrap()
}

#[test]
fn synthetic_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synthetic(a.path(), 4);
    synthetic(b.path(), 4);
    for f in ["manifest.toml", "images/0003.png", "masks/0009.png"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    synthetic(c.path(), 5);
    assert_ne!(fs::read(a.path().join("masks/0000.png")).unwrap(), fs::read(c.path().join("masks/0000.png")).unwrap());
}

#[test]
fn synthetic_classes_all_appear() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 0);
    let reg = m.registry().unwrap();
    assert!(reg.seen_flags().iter().any(|&s| s) && reg.seen_flags().iter().any(|&s| !s));
    derived::synthetic_coverage();
    assert_eq!(m.split_indices("train").len(), 8);
    assert_eq!(m.split_indices("val").len(), 2);
}

#[test]
fn train_phase_hides_unseen_classes() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 1);
    let reg = m.registry().unwrap();
    let unseen = reg.unseen_indices()[0] as u8;
    let mut saw_unseen = false;
    for i in 0..m.samples.len() {
        let (img_e, eval) = load_sample::<f64>(&m, i, Phase::Eval).unwrap();
        let (img_t, train) = load_sample::<f64>(&m, i, Phase::Train).unwrap();
        assert_eq!(img_e, img_t);
        let stored = image::open(dir.path().join(&m.samples[i].mask)).unwrap().to_luma8().into_raw();
        assert_eq!(eval.labels(), &stored[..]);
        for (&e, &t) in eval.labels().iter().zip(train.labels()) {
            if e == unseen {
                saw_unseen = true;
                assert_eq!(t, IGNORE_INDEX);
            } else {
                assert_eq!(t, e);
            }
        }
        assert_eq!(mask_unseen(&train, &reg), train);
    }
    assert!(saw_unseen);
    let seen_only = GroundTruthMask::new(2, vec![0, 1, 2, 0]).unwrap();
    assert_eq!(mask_unseen(&seen_only, &reg), seen_only);
}

#[test]
fn normalization_follows_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = synthetic(dir.path(), 2);
    m.normalization = Normalization { mean: [0.0; 3], std: [1.0; 3] };
    let (img, _) = load_sample::<f64>(&m, 0, Phase::Eval).unwrap();
    let rgb = image::open(dir.path().join(&m.samples[0].image)).unwrap().to_rgb8();
    assert_eq!(img.pixels().get(&[3, 5, 1]), rgb.get_pixel(5, 3).0[1] as f64 / 255.0);
}

#[test]
fn invalid_mask_values_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 3);
    let path = dir.path().join(&m.samples[0].mask);
    let mut mask = image::open(&path).unwrap().to_luma8();
    mask.put_pixel(2, 1, image::Luma([9]));
    mask.save(&path).unwrap();
    match load_sample::<f32>(&m, 0, Phase::Eval) {
        Err(Error::Data(msg)) => assert!(msg.contains("sample 0") && msg.contains('9'), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
    let mut missing = m.clone();
    missing.samples[1].image = "nope.png".into();
    assert!(load_sample::<f32>(&missing, 1, Phase::Eval).is_err());
}

#[test]
fn manifest_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 0);
    assert_eq!(DatasetManifest::parse(&m.to_toml(), dir.path()).unwrap(), m);
    for name in ["iSAID", "DLRSD", "OEM"] {
        let (p, _) = preset_manifest(name).unwrap();
        assert_eq!(DatasetManifest::parse(&p.to_toml(), "").unwrap(), p);
    }
    let (isaid, iters) = preset_manifest("isaid").unwrap();
    assert_eq!((isaid.classes.iter().filter(|c| c.seen).count(), isaid.classes.len(), iters), (9, 15, 10_000));
    let (dlrsd, iters) = preset_manifest("DLRSD").unwrap();
    assert_eq!((dlrsd.classes.iter().filter(|c| c.seen).count(), dlrsd.classes.len(), iters), (10, 17, 5_000));
    let (oem, iters) = preset_manifest("OEM").unwrap();
    assert_eq!((oem.classes.iter().filter(|c| c.seen).count(), oem.classes.len(), iters), (4, 8, 15_000));
    let bad = "name = \"x\"\nbogus = 1\n[[classes]]\nname = \"a\"\nseen = true\n";
    assert!(matches!(DatasetManifest::parse(bad, ""), Err(Error::Config(_))));
    let no_seen = "name = \"x\"\n[[classes]]\nname = \"a\"\nseen = false\n";
    assert!(DatasetManifest::parse(no_seen, "").is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let model = Model::new(ModelSpec { config: tiny_config(), n_prompts: 4, n_train_classes: 3 }).unwrap();
    let params: ParamStore<f32> = model.init(7);
    let ckpt = Checkpoint {
        iteration: 42,
        model: model.spec.clone(),
        run_config: serde_json::json!({"seed": 7}),
        train_classes: vec!["a".into(), "b".into(), "c".into()],
        params,
    };
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.iteration, 42);
    assert_eq!(back.model, model.spec);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ovseg");
    back.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    loaded.save(&path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), bytes);
    // Widening to f64 keeps every value.
    let wide = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    for (n, t) in wide.params.iter() {
        let narrow = ckpt.params.get(n).unwrap();
        assert!(t.data().iter().zip(narrow.data()).all(|(&a, &b)| a == b as f64));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = Model::new(ModelSpec { config: tiny_config(), n_prompts: 4, n_train_classes: 2 }).unwrap();
    let ckpt = Checkpoint {
        iteration: 1,
        model: model.spec.clone(),
        run_config: serde_json::Value::Null,
        train_classes: vec![],
        params: model.init::<f32>(0),
    };
    let bytes = ckpt.to_bytes();
    for bad in [&bytes[..bytes.len() - 1], &b"NOTACKPT\0\0\0\0\0\0\0\0"[..], &bytes[..12]] {
        assert!(matches!(Checkpoint::<f32>::from_bytes(bad), Err(Error::Checkpoint(_))));
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::<f32>::from_bytes(&extra).is_err());
}
