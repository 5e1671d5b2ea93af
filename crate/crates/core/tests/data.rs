use std::path::Path;

use fasvit::data::synth::{generate, SynthConfig, DOMAIN_SEPARATION_FLOOR, MANIFEST_FILE};
use fasvit::data::{load_images, preprocess, sample_frames, ChannelStats, DatasetManifest};
use fasvit::label::Label;
use fasvit::tensor::Tensor;
use fasvit::Error;
use proptest::prelude::*;

fn small() -> SynthConfig {
    SynthConfig {
        subjects_per_domain: 4,
        frames_per_video: 3,
        image_size: 16,
        seed: 21,
        ..SynthConfig::default()
    }
}

#[test]
fn synthetic_dataset_is_deterministic_on_disk() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&small()).unwrap().write(a.path()).unwrap();
    generate(&small()).unwrap().write(b.path()).unwrap();
    let ma = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(ma, std::fs::read(b.path().join(MANIFEST_FILE)).unwrap());
    let manifest = DatasetManifest::read(&a.path().join(MANIFEST_FILE)).unwrap();
    for r in &manifest.records {
        let fa = std::fs::read(a.path().join(&r.path)).unwrap();
        let fb = std::fs::read(b.path().join(&r.path)).unwrap();
        assert_eq!(fa, fb, "{}", r.path);
    }
}

#[test]
fn manifest_roundtrip_is_byte_identical() {
    let ds = generate(&small()).unwrap();
    let text = ds.manifest.to_string().unwrap();
    let back = DatasetManifest::parse(&text, "", Path::new("m.csv")).unwrap();
    assert_eq!(back.records, ds.manifest.records);
    assert_eq!(back.to_string().unwrap(), text);
}

#[test]
fn manifest_errors_name_the_problem() {
    let ds = generate(&small()).unwrap();
    let text = ds.manifest.to_string().unwrap();
    let bad_label = text.replacen(",live,", ",alive,", 1);
    let err = DatasetManifest::parse(&bad_label, "", Path::new("m.csv")).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }) && err.to_string().contains("alive"));
    let dup = format!("{text}{}\n", text.lines().last().unwrap());
    assert!(DatasetManifest::parse(&dup, "", Path::new("m.csv")).is_err());
    assert!(DatasetManifest::parse("sample_id\n", "", Path::new("m.csv")).is_err());
}

#[test]
fn images_decode_to_generated_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small()).unwrap();
    ds.write(dir.path()).unwrap();
    let manifest = DatasetManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
    let recs: Vec<_> = manifest.records.iter().take(10).collect();
    let loaded = load_images(&manifest, &recs, 16).unwrap();
    for (img, orig) in loaded.iter().zip(&ds.images) {
        assert!(img.pixels.max_abs_diff(orig) < 1e-12);
    }

    std::fs::remove_file(dir.path().join(&manifest.records[0].path)).unwrap();
    let err = load_images(&manifest, &recs[..1], 16).unwrap_err();
    assert!(err.to_string().contains(&manifest.records[0].path));
}

#[test]
fn label_balance_matches_configuration() {
    for (live, spoof) in [(1, 1), (1, 3), (2, 1)] {
        let cfg = SynthConfig {
            live_videos_per_subject: live,
            spoof_videos_per_subject: spoof,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let n_live = ds.manifest.records.iter().filter(|r| r.label == Label::Live).count();
        let ratio = n_live as f64 / ds.manifest.records.len() as f64;
        assert!(
            (ratio - cfg.live_ratio()).abs() <= 0.01,
            "{ratio} vs {}",
            cfg.live_ratio()
        );
    }
}

#[test]
fn default_dataset_is_non_trivial_and_separated() {
    let ds = generate(&SynthConfig::default()).unwrap();
    assert_eq!(ds.manifest.domains.len(), 4);
    for p in &ds.probe {
        assert!(p.auc > 0.7 && p.auc < 0.95, "probe AUC {} in {}", p.auc, p.domain);
    }
    assert!(ds.domain_separation() > DOMAIN_SEPARATION_FLOOR);
}

#[test]
fn training_split_standardizes_to_zero_mean() {
    let ds = generate(&small()).unwrap();
    let train: Vec<&Tensor> = ds
        .manifest
        .records
        .iter()
        .zip(&ds.images)
        .filter(|(r, _)| r.domain != "d3")
        .map(|(_, img)| img)
        .collect();
    let stats = ChannelStats::compute(train.iter().copied(), vec!["d0".into(), "d1".into(), "d2".into()]).unwrap();
    let mut sums = [0.0; 3];
    let mut count = 0.0;
    for img in &train {
        let out = preprocess(img, 16, &stats);
        for (c, chunk) in out.data().chunks(256).enumerate() {
            sums[c] += chunk.iter().sum::<f64>();
        }
        count += 256.0;
    }
    for s in sums {
        assert!((s / count).abs() < 1e-4);
    }
}

#[test]
fn base_geometry_preprocesses_to_224() {
    let img = Tensor::from_fn(&[3, 40, 30], |i| (i % 7) as f64 / 7.0);
    let stats = ChannelStats::compute([&img], vec!["d".into()]).unwrap();
    assert_eq!(preprocess(&img, 224, &stats).shape(), &[3, 224, 224]);
}

proptest! {
    #[test]
    fn frame_indices_are_monotone_and_in_range(n in 1usize..200, k in 1usize..20) {
        let idx = sample_frames(n, k).unwrap();
        prop_assert!(!idx.is_empty() && idx.len() <= k.min(n));
        prop_assert_eq!(idx[0], 0);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*idx.last().unwrap() < n);
        if k > 1 && n >= k {
            prop_assert_eq!(*idx.last().unwrap(), n - 1);
        }
    }
}
