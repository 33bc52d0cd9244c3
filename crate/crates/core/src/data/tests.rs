use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{clip_borders, flip_horizontal, rotate};
use super::*;

fn scene() -> Sample {
    generate_synthetic(&SyntheticSpec::new(3, 1, 48)).unwrap().remove(0)
}

#[test]
fn synthetic_respects_spec() {
    let spec = SyntheticSpec::new(1, 16, 64);
    let a = generate_synthetic(&spec).unwrap();
    assert_eq!(a.len(), 16);
    for s in &a {
        let f = s.foreground_fraction();
        assert!((spec.fg_range.0..=spec.fg_range.1).contains(&f), "{f}");
        assert!(s.mask.iter().all(|&m| m <= 1));
    }
    assert_eq!(a, generate_synthetic(&spec).unwrap());
    assert_ne!(a, generate_synthetic(&SyntheticSpec { seed: 2, ..spec }).unwrap());
}

#[test]
fn zero_similarity_is_intensity_separable() {
    let spec = SyntheticSpec { similarity: 0.0, ..SyntheticSpec::new(5, 4, 48) };
    for s in generate_synthetic(&spec).unwrap() {
        let plane = s.size * s.size;
        let lum = |i: usize| (0..3).map(|c| s.image[c * plane + i]).sum::<f32>() / 3.0;
        let fg_min = (0..plane).filter(|&i| s.mask[i] > 0).map(lum).fold(f32::INFINITY, f32::min);
        let bg_max = (0..plane).filter(|&i| s.mask[i] == 0).map(lum).fold(f32::NEG_INFINITY, f32::max);
        assert!(fg_min > bg_max, "{fg_min} <= {bg_max}");
    }
}

#[test]
fn double_flip_is_identity() {
    let s = scene();
    assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
}

#[test]
fn geometric_ops_keep_mask_binary_and_zero_ops_are_identity() {
    let s = scene();
    for out in [rotate(&s, 13.0), clip_borders(&s, 2, 3, 4, 1)] {
        assert!(out.mask.iter().all(|&m| m <= 1));
    }
    let r = rotate(&s, 0.0);
    assert_eq!(r.mask, s.mask);
    assert!(r.image.iter().zip(&s.image).all(|(a, b)| (a - b).abs() < 1e-6));
    assert_eq!(clip_borders(&s, 0, 0, 0, 0).mask, s.mask);
}

#[test]
fn augmentation_is_seeded() {
    let s = scene();
    let cfg = AugmentConfig::default();
    let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
    let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
    assert!(a.mask.iter().all(|&m| m <= 1));
}

#[test]
fn materialized_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_synthetic(&SyntheticSpec::new(4, 3, 32)).unwrap();
    materialize(&samples, dir.path()).unwrap();
    let ds = Dataset::open(dir.path(), true).unwrap();
    assert_eq!(ds.len(), 3);
    for (i, s) in samples.iter().enumerate() {
        let l = ds.load(i, 32).unwrap();
        assert_eq!(l.mask, s.mask);
        assert!(l.image.iter().zip(&s.image).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
        assert_eq!(ds.load(i, 32).unwrap(), l);
    }
    let resized = ds.load(0, 64).unwrap();
    assert_eq!(resized.size, 64);
    assert!(resized.mask.iter().all(|&m| m <= 1));
}

#[test]
fn missing_mask_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_synthetic(&SyntheticSpec::new(4, 2, 32)).unwrap();
    materialize(&samples, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("GT/0001.png")).unwrap();
    assert!(Dataset::open(dir.path(), true).is_err());
    assert_eq!(Dataset::open(dir.path(), false).unwrap().len(), 1);
}

#[test]
fn batch_is_normalised() {
    let s = scene();
    let (img, gt) = to_batch::<f64>(&[s.clone(), s.clone()]);
    assert_eq!(img.shape(), &[2, 3, 48, 48]);
    assert_eq!(gt.shape(), &[2, 1, 48, 48]);
    let v = img.at4(1, 2, 5, 7);
    let raw = s.image[2 * 48 * 48 + 5 * 48 + 7];
    assert!((v - f64::from((raw - MEAN[2]) / STD[2])).abs() < 1e-6);
}
