use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use tempfile::TempDir;

use urwkv::data::{gen_synthetic, load_dataset, write_dataset, SyntheticSpec};
use urwkv::Error;

fn gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)]))
        .save(path)
        .unwrap();
}

#[test]
fn generator_is_deterministic_and_nonempty() {
    let a = gen_synthetic(3, 20, 32);
    let b = SyntheticSpec {
        seed: 3,
        count: 20,
        size: 32,
    }
    .generate();
    assert_eq!(a, b);
    assert_ne!(a, gen_synthetic(4, 20, 32));
    for s in &a {
        assert_eq!(s.image.shape(), [1, 32, 32]);
        assert!(!s.mask.is_empty());
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // Prefixes agree: sample i depends only on (seed, i).
    assert_eq!(gen_synthetic(3, 5, 32), a[..5]);
}

#[test]
fn foreground_fraction_is_moderate() {
    let samples = gen_synthetic(0, 1000, 64);
    let mean = samples
        .iter()
        .map(|s| s.mask.count() as f64 / (64.0 * 64.0))
        .sum::<f64>()
        / 1000.0;
    assert!((0.05..=0.45).contains(&mean), "mean foreground {mean}");
}

#[test]
fn disk_round_trip_is_exact() {
    let tmp = TempDir::new().unwrap();
    let samples = gen_synthetic(11, 6, 32);
    write_dataset(tmp.path(), &samples).unwrap();
    assert_eq!(load_dataset(tmp.path()).unwrap(), samples);
}

#[test]
fn masks_binarize_at_128_inclusive() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    gray(&d.join("images/a.png"), 4, 1, |x, _| (x * 60) as u8);
    gray(&d.join("masks/a.png"), 4, 1, |x, _| {
        [0, 127, 128, 255][x as usize]
    });
    gray(&d.join("images/b.png"), 2, 1, |_, _| 10);
    gray(&d.join("masks/b.png"), 2, 1, |x, _| [255, 0][x as usize]);
    let s = load_dataset(d).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!((s[0].id.as_str(), s[1].id.as_str()), ("a", "b"));
    assert_eq!(s[0].mask.bits(), [false, false, true, true]);
    assert_eq!(s[1].mask.bits(), [true, false]);
    assert_eq!(s[0].image.data()[3], 180.0 / 255.0);
}

#[test]
fn missing_mask_names_the_file() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    gray(&d.join("images/a.png"), 2, 2, |_, _| 0);
    gray(&d.join("images/z.png"), 2, 2, |_, _| 0);
    gray(&d.join("masks/a.png"), 2, 2, |_, _| 0);
    match load_dataset(d) {
        Err(Error::MissingMask(p)) => assert!(p.ends_with("masks/z.png")),
        other => panic!("expected a missing-mask error, got {other:?}"),
    }
}

#[test]
fn size_mismatch_and_empty_directories_fail() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert!(matches!(load_dataset(d), Err(Error::Data(_))));
    fs::create_dir_all(d.join("images")).unwrap();
    assert!(matches!(load_dataset(d), Err(Error::Data(_))));
    gray(&d.join("images/a.png"), 3, 2, |_, _| 0);
    gray(&d.join("masks/a.png"), 2, 2, |_, _| 0);
    assert!(matches!(load_dataset(d), Err(Error::Data(_))));
}
