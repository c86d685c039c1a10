mod common;

use std::path::Path;

use mltr::data::manifest::{self, load_manifest, Split, SplitFile, CLASSES, SPLIT_FILE};
use mltr::data::pnm::{self, ImageBuffer};
use mltr::data::preprocess::{self, PreprocessConfig};
use mltr::data::synth::{synth_generate, SynthSpec};
use mltr::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn clahe_matches_brute_force_on_random_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..20 {
        let img = common::random_gray(&mut rng, 16, 16);
        let got = preprocess::clahe(&img, 2.0, [8, 8]).unwrap();
        assert_eq!(got.data, common::clahe_brute_force(&img, 2.0, [8, 8]), "image {i}");
    }
}

#[test]
fn clahe_matches_brute_force_across_grids_and_clips() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(w, h, clip, grid) in &[
        (16, 16, 4.0, [4, 4]),
        (23, 17, 2.0, [3, 5]),
        (9, 31, 1.0, [8, 8]),
        (5, 5, 2.0, [8, 8]),
        (16, 16, 0.0, [2, 2]),
    ] {
        let img = common::random_gray(&mut rng, w, h);
        let got = preprocess::clahe(&img, clip, grid).unwrap();
        assert_eq!(got.data, common::clahe_brute_force(&img, clip, grid), "{w}x{h} clip {clip} grid {grid:?}");
    }
}

#[test]
fn clahe_on_low_contrast_image_spreads_values() {
    let data: Vec<u8> = (0..256).map(|i| 100 + (i % 8) as u8).collect();
    let img = ImageBuffer::gray(16, 16, data).unwrap();
    let out = preprocess::clahe(&img, 2.0, [1, 1]).unwrap();
    let (lo, hi) = (out.data.iter().min().unwrap(), out.data.iter().max().unwrap());
    assert!(hi - lo > 7, "range {lo}..{hi}");
}

#[test]
fn clahe_rejects_colour_and_empty_grid() {
    let rgb = ImageBuffer::filled(4, 4, 3, 0);
    assert!(matches!(preprocess::clahe(&rgb, 2.0, [2, 2]), Err(Error::Shape(_))));
    let gray = ImageBuffer::filled(4, 4, 1, 0);
    assert!(matches!(preprocess::clahe(&gray, 2.0, [0, 2]), Err(Error::Config(_))));
}

#[test]
fn gamma_matches_exact_integer_rounding() {
    let lut = preprocess::gamma_lut(1.2);
    for v in 0..=255u8 {
        assert_eq!(lut[v as usize], common::gamma_1_2_exact(v), "input {v}");
    }
    assert_eq!((lut[0], lut[255]), (0, 255));
}

#[test]
fn gamma_one_is_identity() {
    let lut = preprocess::gamma_lut(1.0);
    assert!(lut.iter().enumerate().all(|(v, &o)| o as usize == v));
}

#[test]
fn minmax_stretches_to_full_range() {
    let img = ImageBuffer::gray(4, 1, vec![50, 60, 70, 150]).unwrap();
    // (v − 50)·255/100 rounded half up: 0, 25.5 → 26, 51, 255
    assert_eq!(preprocess::minmax(&img).data, vec![0, 26, 51, 255]);
    let flat = ImageBuffer::filled(3, 3, 1, 77);
    assert_eq!(preprocess::minmax(&flat), flat);
}

#[test]
fn grayscale_uses_bt601_weights() {
    let img = ImageBuffer::new(3, 1, 3, vec![255, 0, 0, 0, 255, 0, 0, 0, 255]).unwrap();
    // 0.299·255, 0.587·255, 0.114·255
    assert_eq!(preprocess::grayscale(&img).data, vec![76, 150, 29]);
}

#[test]
fn resize_keeps_constant_images_constant() {
    for &(w, h) in &[(7, 3), (64, 64), (1, 1)] {
        let img = ImageBuffer::filled(13, 9, 1, 131);
        let out = preprocess::resize_bilinear(&img, w, h);
        assert_eq!((out.width, out.height), (w, h));
        assert!(out.data.iter().all(|&v| v == 131));
    }
}

#[test]
fn resize_half_averages_pixel_pairs() {
    let img = ImageBuffer::gray(4, 1, vec![0, 100, 200, 50]).unwrap();
    assert_eq!(preprocess::resize_bilinear(&img, 2, 1).data, vec![50, 125]);
}

#[test]
fn preprocess_output_shape_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = ImageBuffer::new(40, 30, 3, (0..3600).map(|_| rand::Rng::random(&mut rng)).collect()).unwrap();
    let t = preprocess::preprocess(&img, 32, 32, &PreprocessConfig::default()).unwrap();
    assert_eq!(t.shape(), &[1, 32, 32]);
    assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

fn write_class_dirs(root: &Path, counts: &[usize]) {
    let img = ImageBuffer::filled(4, 4, 1, 9);
    for (c, &n) in counts.iter().enumerate() {
        std::fs::create_dir_all(root.join(CLASSES[c])).unwrap();
        for i in 0..n {
            pnm::write(&root.join(CLASSES[c]).join(format!("{i:03}.pgm")), &img).unwrap();
        }
    }
}

#[test]
fn split_counts_reproduce_reference_table() {
    let dir = tempfile::tempdir().unwrap();
    write_class_dirs(dir.path(), &[26, 49, 36, 20]);
    let m = load_manifest(dir.path(), 0.7, 0).unwrap();
    let train: Vec<usize> = (0..4).map(|c| m.count(c, Split::Train)).collect();
    let test: Vec<usize> = (0..4).map(|c| m.count(c, Split::Test)).collect();
    assert_eq!(train, vec![18, 35, 25, 14]);
    assert_eq!(test, vec![8, 14, 11, 6]);
}

#[test]
fn split_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    write_class_dirs(dir.path(), &[10, 10, 10, 10]);
    let a = load_manifest(dir.path(), 0.5, 1).unwrap();
    assert_eq!(a, load_manifest(dir.path(), 0.5, 1).unwrap());
    assert_ne!(a.entries, load_manifest(dir.path(), 0.5, 2).unwrap().entries);
}

#[test]
fn split_file_pins_the_split() {
    let dir = tempfile::tempdir().unwrap();
    write_class_dirs(dir.path(), &[2, 1, 1, 1]);
    let pinned = SplitFile {
        train: vec!["normal/000.pgm".into(), "mild/000.pgm".into()],
        test: vec!["normal/001.pgm".into(), "moderate/000.pgm".into(), "severe/000.pgm".into()],
    };
    std::fs::write(dir.path().join(SPLIT_FILE), serde_json::to_string(&pinned).unwrap()).unwrap();
    let m = load_manifest(dir.path(), 0.7, 0).unwrap();
    let train: Vec<&str> = m.split(Split::Train).map(|e| e.path.as_str()).collect();
    assert_eq!(train, vec!["normal/000.pgm", "mild/000.pgm"]);
    assert_eq!(m.split(Split::Test).count(), 3);

    let bad = SplitFile { train: vec!["normal/404.pgm".into()], test: vec![] };
    std::fs::write(dir.path().join(SPLIT_FILE), serde_json::to_string(&bad).unwrap()).unwrap();
    assert!(matches!(load_manifest(dir.path(), 0.7, 0), Err(Error::Dataset(_))));
}

#[test]
fn missing_class_directory_is_a_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    write_class_dirs(dir.path(), &[1, 1, 1]);
    assert!(matches!(load_manifest(dir.path(), 0.7, 0), Err(Error::Dataset(_))));
}

#[test]
fn pnm_roundtrip_and_errors() {
    let gray = ImageBuffer::gray(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
    assert_eq!(pnm::decode(&pnm::encode(&gray)).unwrap(), gray);
    let rgb = ImageBuffer::new(1, 2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
    assert_eq!(pnm::decode(&pnm::encode(&rgb)).unwrap(), rgb);

    let commented = b"P5\n# note\n2 1\n255\n\x07\x08";
    assert_eq!(pnm::decode(commented).unwrap().data, vec![7, 8]);

    assert!(matches!(pnm::decode(b"P2\n1 1\n255\n0"), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(pnm::decode(b"P5\n1 1\n65535\n\0\0"), Err(Error::Format { .. })));
    let truncated = b"P5\n2 2\n255\n\x01";
    assert!(matches!(pnm::decode(truncated), Err(Error::Format { offset, .. }) if offset == truncated.len()));
}

#[test]
fn synthetic_severity_is_separable_by_dark_pixels() {
    let spec = SynthSpec { n_per_class: 8, seed: 5, height: 64, width: 64, split_ratio: 0.7 };
    let (manifest, images) = synth_generate(&spec).unwrap();
    let dark = |img: &ImageBuffer| img.data.iter().filter(|&&v| v < 40).count();
    let normal: Vec<usize> =
        manifest.entries.iter().zip(&images).filter(|(e, _)| e.class == 0).map(|(_, i)| dark(i)).collect();
    let severe: Vec<usize> =
        manifest.entries.iter().zip(&images).filter(|(e, _)| e.class == 3).map(|(_, i)| dark(i)).collect();
    assert!(normal.iter().max() < severe.iter().min(), "normal {normal:?} severe {severe:?}");
    assert_eq!(manifest.entries.iter().filter(|e| e.split == Split::Train).count(), 22);
    assert_eq!(manifest::class_index("severe"), Some(3));
}

proptest! {
    #[test]
    fn preprocessing_is_deterministic_and_sized(
        w in 4usize..40, h in 4usize..40, ow in 4usize..24, oh in 4usize..24, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = common::random_gray(&mut rng, w, h);
        let cfg = PreprocessConfig::default();
        let a = preprocess::preprocess_u8(&img, ow, oh, &cfg).unwrap();
        prop_assert_eq!((a.width, a.height, a.channels), (ow, oh, 1));
        prop_assert_eq!(a, preprocess::preprocess_u8(&img, ow, oh, &cfg).unwrap());
    }

    #[test]
    fn apportion_hits_rounded_total(counts in prop::collection::vec(1usize..80, 1..6), ratio in 0.05f64..1.0) {
        let train = manifest::apportion(&counts, ratio);
        let total: usize = counts.iter().sum();
        prop_assert_eq!(train.iter().sum::<usize>(), (total as f64 * ratio).round() as usize);
        for (t, c) in train.iter().zip(&counts) {
            prop_assert!(t <= c);
            prop_assert!((*t as f64 - *c as f64 * ratio).abs() < 1.0 + 1e-9);
        }
    }
}
