//! Task construction, structure smoothing against a dense 2D oracle,
//! image I/O round trips, and the deterministic dataset stream.

mod common;

use common::gaussian_blur_oracle;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sienet_core::data::{
    band_mask, gaussian_blur, make_filling_task, smooth_structure, Dataset, FillingMode, SmoothMethod,
};
use sienet_core::imageio::{load_image, load_rgb8, resize_bilinear, save_image, save_rgb8, Rgb8};
use sienet_core::shape::Shape;
use sienet_core::tensor::Tensor;

fn test_image(size: usize, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(Shape::new(1, 3, size, size), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn gaussian_blur_matches_dense_2d_oracle() {
    let img = test_image(16, 1);
    let got = gaussian_blur(&img, 2.0).unwrap();
    let expect = gaussian_blur_oracle(&img, 2.0);
    for (a, b) in got.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn make_filling_task_covers_resize_and_bands() {
    let raw = test_image(40, 2); // non-square-to-64 resize path
    let task = make_filling_task(&raw, FillingMode::TwoDirection, 0.25, 64, &SmoothMethod::Gaussian { sigma: 2.0 })
        .unwrap();
    assert_eq!(task.y.shape(), Shape::new(1, 3, 64, 64));
    // band = round(0.25 * 64) = 16 per side
    let m = &task.m;
    for y in 0..64 {
        for x in 0..64 {
            let expect = if x < 16 || x >= 48 { 1.0 } else { 0.0 };
            assert_eq!(m.data()[y * 64 + x], expect);
        }
    }
    // X and S zero under the mask, equal to sources elsewhere
    for c in 0..3 {
        for p in 0..64 * 64 {
            if m.data()[p] == 1.0 {
                assert_eq!(task.x.data()[c * 4096 + p], 0.0);
                assert_eq!(task.s.data()[c * 4096 + p], 0.0);
            } else {
                assert_eq!(task.x.data()[c * 4096 + p], task.y.data()[c * 4096 + p]);
                assert_eq!(task.s.data()[c * 4096 + p], task.s_gt.data()[c * 4096 + p]);
            }
        }
    }
    assert!(make_filling_task(&raw, FillingMode::TwoDirection, 0.0, 64, &SmoothMethod::Gaussian { sigma: 2.0 }).is_err());
}

#[test]
fn ppm_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.ppm");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Rgb8 {
        width: 9,
        height: 7,
        pixels: (0..9 * 7 * 3).map(|_| rand::Rng::gen::<u8>(&mut rng)).collect(),
    };
    save_rgb8(&img, &path).unwrap();
    let first = load_image::<f32>(&path).unwrap();
    save_image(&first, 0, &path).unwrap();
    let second = load_image::<f32>(&path).unwrap();
    assert_eq!(first.data(), second.data());
    let round = load_rgb8(&path).unwrap();
    assert_eq!(round.pixels, img.pixels);
}

#[test]
fn png_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.png");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Rgb8 {
        width: 12,
        height: 5,
        pixels: (0..12 * 5 * 3).map(|_| rand::Rng::gen::<u8>(&mut rng)).collect(),
    };
    save_rgb8(&img, &path).unwrap();
    let t = load_image::<f32>(&path).unwrap();
    save_image(&t, 0, &path).unwrap();
    assert_eq!(load_rgb8(&path).unwrap().pixels, img.pixels);
}

#[test]
fn unsupported_format_is_an_error() {
    assert!(load_rgb8(std::path::Path::new("x.jpeg")).is_err());
}

#[test]
fn structure_files_are_matched_by_stem() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let structures = dir.path().join("structures");
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&structures).unwrap();

    // two images; only the first has a precomputed structure (a constant
    // gray map, trivially distinguishable from a blur of the image)
    for (name, seed) in [("a", 10u64), ("b", 11)] {
        let img = test_image(24, seed);
        save_image(&img, 0, &images.join(format!("{name}.png"))).unwrap();
    }
    let gray = Tensor::<f64>::zeros(Shape::new(1, 3, 24, 24));
    save_image(&gray, 0, &structures.join("a.png")).unwrap();

    let ds = Dataset::<f64>::load(&images, Some(&structures), 24, &SmoothMethod::Gaussian { sigma: 1.0 }).unwrap();
    assert_eq!(ds.names, vec!["a".to_string(), "b".to_string()]);
    let batch_a = ds.batch(0, 1, 0, FillingMode::SingleDirection, 0.25, false).unwrap();
    let _ = batch_a;
    // item "a" must carry the constant structure; probe via a size-1 epoch scan
    let mut found_gray = false;
    for it in 0..2 {
        let b = ds.batch(0, 1, it, FillingMode::SingleDirection, 0.25, false).unwrap();
        let center = b.s_gt.data()[12 * 24 + 6];
        if (center - 0.0).abs() < 1e-2 {
            found_gray = true;
        }
    }
    assert!(found_gray, "precomputed structure was not picked up");
}

#[test]
fn empty_dataset_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Dataset::<f32>::load(dir.path(), None, 32, &SmoothMethod::Gaussian { sigma: 1.0 }).is_err());
}

#[test]
fn dataset_stream_is_deterministic_and_flip_is_seeded() {
    let images: Vec<Tensor<f64>> = (0..3).map(|i| test_image(16, 20 + i)).collect();
    let structures: Vec<Tensor<f64>> = images.iter().map(|t| gaussian_blur(t, 1.0).unwrap()).collect();
    let names = (0..3).map(|i| format!("i{i}")).collect();
    let ds = Dataset::from_tensors(names, images, structures).unwrap();

    let run = |seed: u64| {
        let mut out = Vec::new();
        for it in 0..6 {
            let b = ds.batch(seed, 2, it, FillingMode::TwoDirection, 0.25, true).unwrap();
            out.extend_from_slice(b.y.data());
        }
        out
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn resize_bilinear_downsamples_smoothly() {
    // a linear ramp stays a ramp under bilinear resampling
    let mut img = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 32));
    for y in 0..4 {
        for x in 0..32 {
            img.data_mut()[y * 32 + x] = x as f64;
        }
    }
    let half = resize_bilinear(&img, 4, 16).unwrap();
    for y in 0..4 {
        for x in 1..15 {
            let expect = (x as f64 + 0.5) * 2.0 - 0.5;
            assert!((half.data()[y * 16 + x] - expect).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // every emitted task keeps the covering invariants
    #[test]
    fn task_invariants_hold(
        ratio in 0.05f64..0.45,
        two_dir in any::<bool>(),
        seed in 0u64..500,
    ) {
        let mode = if two_dir { FillingMode::TwoDirection } else { FillingMode::SingleDirection };
        let img = test_image(32, seed);
        let s_gt = gaussian_blur(&img, 1.5).unwrap();
        let task = sienet_core::data::FillingTask::build(img, s_gt, mode, ratio).unwrap();
        let band = (ratio * 32.0).round() as usize;
        let n = 32 * 32;
        for p in 0..n {
            let x = p % 32;
            let in_band = match mode {
                FillingMode::TwoDirection => x < band || x >= 32 - band,
                FillingMode::SingleDirection => x >= 32 - band,
            };
            prop_assert_eq!(task.m.data()[p], if in_band { 1.0 } else { 0.0 });
            for c in 0..3 {
                if in_band {
                    prop_assert_eq!(task.x.data()[c * n + p], 0.0);
                    prop_assert_eq!(task.s.data()[c * n + p], 0.0);
                }
            }
        }
    }

    // smoothing never increases variance
    #[test]
    fn gaussian_is_variance_contractive(sigma in 0.3f64..4.0, seed in 0u64..500) {
        let img = test_image(16, seed);
        let out = gaussian_blur(&img, sigma).unwrap();
        let var = |d: &[f64]| {
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64
        };
        prop_assert!(var(out.data()) <= var(img.data()) + 1e-12);
    }
}

#[test]
fn band_mask_values_are_binary() {
    let m = band_mask::<f32>(8, 32, FillingMode::TwoDirection, 0.3).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn smooth_structure_dispatches_and_rejects_missing_file() {
    let img = test_image(16, 30);
    let g = smooth_structure(&img, &SmoothMethod::Gaussian { sigma: 1.0 }).unwrap();
    assert_eq!(g.shape(), img.shape());
    let b = smooth_structure(
        &img,
        &SmoothMethod::Bilateral { iterations: 1, sigma_spatial: 1.0, sigma_range: 0.3 },
    )
    .unwrap();
    assert_eq!(b.shape(), img.shape());
    assert!(smooth_structure(
        &img,
        &SmoothMethod::FromFile { path: "/definitely/missing.png".into() }
    )
    .is_err());
}
