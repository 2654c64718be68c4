//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (`cargo test --test acceptance -- --nocapture`).

mod common;

use std::time::Instant;

use common::{filling_conv_oracle, max_rel_err, ssim_oracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sienet_core::check::{check_gradients, DEFAULT_EPS};
use sienet_core::config::TrainConfig;
use sienet_core::data::{gaussian_blur, Dataset, FillingMode};
use sienet_core::discriminator::PatchDiscriminator;
use sienet_core::features::FeatureExtractor;
use sienet_core::filling::{filling_conv_graph, FillingConv, MaskOverride, SkipMode};
use sienet_core::generator::{ContentGenerator, StructureGenerator};
use sienet_core::graph::{Graph, Var};
use sienet_core::losses::{
    adversarial_losses, distance_loss, perceptual_from_features, siamese_loss, style_from_features,
    style_loss, total_loss, LossTerms, LossWeights, SiameseNorm,
};
use sienet_core::metrics::{psnr, ssim_luma};
use sienet_core::shape::Shape;
use sienet_core::tensor::Tensor;
use sienet_core::train::{train_joint, Trainer};

fn pass(criterion: u32, details: &str) {
    println!("criterion {criterion:2} PASS: {details}");
}

/// Smooth, colorful synthetic image in [-1, 1]; the overfit target.
fn synthetic_image(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx: f64 = rng.gen_range(1.0..3.0);
    let fy: f64 = rng.gen_range(1.0..3.0);
    let phase: f64 = rng.gen_range(0.0..6.28);
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let base = (fx * 6.28318 * u + phase).sin() * 0.4 + (fy * 6.28318 * v).cos() * 0.3;
            let blob = (-((u - 0.6) * (u - 0.6) + (v - 0.4) * (v - 0.4)) * 14.0).exp();
            data[y * size + x] = (base + 0.5 * blob).clamp(-0.95, 0.95) as f32;
            data[size * size + y * size + x] = (0.7 * base - 0.3 * blob + 0.1).clamp(-0.95, 0.95) as f32;
            data[2 * size * size + y * size + x] = (0.2 - base * 0.5 + u as f64 * 0.6).clamp(-0.95, 0.95) as f32;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, size, size), data).unwrap()
}

fn single_image_dataset(size: usize, seed: u64) -> Dataset<f32> {
    let img = synthetic_image(size, seed);
    let s = gaussian_blur(&img, 3.0).unwrap();
    Dataset::from_tensors(vec!["overfit".into()], vec![img], vec![s]).unwrap()
}

fn multi_image_dataset(n: usize, size: usize) -> Dataset<f32> {
    let mut images = Vec::new();
    let mut structures = Vec::new();
    let mut names = Vec::new();
    for i in 0..n {
        let img = synthetic_image(size, 40 + i as u64);
        structures.push(gaussian_blur(&img, 3.0).unwrap());
        images.push(img);
        names.push(format!("img{i}"));
    }
    Dataset::from_tensors(names, images, structures).unwrap()
}

// ── 1: filling convolution against the literal per-pixel oracle ─────────

#[test]
fn criterion_01_filling_conv_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    while cases < 100 {
        let b = rng.gen_range(1..=2usize);
        let c = rng.gen_range(1..=4usize);
        let h = rng.gen_range(1..=8usize);
        let w = rng.gen_range(1..=8usize);
        // same padding keeps any odd kernel valid on any input size
        let k = [1usize, 3, 5, 7][rng.gen_range(0..4)];
        let fc = FillingConv::<f32>::from_parts(
            Tensor::rand_uniform(Shape::new(c, c, k, k), -0.8, 0.8, &mut rng),
            Tensor::rand_uniform(Shape::new(1, c, 1, 1), -0.5, 0.5, &mut rng),
            Tensor::rand_uniform(Shape::new(1, c, k, k), -0.5, 0.5, &mut rng),
            Tensor::rand_uniform(Shape::new(1, 1, 1, 1), -2.0, 2.0, &mut rng),
            SkipMode::Box,
        )
        .unwrap();
        let x = Tensor::rand_uniform(Shape::new(b, c, h, w), -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(&x, false).unwrap();
        let got = fc.forward(&mut g, xv, "fc").unwrap();
        let expect = filling_conv_oracle(
            &x,
            &fc.padding_weights,
            &fc.padding_bias,
            &fc.mask_weights,
            fc.mask_bias.item(),
            false,
            None,
        );
        worst = worst.max(max_rel_err(g.value(got.y).data(), expect.data()));
        cases += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(worst < 1e-6, "max relative error {worst}");
    assert!(elapsed < 10.0, "took {elapsed:.1}s (budget 10s)");
    pass(1, &format!("{cases} random cases, max rel err {worst:.2e}, {elapsed:.2}s"));
}

// ── 2: mask forced to 1 reduces to conv2d bit-for-bit ───────────────────

#[test]
fn criterion_02_reduction_to_conv2d_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..20 {
        let c = rng.gen_range(1..=4usize);
        let k = [1usize, 3, 5, 7][rng.gen_range(0..4)];
        let h = rng.gen_range(2..=8usize);
        let w = rng.gen_range(2..=8usize);
        let fc = FillingConv::<f32>::from_parts(
            Tensor::rand_uniform(Shape::new(c, c, k, k), -0.8, 0.8, &mut rng),
            Tensor::rand_uniform(Shape::new(1, c, 1, 1), -0.5, 0.5, &mut rng),
            Tensor::zeros(Shape::new(1, c, k, k)),
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
            SkipMode::Box,
        )
        .unwrap();
        let x = Tensor::rand_uniform(Shape::new(1, c, h, w), -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(&x, false).unwrap();
        let forced = fc.forward_with_mask(&mut g, xv, "fc", MaskOverride::Forced(1.0)).unwrap();
        let wv = g.leaf(&fc.padding_weights, false).unwrap();
        let bv = g.leaf(&fc.padding_bias, false).unwrap();
        let plain = g.conv2d(xv, wv, Some(bv), 1, (k - 1) / 2).unwrap();
        assert_eq!(g.value(forced.y).data(), g.value(plain).data(), "case {case} not bit-exact");
    }
    pass(2, "20 random cases bit-identical to conv2d under forced mask 1");
}

// ── 3: the finite-difference gradient suite ─────────────────────────────

#[test]
fn criterion_03_gradient_suite() {
    let start = Instant::now();
    let tol = 1e-4;

    // filling convolution: input and both weight branches, 1x2x8x8
    {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let x = Tensor::<f64>::rand_uniform(Shape::new(1, 2, 8, 8), -0.9, 0.9, &mut rng);
        let w = Tensor::rand_uniform(Shape::new(2, 2, 3, 3), -0.6, 0.6, &mut rng);
        let b = Tensor::rand_uniform(Shape::new(1, 2, 1, 1), -0.4, 0.4, &mut rng);
        let mw = Tensor::rand_uniform(Shape::new(1, 2, 3, 3), -0.4, 0.4, &mut rng);
        let mb = Tensor::scalar(0.2);
        check_gradients(
            &|g: &mut Graph<f64>, vars: &[Var]| {
                let out = filling_conv_graph(
                    g,
                    vars[0],
                    vars[1],
                    vars[2],
                    vars[3],
                    vars[4],
                    SkipMode::Box,
                    MaskOverride::Learned,
                )?;
                let sq = g.mul(out.y, out.y)?;
                g.mean_all(sq)
            },
            &[x, w, b, mw, mb],
            DEFAULT_EPS,
            tol,
        );
    }

    // siamese and distance, directly on tensors
    {
        let mut rng = ChaCha8Rng::seed_from_u64(305);
        let a = Tensor::<f64>::rand_uniform(Shape::new(1, 4, 4, 4), -0.9, 0.9, &mut rng);
        let b = Tensor::rand_uniform(Shape::new(1, 4, 4, 4), -0.9, 0.9, &mut rng);
        check_gradients(
            &|g: &mut Graph<f64>, vars: &[Var]| siamese_loss(g, vars[0], vars[1], SiameseNorm::Mse),
            &[a.clone(), b.clone()],
            DEFAULT_EPS,
            tol,
        );
        check_gradients(
            &|g: &mut Graph<f64>, vars: &[Var]| distance_loss(g, vars[0], vars[1]),
            &[a, b],
            DEFAULT_EPS,
            tol,
        );
    }

    // perceptual and style with respect to the generated 16x16 image
    {
        let fe = FeatureExtractor::<f64>::from_seed(307);
        let mut rng = ChaCha8Rng::seed_from_u64(308);
        let y = Tensor::<f64>::rand_uniform(Shape::new(1, 3, 16, 16), -0.9, 0.9, &mut rng);
        let y_hat = Tensor::<f64>::rand_uniform(Shape::new(1, 3, 16, 16), -0.9, 0.9, &mut rng);
        let taps_y: Vec<Tensor<f64>> = {
            let mut g = Graph::new();
            let yv = g.leaf(&y, false).unwrap();
            let taps = fe.forward(&mut g, yv, "fe").unwrap();
            taps.iter().map(|&t| g.value(t).clone()).collect()
        };
        let taps_p = taps_y.clone();
        let fe_p = FeatureExtractor::<f64>::from_seed(307);
        check_gradients(
            &move |g: &mut Graph<f64>, vars: &[Var]| {
                let frozen: Vec<Var> = taps_p.iter().map(|t| g.leaf(t, false).unwrap()).collect();
                let taps_hat = fe_p.forward(g, vars[0], "fe")?;
                perceptual_from_features(g, &frozen, &taps_hat)
            },
            &[y_hat.clone()],
            DEFAULT_EPS,
            tol,
        );
        let fe_s = FeatureExtractor::<f64>::from_seed(307);
        check_gradients(
            &move |g: &mut Graph<f64>, vars: &[Var]| {
                let frozen: Vec<Var> = taps_y.iter().map(|t| g.leaf(t, false).unwrap()).collect();
                let taps_hat = fe_s.forward(g, vars[0], "fe")?;
                style_from_features(g, &frozen, &taps_hat)
            },
            &[y_hat],
            DEFAULT_EPS,
            tol,
        );
    }

    // a composed four-op chain
    {
        let mut rng = ChaCha8Rng::seed_from_u64(309);
        let x = Tensor::<f64>::rand_uniform(Shape::new(1, 2, 6, 6), -0.9, 0.9, &mut rng);
        let w = Tensor::rand_uniform(Shape::new(2, 2, 3, 3), -0.6, 0.6, &mut rng);
        check_gradients(
            &|g: &mut Graph<f64>, vars: &[Var]| {
                let h = g.conv2d(vars[0], vars[1], None, 1, 1)?;
                let h = g.instance_norm(h)?;
                let h = g.leaky_relu(h)?;
                let h = g.box_sum(h, 3)?;
                let sq = g.mul(h, h)?;
                g.mean_all(sq)
            },
            &[x, w],
            DEFAULT_EPS,
            tol,
        );
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1}s (budget 120s)");
    pass(3, &format!("filling conv + losses + composed chain, {elapsed:.1}s"));
}

// ── 4: loss identities ──────────────────────────────────────────────────

#[test]
fn criterion_04_loss_identities() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    let f = g
        .leaf(&Tensor::rand_uniform(Shape::new(1, 8, 4, 4), -1.0, 1.0, &mut rng), false)
        .unwrap();
    let sie = siamese_loss(&mut g, f, f, SiameseNorm::Mse).unwrap();
    assert_eq!(g.value(sie).item(), 0.0);

    let s = g
        .leaf(&Tensor::rand_uniform(Shape::new(1, 3, 6, 6), -1.0, 1.0, &mut rng), false)
        .unwrap();
    let dist = distance_loss(&mut g, s, s).unwrap();
    assert_eq!(g.value(dist).item(), 0.0);

    let fe = FeatureExtractor::<f64>::from_seed(405);
    let img = g
        .leaf(&Tensor::rand_uniform(Shape::new(1, 3, 16, 16), -1.0, 1.0, &mut rng), false)
        .unwrap();
    let perc = sienet_core::losses::perceptual_loss(&mut g, &fe, img, img, "fe").unwrap();
    assert_eq!(g.value(perc).item(), 0.0);
    let style = style_loss(&mut g, &fe, img, img, "fe").unwrap();
    assert_eq!(g.value(style).item(), 0.0);

    let zeros = g.leaf(&Tensor::zeros(Shape::new(1, 1, 4, 4)), false).unwrap();
    let (d_loss, _) = adversarial_losses(&mut g, zeros, zeros).unwrap();
    let nash = 2.0 * 2.0f64.ln();
    assert!((g.value(d_loss).item() - nash).abs() < 1e-9);

    let one = g.leaf(&Tensor::scalar(1.0), false).unwrap();
    let terms = LossTerms { distance: one, adversarial: one, perceptual: one, style: one, siamese: one };
    let total = total_loss(&mut g, &LossWeights::default(), &terms).unwrap();
    assert!((g.value(total).item() - 257.1).abs() < 1e-9);

    pass(4, "zero identities, d_loss(0) = 2 ln 2, unit total = 257.1");
}

// ── 5: gram invariance under spatial permutation ────────────────────────

#[test]
fn criterion_05_gram_permutation_invariance() {
    use rand::seq::SliceRandom;
    for seed in 0..10u64 {
        let shape = Shape::new(1, 6, 5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(505 + seed);
        let x = Tensor::<f32>::rand_uniform(shape, -1.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..25).collect();
        perm.shuffle(&mut rng);
        let mut permuted = Tensor::<f32>::zeros(shape);
        for c in 0..6 {
            for (dst, &src) in perm.iter().enumerate() {
                permuted.data_mut()[c * 25 + dst] = x.data()[c * 25 + src];
            }
        }
        let mut g = Graph::new();
        let a = g.leaf(&x, false).unwrap();
        let b = g.leaf(&permuted, false).unwrap();
        let ga = g.gram(a).unwrap();
        let gb = g.gram(b).unwrap();
        for (u, v) in g.value(ga).data().iter().zip(g.value(gb).data()) {
            assert!((u - v).abs() < 1e-6, "seed {seed}: {u} vs {v}");
        }
    }
    pass(5, "gram matrices invariant under spatial permutation (tol 1e-6)");
}

// ── 6: the full-resolution shape pipeline ───────────────────────────────

#[test]
fn criterion_06_shape_pipeline_at_256() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let g_struct = StructureGenerator::<f32>::init(true, SkipMode::Box, &mut rng).unwrap();
    let g_content = ContentGenerator::<f32>::init(true, SkipMode::Box, &mut rng).unwrap();
    let d = PatchDiscriminator::<f32>::init(&mut rng);

    let mut g = Graph::new();
    let x = g
        .leaf(&Tensor::rand_uniform(Shape::new(1, 3, 256, 256), -1.0, 1.0, &mut rng), false)
        .unwrap();
    let m = g.leaf(&Tensor::zeros(Shape::new(1, 1, 256, 256)), false).unwrap();
    let s = g
        .leaf(&Tensor::rand_uniform(Shape::new(1, 3, 256, 256), -1.0, 1.0, &mut rng), false)
        .unwrap();
    let input = g.concat_channels(&[x, m, s]).unwrap();
    assert_eq!(g.shape(input), Shape::new(1, 7, 256, 256));

    let so = g_struct.forward(&mut g, input, "gs").unwrap();
    assert_eq!(g.shape(so.bottleneck), Shape::new(1, 256, 32, 32));
    assert_eq!(g.shape(so.s_gen), Shape::new(1, 3, 256, 256));
    assert!(g.value(so.s_gen).is_finite());

    let co = g_content.forward(&mut g, x, m, so.s_gen, "gc").unwrap();
    assert_eq!(g.shape(co.y_hat), Shape::new(1, 3, 256, 256));
    assert_eq!(g.shape(co.feature), Shape::new(1, 256, 32, 32));
    assert!(g.value(co.y_hat).is_finite());

    let logits = d.forward(&mut g, co.y_hat, "d").unwrap();
    assert_eq!(g.shape(logits), Shape::new(1, 1, 16, 16));
    assert!(g.value(logits).is_finite());

    pass(6, "7ch 256x256 -> bottleneck (256,32,32), outputs (3,256,256), logits (1,16,16), all finite");
}

// ── 7: metric oracles ───────────────────────────────────────────────────

#[test]
fn criterion_07_metric_oracles() {
    // closed form: every pixel differing by max/2
    let a = vec![10.0; 128];
    let b = vec![10.0 + 127.5; 128];
    let got = psnr(&a, &b, 255.0).unwrap();
    assert!((got - 10.0 * 4.0f64.log10()).abs() < 1e-6);
    assert!((got - 6.0206).abs() < 1e-4);

    // self-similarity and symmetry
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (h, w) = (16, 16);
    for _ in 0..100 {
        let x: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..255.0)).collect();
        let y: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..255.0)).collect();
        assert_eq!(ssim_luma(&x, &x, h, w).unwrap(), 1.0);
        let ab = ssim_luma(&x, &y, h, w).unwrap();
        let ba = ssim_luma(&y, &x, h, w).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    // independent reference implementation
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(708 + seed);
        let x: Vec<f64> = (0..20 * 22).map(|_| rng.gen_range(0.0..255.0)).collect();
        let y: Vec<f64> = (0..20 * 22).map(|_| rng.gen_range(0.0..255.0)).collect();
        let got = ssim_luma(&x, &y, 20, 22).unwrap();
        let expect = ssim_oracle(&x, &y, 20, 22);
        assert!((got - expect).abs() < 1e-6);
    }

    pass(7, "psnr closed form 6.0206 dB, ssim self = 1, symmetric (1e-9), reference agreement (1e-6)");
}

// ── 8: single-image overfit dynamics ────────────────────────────────────

#[test]
fn criterion_08_training_dynamics_overfit() {
    let start = Instant::now();
    let mut cfg = TrainConfig::default();
    cfg.resolution = 64;
    cfg.batch_size = 1;
    cfg.iterations = 500;
    cfg.seed = 8;
    cfg.checkpoint_every = 1_000_000; // no intermediate checkpoints

    let dataset = single_image_dataset(64, 808);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let batch = dataset.batch(cfg.seed, 1, 0, cfg.mode, cfg.ratio, false).unwrap();

    let before = trainer.masked_error(&batch).unwrap();
    for _ in 0..cfg.iterations {
        let report = trainer.train_step(&batch).unwrap();
        assert!(report.total.is_finite());
    }
    let after = trainer.masked_error(&batch).unwrap();

    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        after <= 0.5 * before,
        "masked L1 {after:.3} not at most half of {before:.3}"
    );
    assert!(elapsed < 900.0, "overfit run took {elapsed:.0}s (budget 900s)");
    pass(
        8,
        &format!("masked L1 {before:.2} -> {after:.2} over 500 iterations, {elapsed:.0}s"),
    );
}

// ── 9: the four ablation configurations ─────────────────────────────────

#[test]
fn criterion_09_ablation_matrix() {
    let dataset = multi_image_dataset(2, 32);
    for (fconv, sam) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut cfg = TrainConfig::default();
        cfg.resolution = 32;
        cfg.batch_size = 1;
        cfg.iterations = 100;
        cfg.seed = 9;
        cfg.use_filling_conv = fconv;
        cfg.use_siamese = sam;
        cfg.checkpoint_every = 1_000_000;
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        for it in 0..cfg.iterations {
            let batch = dataset.batch(cfg.seed, 1, it, cfg.mode, cfg.ratio, false).unwrap();
            let report = trainer.train_step(&batch).unwrap();
            for (name, v) in [
                ("distance", report.distance),
                ("adv", report.adversarial),
                ("perceptual", report.perceptual),
                ("style", report.style),
                ("siamese", report.siamese),
                ("total", report.total),
                ("d_struct", report.d_struct),
                ("d_content", report.d_content),
            ] {
                assert!(v.is_finite(), "fconv={fconv} sam={sam} iter {it}: {name} non-finite");
            }
            if !sam {
                assert_eq!(report.siamese, 0.0, "fconv={fconv} iter {it}");
            }
        }
    }
    pass(9, "all four (FConv, SAM) configurations ran 100 iterations; SAM-off siamese = 0 throughout");
}

// ── 10: bit reproducibility and resume equality ─────────────────────────

#[test]
fn criterion_10_reproducibility_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = multi_image_dataset(3, 32);
    let config = || {
        let mut cfg = TrainConfig::default();
        cfg.resolution = 32;
        cfg.batch_size = 2;
        cfg.iterations = 6;
        cfg.seed = 10;
        cfg.checkpoint_every = 3;
        cfg.out_dir = dir.path().to_path_buf();
        cfg
    };

    let run = || {
        let mut trainer = Trainer::new(config()).unwrap();
        let mut csv = String::from(sienet_core::train::LossReport::CSV_HEADER);
        csv.push('\n');
        train_joint(&mut trainer, &dataset, &mut |r| {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        })
        .unwrap();
        (trainer.to_container().to_bytes(), csv)
    };

    let (bytes_a, csv_a) = run();
    let (bytes_b, csv_b) = run();
    assert_eq!(csv_a, csv_b, "loss CSVs must be byte-identical");
    assert_eq!(bytes_a, bytes_b, "checkpoints must be byte-identical");

    // resume from the cadence checkpoint at iteration 3
    let ckpt = dir.path().join("ckpt_0000003.sien");
    let mut resumed = Trainer::<f32>::load_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.iteration, 3);
    let mut tail = String::new();
    train_joint(&mut resumed, &dataset, &mut |r| {
        tail.push_str(&r.csv_row());
        tail.push('\n');
    })
    .unwrap();
    let expected_tail: String = csv_a.lines().skip(4).map(|l| format!("{l}\n")).collect();
    assert_eq!(tail, expected_tail, "resumed trajectory must replay the uninterrupted tail");
    assert_eq!(
        resumed.to_container().to_bytes(),
        bytes_a,
        "resumed final checkpoint must be byte-identical to the uninterrupted one"
    );

    pass(10, "byte-identical checkpoints and CSVs; resume reproduces the trajectory exactly");
}
