//! Finite-difference verification of every differentiable operation, in
//! isolation and in randomly composed chains. Runs in f64: the checks
//! exercise exactly the code paths training uses, at higher precision.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sienet_core::check::{check_gradients, DEFAULT_EPS};
use sienet_core::graph::{Graph, Var};
use sienet_core::shape::Shape;
use sienet_core::tensor::Tensor;
use sienet_core::Result;

const TOL: f64 = 1e-4;

fn smooth_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    // keep values away from relu/abs kinks by construction
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..shape.numel())
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..0.9);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn conv2d_gradients() {
    let x = smooth_tensor(Shape::new(2, 2, 5, 5), 1);
    let w = smooth_tensor(Shape::new(3, 2, 3, 3), 2);
    let b = smooth_tensor(Shape::new(1, 3, 1, 1), 3);
    check_gradients(
        &|g: &mut Graph<f64>, vars: &[Var]| {
            let y = g.conv2d(vars[0], vars[1], Some(vars[2]), 1, 1)?;
            g.mean_all(y)
        },
        &[x, w, b],
        DEFAULT_EPS,
        TOL,
    );
}

#[test]
fn strided_conv_gradients() {
    let x = smooth_tensor(Shape::new(1, 2, 6, 6), 4);
    let w = smooth_tensor(Shape::new(2, 2, 4, 4), 5);
    check_gradients(
        &|g: &mut Graph<f64>, vars: &[Var]| {
            let y = g.conv2d(vars[0], vars[1], None, 2, 1)?;
            g.mean_all(y)
        },
        &[x, w],
        DEFAULT_EPS,
        TOL,
    );
}

#[test]
fn box_sum_gradients() {
    let x = smooth_tensor(Shape::new(1, 2, 5, 5), 6);
    check_gradients(
        &|g: &mut Graph<f64>, vars: &[Var]| {
            let y = g.box_sum(vars[0], 3)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        },
        &[x],
        DEFAULT_EPS,
        TOL,
    );
}

#[test]
fn reflect_pad_gradients() {
    let x = smooth_tensor(Shape::new(1, 2, 4, 5), 7);
    check_gradients(
        &|g: &mut Graph<f64>, vars: &[Var]| {
            let y = g.reflect_pad(vars[0], 2)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        },
        &[x],
        DEFAULT_EPS,
        TOL,
    );
}

#[test]
fn upsample_gradients() {
    let x = smooth_tensor(Shape::new(1, 2, 3, 3), 8);
    check_gradients(
        &|g: &mut Graph<f64>, vars: &[Var]| {
            let y = g.upsample_nearest(vars[0], 2)?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        },
        &[x],
        DEFAULT_EPS,
        TOL,
    );
}

#[test]
fn pointwise_gradients() {
    type Build = fn(&mut Graph<f64>, Var) -> Result<Var>;
    let builds: Vec<(&str, Build)> = vec![
        ("relu", |g, x| g.relu(x)),
        ("leaky_relu", |g, x| g.leaky_relu(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("softplus", |g, x| g.softplus(x)),
        ("abs", |g, x| g.abs(x)),
        ("scale_shift", |g, x| g.scale_shift(x, -1.7, 0.3)),
    ];
    for (name, build) in builds {
        let x = smooth_tensor(Shape::new(1, 2, 4, 4), 9);
        check_gradients(
            &move |g: &mut Graph<f64>, vars: &[Var]| {
                let y = build(g, vars[0])?;
                g.mean_all(y)
            },
            &[x],
            DEFAULT_EPS,
            TOL,
        );
        // silence unused warning pattern; name used in panic messages only
        let _ = name;
    }
}

#[test]
fn sqrt_gradients() {
    // positive inputs only
    let data: Vec<f64> = (0..16).map(|i| 0.3 + 0.05 * i as f64).collect();
    let x = Tensor::from_vec(Shape::new(1, 1, 4, 4), data).unwrap();
    check_gradients(
        &|g: &mut Graph<f64>, vars: &[Var]| {
            let y = g.sqrt(vars[0])?;
            g.mean_all(y)
        },
        &[x],
        DEFAULT_EPS,
        TOL,
    );
}

#[test]
fn instance_norm_gradients() {
    let x = smooth_tensor(Shape::new(2, 2, 4, 4), 10);
    check_gradients(
        &|g: &mut Graph<f64>, vars: &[Var]| {
            let y = g.instance_norm(vars[0])?;
            let t = g.tanh(y)?;
            g.mean_all(t)
        },
        &[x],
        DEFAULT_EPS,
        1e-3, // normalization amplifies FD noise slightly
    );
}

#[test]
fn binary_op_gradients_with_broadcast() {
    let a = smooth_tensor(Shape::new(1, 3, 3, 3), 11);
    let m = smooth_tensor(Shape::new(1, 1, 3, 3), 12);
    check_gradients(
        &|g: &mut Graph<f64>, vars: &[Var]| {
            let prod = g.mul(vars[1], vars[0])?; // (1ch) * (3ch)
            let inv = g.scale_shift(vars[1], -1.0, 1.0)?;
            let mixed = g.add(prod, inv)?;
            let d = g.sub(mixed, vars[0])?;
            let sq = g.mul(d, d)?;
            g.mean_all(sq)
        },
        &[a, m],
        DEFAULT_EPS,
        TOL,
    );
}

#[test]
fn concat_and_gram_gradients() {
    let a = smooth_tensor(Shape::new(1, 2, 3, 3), 13);
    let b = smooth_tensor(Shape::new(1, 1, 3, 3), 14);
    check_gradients(
        &|g: &mut Graph<f64>, vars: &[Var]| {
            let cat = g.concat_channels(&[vars[0], vars[1]])?;
            let gram = g.gram(cat)?;
            let sq = g.mul(gram, gram)?;
            g.mean_all(sq)
        },
        &[a, b],
        DEFAULT_EPS,
        TOL,
    );
}

#[test]
fn sum_all_gradients() {
    let x = smooth_tensor(Shape::new(1, 1, 3, 4), 15);
    check_gradients(
        &|g: &mut Graph<f64>, vars: &[Var]| {
            let sq = g.mul(vars[0], vars[0])?;
            g.sum_all(sq)
        },
        &[x],
        DEFAULT_EPS,
        TOL,
    );
}

/// Randomly composed chains of four differentiable ops.
#[test]
fn random_four_op_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..6 {
        let mut ops: Vec<u8> = (0..4).map(|_| rng.gen_range(0u8..7)).collect();
        if !ops.iter().any(|&o| o == 0 || o == 6) {
            ops[3] = 0; // keep the weight leaf in play
        }
        let x = smooth_tensor(Shape::new(1, 2, 6, 6), 100 + case);
        let w = smooth_tensor(Shape::new(2, 2, 3, 3), 200 + case);
        let ops_clone = ops.clone();
        check_gradients(
            &move |g: &mut Graph<f64>, vars: &[Var]| {
                let mut h = vars[0];
                for &op in &ops_clone {
                    h = match op {
                        0 => g.conv2d(h, vars[1], None, 1, 1)?,
                        1 => g.tanh(h)?,
                        2 => g.leaky_relu(h)?,
                        3 => g.instance_norm(h)?,
                        4 => g.box_sum(h, 3)?,
                        5 => g.sigmoid(h)?,
                        6 => {
                            let u = g.upsample_nearest(h, 2)?;
                            // keep spatial size bounded
                            g.conv2d(u, vars[1], None, 2, 1)?
                        }
                        _ => unreachable!(),
                    };
                }
                let sq = g.mul(h, h)?;
                g.mean_all(sq)
            },
            &[x, w],
            DEFAULT_EPS,
            1e-3,
            );
        let _ = ops;
    }
}

/// The documented micro-chain: filling conv -> relu -> conv -> L1.
#[test]
fn filling_chain_matches_finite_differences() {
    use sienet_core::filling::{filling_conv_graph, MaskOverride, SkipMode};

    let x = smooth_tensor(Shape::new(1, 3, 8, 8), 16);
    let w = smooth_tensor(Shape::new(3, 3, 3, 3), 19);
    let b = smooth_tensor(Shape::new(1, 3, 1, 1), 20);
    let mask_w = smooth_tensor(Shape::new(1, 3, 3, 3), 21);
    let w2 = smooth_tensor(Shape::new(2, 3, 3, 3), 17);
    let target = smooth_tensor(Shape::new(1, 2, 8, 8), 18);

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
            let h = g.relu(out.y)?;
            let y = g.conv2d(h, vars[5], None, 1, 1)?;
            let d = g.sub(y, vars[6])?;
            let a = g.abs(d)?;
            g.mean_all(a)
        },
        &[x, w, b, mask_w, Tensor::scalar(0.4), w2, target],
        DEFAULT_EPS,
        TOL,
    );
}
