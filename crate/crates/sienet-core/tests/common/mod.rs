//! Independent reference implementations ("oracles") shared by the
//! integration suites. Everything here is written as straight nested loops
//! against the math definitions, with no code shared with the library's
//! compute paths.

#![allow(dead_code)]

use sienet_core::scalar::Scalar;
use sienet_core::shape::Shape;
use sienet_core::tensor::Tensor;

/// Direct nested-loop cross-correlation with zero padding.
pub fn conv2d_oracle<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.c, ws.c);
    let out_h = (xs.h + 2 * pad - ws.h) / stride + 1;
    let out_w = (xs.w + 2 * pad - ws.w) / stride + 1;
    let out_shape = Shape::new(xs.b, ws.b, out_h, out_w);
    let mut out = vec![T::zero(); out_shape.numel()];
    for b in 0..xs.b {
        for oc in 0..ws.b {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = T::zero();
                    for ic in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                let xv = x.data()[xs.index(b, ic, iy as usize, ix as usize)];
                                let wv = w.data()[ws.index(oc, ic, ky, kx)];
                                acc = acc + wv * xv;
                            }
                        }
                    }
                    if let Some(bt) = bias {
                        acc = acc + bt.data()[oc];
                    }
                    out[out_shape.index(b, oc, oy, ox)] = acc;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out).unwrap()
}

/// The filling-convolution blending formula evaluated literally per output
/// pixel: for each p0,
///   y(p0) = m(p0) * (sum_k w_k . x(p0+p_k) + bias) + (1 - m(p0)) * skip(p0)
/// where m(p0) = sigmoid(sum_k mask_w_k . x(p0+p_k) + mask_bias), the skip
/// term is the per-channel K-position sum (or the center pixel), and
/// out-of-bounds samples are zero.
#[allow(clippy::too_many_arguments)]
pub fn filling_conv_oracle<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    mask_w: &Tensor<T>,
    mask_bias: T,
    center_skip: bool,
    forced_mask: Option<T>,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(ws.b, ws.c, "channel-preserving");
    assert_eq!(ws.h, ws.w);
    let k = ws.h;
    let r = (k - 1) / 2;
    let mut out = vec![T::zero(); xs.numel()];
    let sample = |b: usize, c: usize, iy: isize, ix: isize| -> T {
        if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
            T::zero()
        } else {
            x.data()[xs.index(b, c, iy as usize, ix as usize)]
        }
    };
    for b in 0..xs.b {
        for oy in 0..xs.h {
            for ox in 0..xs.w {
                // mask modulation at p0
                let m = match forced_mask {
                    Some(v) => v,
                    None => {
                        let mut logit = mask_bias;
                        for ic in 0..xs.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - r as isize;
                                    let ix = ox as isize + kx as isize - r as isize;
                                    logit = logit
                                        + mask_w.data()[mask_w.shape().index(0, ic, ky, kx)]
                                            * sample(b, ic, iy, ix);
                                }
                            }
                        }
                        T::one() / (T::one() + (-logit).exp())
                    }
                };
                for oc in 0..ws.b {
                    // padding branch: plain cross-correlation plus bias
                    let mut conv = T::zero();
                    for ic in 0..xs.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - r as isize;
                                let ix = ox as isize + kx as isize - r as isize;
                                conv = conv + w.data()[ws.index(oc, ic, ky, kx)] * sample(b, ic, iy, ix);
                            }
                        }
                    }
                    conv = conv + bias.data()[oc];
                    // pass-through branch on the same channel
                    let skip = if center_skip {
                        sample(b, oc, oy as isize, ox as isize)
                    } else {
                        let mut s = T::zero();
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - r as isize;
                                let ix = ox as isize + kx as isize - r as isize;
                                s = s + sample(b, oc, iy, ix);
                            }
                        }
                        s
                    };
                    out[xs.index(b, oc, oy, ox)] = m * conv + (T::one() - m) * skip;
                }
            }
        }
    }
    Tensor::from_vec(xs, out).unwrap()
}

/// Gaussian blur as one dense 2D convolution with a clamped (replicate)
/// boundary; the kernel is the outer product of the normalized 1D window.
pub fn gaussian_blur_oracle(image: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return image.clone();
    }
    let mut k1 = Vec::new();
    for i in -radius..=radius {
        k1.push((-(i as f64) * (i as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = k1.iter().sum();
    for v in &mut k1 {
        *v /= sum;
    }
    let s = image.shape();
    let (h, w) = (s.h as isize, s.w as isize);
    let mut out = vec![0.0; s.numel()];
    for plane in 0..s.b * s.c {
        let src = &image.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out[plane * s.plane()..(plane + 1) * s.plane()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let sy = (y + dy).clamp(0, h - 1);
                        let sx = (x + dx).clamp(0, w - 1);
                        acc += k1[(dy + radius) as usize]
                            * k1[(dx + radius) as usize]
                            * src[(sy * w + sx) as usize];
                    }
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
    }
    Tensor::from_vec(s, out).unwrap()
}

/// SSIM by the definition: per valid window position, Gaussian-weighted
/// means/variances/covariance computed with direct per-window loops.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    let c1 = (0.01 * 255.0f64).powi(2);
    let c2 = (0.03 * 255.0f64).powi(2);
    let mut weights = [[0.0; WIN]; WIN];
    let mut total_w = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            *v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            total_w += *v;
        }
    }
    for row in &mut weights {
        for v in row.iter_mut() {
            *v /= total_w;
        }
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - WIN) {
        for x0 in 0..=(w - WIN) {
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let idx = (y0 + i) * w + x0 + j;
                    mu_a += weights[i][j] * a[idx];
                    mu_b += weights[i][j] * b[idx];
                }
            }
            let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let idx = (y0 + i) * w + x0 + j;
                    var_a += weights[i][j] * a[idx] * a[idx];
                    var_b += weights[i][j] * b[idx] * b[idx];
                    cov += weights[i][j] * a[idx] * b[idx];
                }
            }
            var_a -= mu_a * mu_a;
            var_b -= mu_b * mu_b;
            cov -= mu_a * mu_b;
            let score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += score;
            count += 1;
        }
    }
    total / count as f64
}

pub fn max_rel_err<T: Scalar>(got: &[T], want: &[T]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(&g, &e)| {
            let (g, e) = (g.as_f64(), e.as_f64());
            (g - e).abs() / g.abs().max(e.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Deterministic pseudo-random tensor for tests that do not want to pull in
/// an RNG seeding convention.
pub fn wave_tensor<T: Scalar>(shape: Shape, phase: f64) -> Tensor<T> {
    let data: Vec<T> = (0..shape.numel())
        .map(|i| T::from_f64(((i as f64 + phase) * 0.7311).sin() * 0.9))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}
