//! PSNR and SSIM on the 8-bit scale.
//!
//! SSIM follows the standard recipe: luma only (ITU-R 601 weights), an
//! 11x11 Gaussian window with sigma 1.5 evaluated on valid positions,
//! K1 = 0.01, K2 = 0.03, L = 255.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LUMA_MAX: f64 = 255.0;

/// 10*log10(max_val^2 / MSE), capped at 100 dB (and exactly 100 when the
/// images are identical).
pub fn psnr(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::BadArg {
            op: "psnr",
            reason: format!("length mismatch: {} vs {}", a.len(), b.len()),
        });
    }
    let mut mse = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

/// ITU-R 601 luma from interleaved-by-plane RGB data (3 planes of h*w).
pub fn rgb_to_luma(rgb: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let n = h * w;
    if rgb.len() != 3 * n {
        return Err(Error::BadArg {
            op: "rgb_to_luma",
            reason: format!("expected 3 planes of {n}, got {}", rgb.len()),
        });
    }
    let (r, g, b) = (&rgb[..n], &rgb[n..2 * n], &rgb[2 * n..]);
    Ok((0..n).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode filter with the normalized Gaussian window.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let out_w = w - SSIM_WINDOW + 1;
    let out_h = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; h * out_w];
    for y in 0..h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            horiz[y * out_w + x] = acc;
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + i) * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

/// Mean local SSIM of two luma planes on the 0..255 scale.
pub fn ssim_luma(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::BadArg {
            op: "ssim",
            reason: format!("plane size mismatch: {}x{}", h, w),
        });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::BadArg {
            op: "ssim",
            reason: format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let k = gaussian_window();
    let n = a.len();
    let aa: Vec<f64> = (0..n).map(|i| a[i] * a[i]).collect();
    let bb: Vec<f64> = (0..n).map(|i| b[i] * b[i]).collect();
    let ab: Vec<f64> = (0..n).map(|i| a[i] * b[i]).collect();

    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let m_aa = filter_valid(&aa, h, w, &k);
    let m_bb = filter_valid(&bb, h, w, &k);
    let m_ab = filter_valid(&ab, h, w, &k);

    let c1 = (SSIM_K1 * LUMA_MAX) * (SSIM_K1 * LUMA_MAX);
    let c2 = (SSIM_K2 * LUMA_MAX) * (SSIM_K2 * LUMA_MAX);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = m_aa[i] - ma * ma;
        let var_b = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM of two RGB images given as 3 planes each, luma computed internally.
pub fn ssim_rgb(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    let la = rgb_to_luma(a, h, w)?;
    let lb = rgb_to_luma(b, h, w)?;
    ssim_luma(&la, &lb, h, w)
}

/// One batch item of a [-1, 1] tensor mapped onto the continuous 0..255
/// scale (no rounding), as 3 planes.
pub fn tensor_to_rgb255<T: Scalar>(t: &Tensor<T>, batch: usize) -> Result<Vec<f64>> {
    let s = t.shape();
    if s.c != 3 || batch >= s.b {
        return Err(Error::BadShape {
            op: "tensor_to_rgb255",
            shape: s,
            reason: "expected a 3-channel image batch".into(),
        });
    }
    let n = 3 * s.plane();
    let start = batch * n;
    Ok(t.data()[start..start + n].iter().map(|v| (v.as_f64() + 1.0) * 127.5).collect())
}

/// Masked mean absolute error on the 0..255 scale; the training-dynamics
/// probe. `mask` selects with 1 the region to measure.
pub fn masked_l1_255<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    let s = a.shape();
    if b.shape() != s {
        return Err(Error::ShapeMismatch { op: "masked_l1", lhs: s, rhs: b.shape() });
    }
    let ms = mask.shape();
    if !ms.broadcasts_with(&s) {
        return Err(Error::ShapeMismatch { op: "masked_l1", lhs: ms, rhs: s });
    }
    let n = s.plane();
    let mut total = 0.0;
    let mut count = 0.0;
    for bi in 0..s.b {
        for ci in 0..s.c {
            let mp = (bi * ms.c + ci.min(ms.c - 1)) * n;
            let ap = (bi * s.c + ci) * n;
            for i in 0..n {
                let mv = mask.data()[mp + i].as_f64();
                if mv > 0.5 {
                    let d = (a.data()[ap + i].as_f64() - b.data()[ap + i].as_f64()) * 127.5;
                    total += d.abs();
                    count += 1.0;
                }
            }
        }
    }
    if count == 0.0 {
        return Err(Error::BadArg { op: "masked_l1", reason: "mask selects nothing".into() });
    }
    Ok(total / count)
}

#[derive(Clone, Debug)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores plus dataset means, with stable ordering by name.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub scores: Vec<ImageScore>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.iter().map(|s| s.psnr).sum::<f64>() / self.scores.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.iter().map(|s| s.ssim).sum::<f64>() / self.scores.len() as f64
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<32} {:>10} {:>10}\n", "image", "psnr", "ssim"));
        for s in &self.scores {
            out.push_str(&format!("{:<32} {:>10.4} {:>10.4}\n", s.name, s.psnr, s.ssim));
        }
        out.push_str(&format!("{:<32} {:>10.4} {:>10.4}\n", "mean", self.mean_psnr(), self.mean_ssim()));
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("image,psnr,ssim\n");
        for s in &self.scores {
            out.push_str(&format!("{},{},{}\n", s.name, s.psnr, s.ssim));
        }
        out.push_str(&format!("mean,{},{}\n", self.mean_psnr(), self.mean_ssim()));
        out
    }
}
