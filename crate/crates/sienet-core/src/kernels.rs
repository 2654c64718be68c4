//! Flat-buffer compute kernels behind the graph operations.
//!
//! Every kernel accumulates each output element in a fixed sequential order,
//! so results are bit-reproducible run to run. The inner loops are written
//! over contiguous slices to autovectorize.

use crate::scalar::Scalar;
use crate::shape::Shape;

/// C (m x n) = A (m x k) * B (k x n), row-major. Saxpy form: the inner loop
/// runs over contiguous rows of B and C, which vectorizes without
/// reassociating any per-element sum (each C element accumulates in plain
/// ascending-k order, so results are bit-reproducible).
///
/// Four output rows share each sweep of B: one load of b_row feeds four
/// independent accumulation streams.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    matmul_into(a, b, c, m, k, n, false);
}

/// As [`matmul`], accumulating into `c` instead of overwriting it.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    matmul_into(a, b, c, m, k, n, true);
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !acc {
        c.fill(T::zero());
    }
    let mut row0 = 0;
    while row0 + 4 <= m {
        let (c0, rest) = c[row0 * n..].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, rest) = rest.split_at_mut(n);
        let c3 = &mut rest[..n];
        let a0 = &a[row0 * k..(row0 + 1) * k];
        let a1 = &a[(row0 + 1) * k..(row0 + 2) * k];
        let a2 = &a[(row0 + 2) * k..(row0 + 3) * k];
        let a3 = &a[(row0 + 3) * k..(row0 + 4) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
            if v0 == T::zero() && v1 == T::zero() && v2 == T::zero() && v3 == T::zero() {
                continue;
            }
            for j in 0..n {
                let bv = b_row[j];
                c0[j] = c0[j] + v0 * bv;
                c1[j] = c1[j] + v1 * bv;
                c2[j] = c2[j] + v2 * bv;
                c3[j] = c3[j] + v3 * bv;
            }
        }
        row0 += 4;
    }
    for row in row0..m {
        let c_row = &mut c[row * n..(row + 1) * n];
        for p in 0..k {
            let a_val = a[row * k + p];
            if a_val == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_val * bv;
            }
        }
    }
}

/// `t` (cols x rows) = transpose of `a` (rows x cols).
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize, t: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(t.len(), rows * cols);
    const TILE: usize = 32;
    let mut y0 = 0;
    while y0 < rows {
        let y1 = (y0 + TILE).min(rows);
        let mut x0 = 0;
        while x0 < cols {
            let x1 = (x0 + TILE).min(cols);
            for y in y0..y1 {
                for x in x0..x1 {
                    t[x * rows + y] = a[y * cols + x];
                }
            }
            x0 = x1;
        }
        y0 = y1;
    }
}

/// C (m x q) += A (m x p) * B^T where B is (q x p). Internally transposes B
/// and runs the saxpy matmul.
pub fn matmul_abt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), q * p);
    debug_assert_eq!(c.len(), m * q);
    let mut bt = vec![T::zero(); b.len()];
    transpose(b, q, p, &mut bt);
    matmul_acc(a, &bt, c, m, p, q);
}

/// C (q x n) = A^T * B where A is (m x q) and B is (m x n).
pub fn matmul_atb<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, q: usize, n: usize) {
    debug_assert_eq!(a.len(), m * q);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), q * n);
    let mut at = vec![T::zero(); a.len()];
    transpose(a, m, q, &mut at);
    matmul(&at, b, c, q, m, n);
}

/// Deterministic sum: fixed-size chunks summed sequentially, then combined
/// in order. (Also better conditioned than one long accumulation.)
pub fn det_sum<T: Scalar>(data: &[T]) -> T {
    const CHUNK: usize = 4096;
    let mut total = T::zero();
    for chunk in data.chunks(CHUNK) {
        let mut s = T::zero();
        for &v in chunk {
            s = s + v;
        }
        total = total + s;
    }
    total
}

pub struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        let eff_h = in_h + 2 * pad;
        let eff_w = in_w + 2 * pad;
        if eff_h < kh || eff_w < kw || stride == 0 {
            return None;
        }
        Some(ConvGeometry {
            out_h: (eff_h - kh) / stride + 1,
            out_w: (eff_w - kw) / stride + 1,
            kh,
            kw,
            stride,
            pad,
        })
    }
}

impl ConvGeometry {
    /// Output index range [lo, hi) whose source index k_off + o*stride - pad
    /// lands inside [0, size).
    fn valid_range(&self, k_off: usize, size: usize, out_size: usize) -> (usize, usize) {
        let lo = if self.pad > k_off { (self.pad - k_off).div_ceil(self.stride) } else { 0 };
        let hi_num = size as isize - 1 + self.pad as isize - k_off as isize;
        let hi = if hi_num < 0 { 0 } else { (hi_num as usize / self.stride + 1).min(out_size) };
        (lo.min(hi), hi)
    }
}

/// Unfold one (C, H, W) image into columns of shape (C*kh*kw, out_h*out_w),
/// zero-filled outside the input. Row order is (c, kh, kw), matching the
/// kernel's flattened layout.
pub fn im2col<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    geo: &ConvGeometry,
    cols: &mut [T],
) {
    let patch = geo.out_h * geo.out_w;
    debug_assert_eq!(cols.len(), c * geo.kh * geo.kw * patch);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ky in 0..geo.kh {
            let (oy_lo, oy_hi) = geo.valid_range(ky, h, geo.out_h);
            for kx in 0..geo.kw {
                let (ox_lo, ox_hi) = geo.valid_range(kx, w, geo.out_w);
                let row = ((ch * geo.kh + ky) * geo.kw + kx) * patch;
                cols[row..row + oy_lo * geo.out_w].fill(T::zero());
                cols[row + oy_hi * geo.out_w..row + patch].fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * geo.stride + ky - geo.pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let dst = &mut cols[row + oy * geo.out_w..row + (oy + 1) * geo.out_w];
                    dst[..ox_lo].fill(T::zero());
                    dst[ox_hi..].fill(T::zero());
                    if ox_lo == ox_hi {
                        continue;
                    }
                    if geo.stride == 1 {
                        let ix0 = ox_lo + kx - geo.pad;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * geo.stride + kx - geo.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Fold columns back onto an image, summing overlaps. Scatter runs in a
/// fixed (c, ky, kx, oy, ox) order per plane, so the result is
/// reproducible.
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    geo: &ConvGeometry,
    out: &mut [T],
) {
    let patch = geo.out_h * geo.out_w;
    debug_assert_eq!(out.len(), c * h * w);
    out.fill(T::zero());
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..geo.kh {
            let (oy_lo, oy_hi) = geo.valid_range(ky, h, geo.out_h);
            for kx in 0..geo.kw {
                let (ox_lo, ox_hi) = geo.valid_range(kx, w, geo.out_w);
                if ox_lo == ox_hi {
                    continue;
                }
                let row = ((ch * geo.kh + ky) * geo.kw + kx) * patch;
                for oy in oy_lo..oy_hi {
                    let iy = oy * geo.stride + ky - geo.pad;
                    let src = &cols[row + oy * geo.out_w..row + (oy + 1) * geo.out_w];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    if geo.stride == 1 {
                        let ix0 = ox_lo + kx - geo.pad;
                        for (d, &s) in dst[ix0..ix0 + (ox_hi - ox_lo)].iter_mut().zip(&src[ox_lo..ox_hi]) {
                            *d = *d + s;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * geo.stride + kx - geo.pad;
                            dst[ix] = dst[ix] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel k x k box sum, stride 1, same padding: out(p) is the sum of
/// the k x k window of the same channel centered at p, zeros outside.
/// Separable: row sums then column sums.
pub fn box_sum<T: Scalar>(input: &[T], shape: Shape, k: usize, out: &mut [T]) {
    debug_assert!(k % 2 == 1);
    let r = k / 2;
    let (h, w) = (shape.h, shape.w);
    let mut row_acc = vec![T::zero(); h * w];
    for plane_idx in 0..shape.b * shape.c {
        let src = &input[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut out[plane_idx * h * w..(plane_idx + 1) * h * w];
        // horizontal pass
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r + 1).min(w);
                let mut s = T::zero();
                for &v in &row[lo..hi] {
                    s = s + v;
                }
                row_acc[y * w + x] = s;
            }
        }
        // vertical pass
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            for x in 0..w {
                let mut s = T::zero();
                for yy in lo..hi {
                    s = s + row_acc[yy * w + x];
                }
                dst[y * w + x] = s;
            }
        }
    }
}
