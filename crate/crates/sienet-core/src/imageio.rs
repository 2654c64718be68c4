//! 8-bit RGB image I/O (PNG and binary PPM) and resizing.
//!
//! Pixel values map to tensor space by v/127.5 - 1 and back by
//! round((x + 1) * 127.5), so load -> save -> load is bit-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Decoded 8-bit RGB image, planes interleaved per pixel (r, g, b).
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn load_rgb8(path: &Path) -> Result<Rgb8> {
    match extension(path)? {
        Format::Png => {
            let img = image::open(path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
                .to_rgb8();
            Ok(Rgb8 {
                width: img.width() as usize,
                height: img.height() as usize,
                pixels: img.into_raw(),
            })
        }
        Format::Ppm => decode_ppm(&fs::read(path)?, path),
    }
}

pub fn save_rgb8(img: &Rgb8, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    match extension(path)? {
        Format::Png => {
            let buf: image::RgbImage =
                image::ImageBuffer::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
                    .ok_or_else(|| Error::Image("pixel buffer does not match dimensions".into()))?;
            buf.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
        }
        Format::Ppm => {
            let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&img.pixels);
            fs::write(path, out)?;
            Ok(())
        }
    }
}

enum Format {
    Png,
    Ppm,
}

fn extension(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(Format::Png),
        Some("ppm") => Ok(Format::Ppm),
        other => Err(Error::Image(format!(
            "unsupported image format `{}` for {}",
            other.unwrap_or(""),
            path.display()
        ))),
    }
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Rgb8> {
    let err = |msg: &str| Error::Image(format!("{}: {msg}", path.display()));
    let mut pos = 0;
    let mut next_token = || -> Result<String> {
        // skip whitespace and # comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if next_token()? != "P6" {
        return Err(err("not a binary P6 PPM"));
    }
    let width: usize = next_token()?.parse().map_err(|_| err("bad width"))?;
    let height: usize = next_token()?.parse().map_err(|_| err("bad height"))?;
    let maxval: usize = next_token()?.parse().map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates header from data
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(err("truncated pixel data"));
    }
    Ok(Rgb8 { width, height, pixels: bytes[pos..pos + need].to_vec() })
}

/// Interleaved 8-bit pixels -> planar (1, 3, H, W) tensor in [-1, 1].
pub fn rgb8_to_tensor<T: Scalar>(img: &Rgb8) -> Tensor<T> {
    let (h, w) = (img.height, img.width);
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = (y * w + x) * 3;
            for c in 0..3 {
                data[c * h * w + y * w + x] = T::from_f64(img.pixels[px + c] as f64 / 127.5 - 1.0);
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("consistent dims")
}

/// One batch item of a [-1, 1] tensor -> interleaved 8-bit pixels,
/// rounded to nearest and clamped.
pub fn tensor_to_rgb8<T: Scalar>(t: &Tensor<T>, batch: usize) -> Result<Rgb8> {
    let s = t.shape();
    if s.c != 3 || batch >= s.b {
        return Err(Error::BadShape {
            op: "tensor_to_rgb8",
            shape: s,
            reason: "expected a 3-channel image batch".into(),
        });
    }
    let (h, w) = (s.h, s.w);
    let mut pixels = vec![0u8; 3 * h * w];
    let base = batch * 3 * h * w;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (t.data()[base + c * h * w + y * w + x].as_f64() + 1.0) * 127.5;
                pixels[(y * w + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(Rgb8 { width: w, height: h, pixels })
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(rgb8_to_tensor(&load_rgb8(path)?))
}

pub fn save_image<T: Scalar>(t: &Tensor<T>, batch: usize, path: &Path) -> Result<()> {
    save_rgb8(&tensor_to_rgb8(t, batch)?, path)
}

/// Bilinear resize with pixel-center alignment. Resizing to the input size
/// is the identity.
pub fn resize_bilinear<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::BadArg { op: "resize", reason: "zero output size".into() });
    }
    let out_shape = Shape::new(s.b, s.c, out_h, out_w);
    let mut out = vec![T::zero(); out_shape.numel()];
    let scale_y = s.h as f64 / out_h as f64;
    let scale_x = s.w as f64 / out_w as f64;
    for plane in 0..s.b * s.c {
        let src = &t.data()[plane * s.plane()..(plane + 1) * s.plane()];
        let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (s.h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(s.h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (s.w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(s.w - 1);
                let fx = sx - x0 as f64;
                let v00 = src[y0 * s.w + x0].as_f64();
                let v01 = src[y0 * s.w + x1].as_f64();
                let v10 = src[y1 * s.w + x0].as_f64();
                let v11 = src[y1 * s.w + x1].as_f64();
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                dst[oy * out_w + ox] = T::from_f64(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}
