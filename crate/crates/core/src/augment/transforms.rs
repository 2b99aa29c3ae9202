//! The four transform families. Each has a `*_with` form taking explicit
//! parameters and a sampling form drawing them from a [`SampleRng`].

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::SampleRng;

/// Integer factor of the constant upscale that precedes rotation.
pub const CONSTANT_UPSCALE: usize = 2;

/// Rec.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn flip_with(img: &ImageTensor, mirror: bool) -> ImageTensor {
    if mirror {
        img.flip_horizontal()
    } else {
        img.clone()
    }
}

/// Mirrors horizontally with probability 1/2.
pub fn flip(img: &ImageTensor, rng: &mut SampleRng) -> ImageTensor {
    let u = rng.uniform(0.0, 1.0);
    flip_with(img, u < 0.5)
}

fn require_square(img: &ImageTensor) -> Result<()> {
    if img.height() != img.width() {
        return Err(Error::UnsupportedShape(format!(
            "rotation needs a square image, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Constant integer upscale followed by a center crop back to the input size.
pub fn upscale_center_crop(img: &ImageTensor) -> Result<ImageTensor> {
    let (h, w, _) = img.dims();
    img.resize_bilinear(h * CONSTANT_UPSCALE, w * CONSTANT_UPSCALE)?
        .center_crop(h, w)
}

/// Upscale, rotate by `degrees` about the center, center crop.
///
/// Samples falling outside the upscaled image take `fill`; on square inputs
/// the factor-2 upscale keeps every sample inside, so `fill` never appears.
pub fn rotate_with(img: &ImageTensor, degrees: f64, fill: f64) -> Result<ImageTensor> {
    require_square(img)?;
    if degrees == 0.0 {
        return upscale_center_crop(img);
    }
    let (h, w, ch) = img.dims();
    let big = img.resize_bilinear(h * CONSTANT_UPSCALE, w * CONSTANT_UPSCALE)?;
    let (bh, bw) = (big.height(), big.width());
    let (top, left) = ((bh - h) / 2, (bw - w) / 2);
    let (cy, cx) = ((bh as f64 - 1.0) / 2.0, (bw as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (max_y, max_x) = ((bh - 1) as f64, (bw - 1) as f64);
    let mut out = ImageTensor::filled(h, w, ch, fill);
    for y in 0..h {
        let dy = (y + top) as f64 - cy;
        for x in 0..w {
            let dx = (x + left) as f64 - cx;
            // inverse map: rotate the destination offset by -theta
            let sy = cy + cos * dy - sin * dx;
            let sx = cx + sin * dy + cos * dx;
            if !(0.0..=max_y).contains(&sy) || !(0.0..=max_x).contains(&sx) {
                continue;
            }
            for c in 0..ch {
                out.set(y, x, c, big.sample_bilinear_clamped(sy, sx, c));
            }
        }
    }
    Ok(out)
}

/// Rotation by an angle drawn from `Uniform(-max_deg, max_deg)`.
pub fn rotate(img: &ImageTensor, max_deg: f64, rng: &mut SampleRng) -> Result<ImageTensor> {
    require_square(img)?;
    if !(0.0..=180.0).contains(&max_deg) {
        return Err(Error::Config(format!("rotation range {max_deg} outside [0, 180]")));
    }
    if max_deg == 0.0 {
        return upscale_center_crop(img);
    }
    let theta = rng.uniform(-max_deg, max_deg);
    rotate_with(img, theta, 0.0)
}

/// Size of one zoomed axis.
pub fn zoomed_len(len: usize, factor: f64) -> usize {
    (factor * len as f64).round() as usize
}

/// Anisotropic resize by `(fh, fw)` then an `H x W` crop at `(top, left)`.
pub fn zoom_with(img: &ImageTensor, fh: f64, fw: f64, top: usize, left: usize) -> Result<ImageTensor> {
    let (h, w, _) = img.dims();
    let (zh, zw) = (zoomed_len(h, fh), zoomed_len(w, fw));
    if zh < h || zw < w {
        return Err(Error::DegenerateZoom(format!("{zh}x{zw} is smaller than {h}x{w}")));
    }
    img.resize_bilinear(zh, zw)?.crop(top, left, h, w)
}

/// Independent height/width factors from `Uniform(lo, hi)`, crop position
/// uniform over every offset that keeps the crop inside the enlarged image.
pub fn zoom(img: &ImageTensor, lo: f64, hi: f64, rng: &mut SampleRng) -> Result<ImageTensor> {
    let (h, w, _) = img.dims();
    if lo > hi || zoomed_len(h, lo) <= h || zoomed_len(w, lo) <= w {
        return Err(Error::DegenerateZoom(format!(
            "factors [{lo}, {hi}] do not enlarge a {h}x{w} image"
        )));
    }
    let fh = rng.uniform(lo, hi);
    let fw = rng.uniform(lo, hi);
    let (zh, zw) = (zoomed_len(h, fh), zoomed_len(w, fw));
    let top = rng.uniform_index(zh - h + 1);
    let left = rng.uniform_index(zw - w + 1);
    zoom_with(img, fh, fw, top, left)
}

fn luma(px: &[f64]) -> f64 {
    if px.len() == 3 {
        LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
    } else {
        px[0]
    }
}

/// Brightness, saturation and contrast by the given factors, clamped once.
pub fn color_jitter_with(img: &ImageTensor, brightness: f64, saturation: f64, contrast: f64) -> ImageTensor {
    let (h, w, ch) = img.dims();
    let mut out = img.clone();
    for v in out.data_mut() {
        *v *= brightness;
    }
    if ch == 3 {
        for px in out.data_mut().chunks_mut(3) {
            let gray = luma(px);
            for v in px.iter_mut() {
                *v = gray + saturation * (*v - gray);
            }
        }
    }
    let mean = out.data().chunks(ch).map(luma).sum::<f64>() / (h * w) as f64;
    for v in out.data_mut() {
        *v = (mean + contrast * (*v - mean)).clamp(0.0, 1.0);
    }
    out
}

/// Factors drawn from `Uniform(1 - p, 1 + p)`; `p = 0` returns the input untouched.
pub fn color_jitter(img: &ImageTensor, p: f64, rng: &mut SampleRng) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("color parameter {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(img.clone());
    }
    let b = rng.uniform(1.0 - p, 1.0 + p);
    let s = rng.uniform(1.0 - p, 1.0 + p);
    let c = rng.uniform(1.0 - p, 1.0 + p);
    Ok(color_jitter_with(img, b, s, c))
}
