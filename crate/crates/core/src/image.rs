//! H x W x C images with values in [0, 1], bilinear resampling and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(shape_err!("empty image {height}x{width}x{channels}"));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    /// Copies the `h x w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(shape_err!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in top..top + h {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Self::new(h, w, self.channels, data)
    }

    pub fn center_crop(&self, h: usize, w: usize) -> Result<Self> {
        if h > self.height || w > self.width {
            return Err(shape_err!("center crop {h}x{w} exceeds {}x{}", self.height, self.width));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    pub fn mse(&self, other: &Self) -> f64 {
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    /// Samples channel `c` at continuous pixel-center coordinates with
    /// bilinear weights, clamping to the border.
    pub fn sample_bilinear_clamped(&self, fy: f64, fx: f64, c: usize) -> f64 {
        let fy = fy.clamp(0.0, (self.height - 1) as f64);
        let fx = fx.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = self.get(y0, x0, c) * (1.0 - tx) + self.get(y0, x1, c) * tx;
        let bottom = self.get(y1, x0, c) * (1.0 - tx) + self.get(y1, x1, c) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Bilinear resize with the half-pixel-center convention:
    /// destination pixel `d` maps to source coordinate `(d + 0.5) * src/dst - 0.5`.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("cannot resize to {height}x{width}"));
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Self::filled(height, width, self.channels, 0.0);
        for y in 0..height {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..self.channels {
                    out.set(y, x, c, self.sample_bilinear_clamped(fy, fx, c));
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// `[H, W, C]` images stacked into an `[N, C, H, W]` tensor.
    pub fn stack_nchw(images: &[ImageTensor]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| shape_err!("cannot stack an empty image list"))?;
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                return Err(shape_err!("mixed image sizes {:?} vs {:?}", img.dims(), (h, w, c)));
            }
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(img.get(y, x, ci));
                    }
                }
            }
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    /// Splits an `[N, C, H, W]` tensor back into images.
    pub fn unstack_nchw(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let &[n, c, h, w] = t.dims() else {
            return Err(shape_err!("expected [N, C, H, W], got {:?}", t.dims()));
        };
        let plane = h * w;
        Ok((0..n)
            .map(|ni| {
                ImageTensor::from_fn(h, w, c, |y, x, ci| t.data()[(ni * c + ci) * plane + y * w + x])
            })
            .collect())
    }

    /// Decodes a PNG into `[0, 1]` values. Palette and low-bit images are
    /// expanded, 16-bit samples are kept at full precision and alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Ingestion {
            path: path.to_path_buf(),
            reason,
        };
        let file = File::open(path).map_err(|e| fail(e.to_string()))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| fail("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let samples = info.color_type.samples();
        let (bytes, scale) = match info.bit_depth {
            png::BitDepth::Sixteen => (2, 65535.0),
            png::BitDepth::Eight => (1, 255.0),
            other => return Err(fail(format!("unexpected bit depth {other:?} after expansion"))),
        };
        let color = match samples {
            1 | 2 => 1,
            3 | 4 => 3,
            s => return Err(fail(format!("unsupported sample count {s}"))),
        };
        let read = |i: usize| -> f64 {
            if bytes == 2 {
                f64::from(u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]])) / scale
            } else {
                f64::from(buf[i]) / scale
            }
        };
        let img = ImageTensor::from_fn(h, w, color, |y, x, c| read((y * w + x) * samples + c));
        Ok(img)
    }

    /// Writes 8-bit PNG with round-half-up quantization, optionally attaching
    /// `tEXt` metadata.
    pub fn save_png(&self, path: &Path, text: &[(&str, &str)]) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(shape_err!("cannot write {c}-channel image as PNG")),
        };
        let file = File::create(path)?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            encoder
                .add_text_chunk((*k).to_string(), (*v).to_string())
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut writer = encoder.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&self.to_u8())
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }
}

/// `[0, 1] -> {0..255}` with halves rounded up.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}
