//! Planar float rasters with PNG I/O and a few pixel-level utilities.
//!
//! Images are stored channel-major (CHW) with values expected in `[0, 1]`.
//! All synthesis and model code operates on this type; PNG files are the
//! only on-disk representation and quantize to 8 bits per channel.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png decode/encode error: {0}")]
    Png(String),
    #[error("crop window ({x},{y}) size {size} exceeds raster {w}x{h}")]
    OutOfBounds {
        x: usize,
        y: usize,
        size: usize,
        w: usize,
        h: usize,
    },
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
}

/// Channel-major float image. `data[c * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Image::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.data[c * height * width + y * width + x] = f(c, x, y);
                }
            }
        }
        img
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    /// Bilinear sample with zero fill outside the raster.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as i64;
        let y0 = y0 as i64;
        let mut acc = 0.0;
        for (dx, dy, w) in [
            (0i64, 0i64, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            let xi = x0 + dx;
            let yi = y0 + dy;
            if xi >= 0 && yi >= 0 && (xi as usize) < self.width && (yi as usize) < self.height {
                acc += w * self.get(c, xi as usize, yi as usize);
            }
        }
        acc
    }

    pub fn crop(&self, x: usize, y: usize, size: usize) -> Result<Image, RasterError> {
        if x + size > self.width || y + size > self.height {
            return Err(RasterError::OutOfBounds {
                x,
                y,
                size,
                w: self.width,
                h: self.height,
            });
        }
        let mut out = Image::zeros(self.channels, size, size);
        for c in 0..self.channels {
            for row in 0..size {
                let src = c * self.height * self.width + (y + row) * self.width + x;
                let dst = c * size * size + row * size;
                out.data[dst..dst + size].copy_from_slice(&self.data[src..src + size]);
            }
        }
        Ok(out)
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Image::from_fn(self.channels, height, width, |c, x, y| {
            let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, self.width as f64 - 1.0);
            let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, self.height as f64 - 1.0);
            self.sample_bilinear(c, u, v)
        })
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// ITU-R 601 luma; grayscale images return the first channel.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            let mut out = self.clone();
            out.channels = 1;
            return out;
        }
        Image::from_fn(1, self.height, self.width, |_, x, y| {
            0.299 * self.get(0, x, y) + 0.587 * self.get(1, x, y) + 0.114 * self.get(2, x, y)
        })
    }

    /// Sobel gradient magnitude of the luma channel.
    pub fn sobel_magnitude(&self) -> Image {
        let lum = self.luminance();
        let h = self.height as i64;
        let w = self.width as i64;
        let at = |x: i64, y: i64| -> f64 {
            let xc = x.clamp(0, w - 1) as usize;
            let yc = y.clamp(0, h - 1) as usize;
            lum.get(0, xc, yc)
        };
        Image::from_fn(1, self.height, self.width, |_, xu, yu| {
            let x = xu as i64;
            let y = yu as i64;
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            (gx * gx + gy * gy).sqrt()
        })
    }

    /// Separable Gaussian blur with reflected borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut sum = 0.0;
        for i in -radius..=radius {
            let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
            kernel.push(v);
            sum += v;
        }
        for v in &mut kernel {
            *v /= sum;
        }
        let reflect = |i: i64, n: i64| -> usize {
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * n - 2 - i;
            }
            i.clamp(0, n - 1) as usize
        };
        let mut tmp = Image::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let xi = reflect(x as i64 + ki as i64 - radius, self.width as i64);
                        acc += kv * self.get(c, xi, y);
                    }
                    tmp.set(c, x, y, acc);
                }
            }
        }
        let mut out = Image::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let yi = reflect(y as i64 + ki as i64 - radius, self.height as i64);
                        acc += kv * tmp.get(c, x, yi);
                    }
                    out.set(c, x, y, acc);
                }
            }
        }
        out
    }

    /// Draw a straight segment of the given width (in pixels) and color.
    pub fn draw_line(&mut self, from: (f64, f64), to: (f64, f64), color: &[f64], width: f64) {
        let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1) * 2;
        let r = (width / 2.0).max(0.5);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let px = from.0 + t * (to.0 - from.0);
            let py = from.1 + t * (to.1 - from.1);
            let x0 = (px - r).floor().max(0.0) as usize;
            let x1 = ((px + r).ceil() as usize).min(self.width.saturating_sub(1));
            let y0 = (py - r).floor().max(0.0) as usize;
            let y1 = ((py + r).ceil() as usize).min(self.height.saturating_sub(1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                    if d2 <= r * r {
                        for (c, col) in color.iter().enumerate().take(self.channels) {
                            self.set(c, x, y, *col);
                        }
                    }
                }
            }
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = vec![0u8; n * 3];
        for i in 0..n {
            for c in 0..3 {
                let v = if self.channels == 1 {
                    self.data[i]
                } else {
                    self.data[c * n + i]
                };
                out[i * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Image {
        let n = height * width;
        let mut img = Image::zeros(3, height, width);
        for i in 0..n {
            for c in 0..3 {
                img.data[c * n + i] = bytes[i * 3 + c] as f64 / 255.0;
            }
        }
        img
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let buf = self.to_rgb8();
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, buf)
                .expect("buffer size matches dimensions");
        let mut bytes = std::io::Cursor::new(Vec::new());
        img.write_to(&mut bytes, image::ImageFormat::Png)
            .map_err(|e| RasterError::Png(e.to_string()))?;
        Ok(bytes.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image, RasterError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| RasterError::Png(e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Image::from_rgb8(h, w, img.as_raw()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::write(path, self.encode_png()?).map_err(|e| RasterError::Png(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Image, RasterError> {
        let bytes = std::fs::read(path).map_err(|e| RasterError::Png(e.to_string()))?;
        Image::decode_png(&bytes)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_matches_definition() {
        let img = Image::from_fn(3, 128, 128, |c, x, y| {
            (c as f64 + 1.0) * (y as f64 * 128.0 + x as f64) / 60000.0
        });
        let patch = img.crop(10, 20, 64).unwrap();
        assert_eq!(patch.get(0, 0, 0), img.get(0, 10, 20));
        assert_eq!(patch.get(2, 63, 63), img.get(2, 73, 83));
    }

    #[test]
    fn crop_out_of_bounds_rejected() {
        let img = Image::zeros(3, 32, 32);
        assert!(matches!(
            img.crop(1, 0, 32),
            Err(RasterError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Image::from_fn(3, 17, 23, |c, x, y| {
            ((c * 71 + x * 13 + y * 29) % 256) as f64 / 255.0
        });
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn bilinear_sample_zero_outside() {
        let img = Image::constant(3, 8, 8, 1.0);
        assert_eq!(img.sample_bilinear(0, -2.0, 3.0), 0.0);
        assert!((img.sample_bilinear(0, 3.5, 3.5) - 1.0).abs() < 1e-12);
        // half inside at the border
        assert!((img.sample_bilinear(0, -0.5, 3.0) - 0.5).abs() < 1e-12);
    }
}
