use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Grayscale image with f32 pixels, row-major. Values are nominally in
/// [0, 1] after preprocessing; intermediate augmentation results are
/// clamped back into range.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(
                "GrayImage::new",
                format!("{}x{} needs {} pixels, got {}", width, height, width * height, data.len()),
            ));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        GrayImage { width, height, data: vec![0.0; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear resize using pixel-center alignment.
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> GrayImage {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let mut out = GrayImage::zeros(out_w, out_h);
        let sx = self.width as f32 / out_w as f32;
        let sy = self.height as f32 / out_h as f32;
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let top = self.at(x0, y0) * (1.0 - wx) + self.at(x1, y0) * wx;
                let bot = self.at(x0, y1) * (1.0 - wx) + self.at(x1, y1) * wx;
                out.set(ox, oy, top * (1.0 - wy) + bot * wy);
            }
        }
        out
    }

    /// Nearest-neighbor upsample, used for attention-map export.
    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> GrayImage {
        let mut out = GrayImage::zeros(out_w, out_h);
        for oy in 0..out_h {
            let sy = (oy * self.height) / out_h;
            for ox in 0..out_w {
                let sx = (ox * self.width) / out_w;
                out.set(ox, oy, self.at(sx, sy));
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<GrayImage> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(
                "crop",
                format!(
                    "crop {x0},{y0} {w}x{h} exceeds image {}x{}",
                    self.width, self.height
                ),
            ));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        GrayImage::new(w, h, data)
    }

    pub fn hflip(&self) -> GrayImage {
        let mut out = self.clone();
        for y in 0..self.height {
            let row = &mut out.data[y * self.width..(y + 1) * self.width];
            row.reverse();
        }
        out
    }

    /// out = clamp(contrast * (p - mean) + mean + brightness).
    pub fn jitter(&self, brightness: f32, contrast: f32) -> GrayImage {
        let mean = self.data.iter().sum::<f32>() / self.data.len().max(1) as f32;
        let data = self
            .data
            .iter()
            .map(|&p| (contrast * (p - mean) + mean + brightness).clamp(0.0, 1.0))
            .collect();
        GrayImage { width: self.width, height: self.height, data }
    }

    /// Separable Gaussian blur; radius derived from sigma (3 sigma cutoff).
    pub fn gaussian_blur(&self, sigma: f32) -> GrayImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        let mut sum = 0.0f32;
        for i in -radius..=radius {
            let v = (-(i as f32 * i as f32) / (2.0 * sigma * sigma)).exp();
            kernel.push(v);
            sum += v;
        }
        for v in &mut kernel {
            *v /= sum;
        }
        let w = self.width as i64;
        let h = self.height as i64;
        let mut tmp = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x + ki as i64 - radius).clamp(0, w - 1);
                    acc += kv * self.data[(y * w + sx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y + ki as i64 - radius).clamp(0, h - 1);
                    acc += kv * tmp[(sy * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        GrayImage { width: self.width, height: self.height, data: out }
    }

    /// Random area-scaled square crop resized to `out_size`. The crop side
    /// is sqrt(area_fraction) of the short side; position uniform in bounds.
    pub fn random_resized_crop(
        &self,
        scale_range: (f32, f32),
        out_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<GrayImage> {
        let (lo, hi) = scale_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(
                "random_resized_crop",
                format!("scale range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"),
            ));
        }
        let area = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let short = self.width.min(self.height);
        let side = ((short as f32) * area.sqrt()).round().max(1.0) as usize;
        let side = side.min(short);
        let x0 = if self.width > side { rng.gen_range(0..=self.width - side) } else { 0 };
        let y0 = if self.height > side { rng.gen_range(0..=self.height - side) } else { 0 };
        Ok(self.crop(x0, y0, side, side)?.resize_bilinear(out_size, out_size))
    }

    /// Min-max normalize to 8-bit gray levels.
    pub fn to_u8_minmax(&self) -> Vec<u8> {
        let mn = self.data.iter().cloned().fold(f32::INFINITY, f32::min);
        let mx = self.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = (mx - mn).max(1e-12);
        self.data
            .iter()
            .map(|&p| (((p - mn) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_preserves_constant_images() {
        let img = GrayImage::new(8, 8, vec![0.37; 64]).unwrap();
        let out = img.resize_bilinear(5, 5);
        for &v in &out.data {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_out_of_bounds_errors() {
        let img = GrayImage::zeros(4, 4);
        assert!(img.crop(2, 2, 3, 1).is_err());
        assert!(img.crop(0, 0, 4, 4).is_ok());
    }

    #[test]
    fn hflip_involution() {
        let img = GrayImage::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(img.hflip().hflip(), img);
    }

    #[test]
    fn blur_preserves_mass_of_constant() {
        let img = GrayImage::new(6, 6, vec![0.5; 36]).unwrap();
        let out = img.gaussian_blur(1.0);
        for &v in &out.data {
            assert!((v - 0.5).abs() < 1e-5);
        }
    }
}
