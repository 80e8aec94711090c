use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::affine::AffineTransform;
use crate::error::{Error, Result};

/// Row-major grayscale raster of reals used during registration.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl WorkImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("work image must be non-empty".into()));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} image", data.len())));
        }
        Ok(WorkImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        WorkImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Luminance of any decodable image, on a 0..255 scale.
    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match img {
            DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| v as f64).collect(),
            other => other
                .to_rgb8()
                .pixels()
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect(),
        };
        WorkImage::new(w, h, data)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample, `None` outside the pixel-center hull.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// Central-difference gradients (one-sided at the border).
    pub(crate) fn gradients(&self) -> (WorkImage, WorkImage) {
        let (w, h) = (self.width, self.height);
        let mut gx = vec![0.0; w * h];
        let mut gy = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                if xr > xl {
                    gx[y * w + x] = (self.get(xr, y) - self.get(xl, y)) / (xr - xl) as f64;
                }
                if yd > yu {
                    gy[y * w + x] = (self.get(x, yd) - self.get(x, yu)) / (yd - yu) as f64;
                }
            }
        }
        (WorkImage { width: w, height: h, data: gx }, WorkImage { width: w, height: h, data: gy })
    }

    /// Resamples onto a `width × height` grid in the frame `transform` maps
    /// into; pixels with no source fall back to `fill`.
    pub fn warp(&self, transform: &AffineTransform, width: usize, height: usize, fill: f64) -> Result<WorkImage> {
        let inv = transform.inverse()?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                data.push(self.sample(sx, sy).unwrap_or(fill));
            }
        }
        WorkImage::new(width, height, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Longest side allowed after downsampling.
    pub max_side: u32,
    /// Gaussian smoothing sigma in working pixels; 0 disables it.
    pub sigma: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { max_side: 512, sigma: 1.0 }
    }
}

/// A preprocessed image with the factor it was downsampled by.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub image: WorkImage,
    pub ratio: f64,
    /// Exact per-axis factor from working to original pixels.
    pub scale: (f64, f64),
}

impl PreprocessConfig {
    pub fn ratio_for(&self, width: u32, height: u32) -> f64 {
        (width.max(height) as f64 / self.max_side.max(1) as f64).max(1.0)
    }
}

pub fn preprocess(img: &DynamicImage, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::InvalidArgument("cannot preprocess an empty image".into()));
    }
    if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be finite and >= 0, got {}", cfg.sigma)));
    }
    let gray = WorkImage::from_dynamic(img)?;
    let ratio = cfg.ratio_for(img.width(), img.height());
    let w = ((gray.width as f64 / ratio).round() as usize).clamp(1, cfg.max_side.max(1) as usize);
    let h = ((gray.height as f64 / ratio).round() as usize).clamp(1, cfg.max_side.max(1) as usize);
    let small = area_resize(&gray, w, h);
    Ok(Preprocessed {
        image: gaussian_smooth(&small, cfg.sigma),
        ratio,
        scale: (gray.width as f64 / w as f64, gray.height as f64 / h as f64),
    })
}

/// Normalized, centered kernel truncated at 3 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_smooth(img: &WorkImage, sigma: f64) -> WorkImage {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return img.clone();
    }
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img.get((x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize, y))
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[(y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize * w + x])
                .sum();
        }
    }
    WorkImage { width: w, height: h, data: out }
}

// For each output index, the source indices and their area weights.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let step = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * step, (i + 1) as f64 * step);
            let mut taps = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < src {
                let cover = (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((j, cover / step));
                }
                j += 1;
            }
            taps
        })
        .collect()
}

/// Box-filter resize that averages each output pixel's footprint.
pub fn area_resize(img: &WorkImage, width: usize, height: usize) -> WorkImage {
    if width == img.width && height == img.height {
        return img.clone();
    }
    let wx = area_weights(img.width, width);
    let wy = area_weights(img.height, height);
    let mut rows = vec![0.0; width * img.height];
    for y in 0..img.height {
        for (x, taps) in wx.iter().enumerate() {
            rows[y * width + x] = taps.iter().map(|&(j, c)| c * img.get(j, y)).sum();
        }
    }
    let mut out = vec![0.0; width * height];
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..width {
            out[y * width + x] = taps.iter().map(|&(j, c)| c * rows[j * width + x]).sum();
        }
    }
    WorkImage { width, height, data: out }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use image::{GrayImage, Luma};

    use super::*;

    #[test]
    fn area_resize_preserves_the_mean() {
        let data: Vec<f64> = (0..35).map(|i| (i * 7 % 11) as f64).collect();
        let img = WorkImage::new(7, 5, data.clone()).unwrap();
        let small = area_resize(&img, 3, 2);
        let m0 = data.iter().sum::<f64>() / 35.0;
        let m1 = small.data.iter().sum::<f64>() / 6.0;
        assert_abs_diff_eq!(m0, m1, epsilon = 1e-9);
    }

    #[test]
    fn ratio_caps_the_longest_side() {
        let cfg = PreprocessConfig::default();
        let img = DynamicImage::ImageLuma8(GrayImage::from_pixel(1300, 700, Luma([9])));
        let p = preprocess(&img, &cfg).unwrap();
        assert!(p.image.width <= 512 && p.image.height <= 512);
        assert_abs_diff_eq!(p.ratio, 1300.0 / 512.0, epsilon = 1e-12);
    }
}
