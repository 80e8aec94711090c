//! Synthetic ISH-like scenes: dark, roughly round somata on a light,
//! textured background, with exact ground-truth boxes.

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::BoundingBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub width: u32,
    pub height: u32,
    /// Inclusive range of planted blobs per image, drawn uniformly.
    pub blob_count: (usize, usize),
    /// Blob radius range in pixels.
    pub radius: (f64, f64),
    /// Largest relative difference between the two blob semi-axes.
    pub elongation: f64,
    /// Darkening at the blob core, in gray levels.
    pub contrast: (f64, f64),
    /// Mean background gray level range.
    pub background: (f64, f64),
    /// Amplitude of the smooth background variation.
    pub texture: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    /// Minimum center distance as a fraction of the two radii's sum. Values
    /// below 1 let blobs touch and overlap.
    pub min_separation: f64,
    /// Inclusive range of faint diffuse stains that are not neurons.
    pub distractors: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            width: 100,
            height: 100,
            blob_count: (15, 25),
            radius: (3.0, 6.0),
            elongation: 0.2,
            contrast: (35.0, 140.0),
            background: (200.0, 230.0),
            texture: 15.0,
            noise: 5.0,
            min_separation: 0.6,
            distractors: (0, 5),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: GrayImage,
    /// One box per planted blob, exactly bounding its pixels.
    pub boxes: Vec<BoundingBox>,
    /// Subpixel blob centers, matching `boxes` by index.
    pub centers: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    contrast: f64,
}

impl Blob {
    /// Squared normalized distance of pixel `(x, y)`'s center.
    fn dist2(&self, x: u32, y: u32) -> f64 {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy
    }

    fn pixel_bounds(&self, w: u32, h: u32) -> (u32, u32, u32, u32) {
        let x0 = (self.cx - self.rx - 1.0).floor().max(0.0) as u32;
        let y0 = (self.cy - self.ry - 1.0).floor().max(0.0) as u32;
        let x1 = ((self.cx + self.rx + 1.0).ceil() as u32).min(w);
        let y1 = ((self.cy + self.ry + 1.0).ceil() as u32).min(h);
        (x0, y0, x1, y1)
    }

    /// Tight integer box around the blob's pixels.
    fn bounding_box(&self, w: u32, h: u32) -> Option<BoundingBox> {
        let (x0, y0, x1, y1) = self.pixel_bounds(w, h);
        let mut lo = (u32::MAX, u32::MAX);
        let mut hi = (0, 0);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.dist2(x, y) <= 1.0 {
                    lo = (lo.0.min(x), lo.1.min(y));
                    hi = (hi.0.max(x), hi.1.max(y));
                }
            }
        }
        if lo.0 == u32::MAX {
            return None;
        }
        BoundingBox::tile(lo.0 as f64, lo.1 as f64, (hi.0 - lo.0 + 1) as f64, (hi.1 - lo.1 + 1) as f64).ok()
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic scene: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("extent must be positive");
        }
        if self.blob_count.0 > self.blob_count.1 || self.distractors.0 > self.distractors.1 {
            return bad("count ranges must be ordered");
        }
        if !(self.radius.0 >= 1.0 && self.radius.0 <= self.radius.1) {
            return bad("radius range must be ordered and at least 1 px");
        }
        if !(0.0..1.0).contains(&self.elongation) || self.contrast.0 > self.contrast.1 || self.background.0 > self.background.1 {
            return bad("intensity ranges must be ordered");
        }
        if self.noise < 0.0 || self.texture < 0.0 || self.min_separation < 0.0 {
            return bad("noise, texture and separation must be non-negative");
        }
        // Packing feasibility: the blobs' exclusion disks must fit with room
        // to spare.
        let r = self.radius.0 * self.min_separation;
        let needed = self.blob_count.1 as f64 * std::f64::consts::PI * r * r;
        if needed > 0.5 * self.width as f64 * self.height as f64 {
            return Err(Error::InvalidArgument(format!(
                "infeasible packing: {} blobs of radius {} in {}x{}",
                self.blob_count.1, self.radius.0, self.width, self.height
            )));
        }
        Ok(())
    }
}

fn smooth_texture(rng: &mut ChaCha8Rng, w: u32, h: u32, amplitude: f64) -> Vec<f64> {
    const CELL: f64 = 16.0;
    let gw = (w as f64 / CELL).ceil() as usize + 2;
    let gh = (h as f64 / CELL).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0) * amplitude).collect();
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        let fy = y as f64 / CELL;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / CELL;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
            let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Renders one scene from `rng`.
pub fn generate_scene(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Result<SyntheticScene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let count = rng.gen_range(spec.blob_count.0..=spec.blob_count.1);
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    let mut attempts = 0;
    while blobs.len() < count {
        attempts += 1;
        if attempts > 200 * (count + 1) {
            return Err(Error::InvalidArgument(format!("infeasible packing: placed {} of {count} blobs", blobs.len())));
        }
        let r = rng.gen_range(spec.radius.0..=spec.radius.1);
        let e = if spec.elongation > 0.0 {
            rng.gen_range(-spec.elongation..=spec.elongation)
        } else {
            0.0
        };
        let (rx, ry) = (r * (1.0 + e / 2.0), r * (1.0 - e / 2.0));
        // At least half of every blob lies inside the image.
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let contrast = rng.gen_range(spec.contrast.0..=spec.contrast.1);
        let b = Blob { cx, cy, rx, ry, contrast };
        if cx < rx / 2.0 || cy < ry / 2.0 || cx > w as f64 - rx / 2.0 || cy > h as f64 - ry / 2.0 {
            continue;
        }
        let clear = blobs.iter().all(|o| {
            let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
            d >= spec.min_separation * (o.rx.max(o.ry) + rx.max(ry))
        });
        if clear {
            blobs.push(b);
        }
    }

    let base = rng.gen_range(spec.background.0..=spec.background.1);
    let mut field = smooth_texture(rng, w, h, spec.texture);
    for v in &mut field {
        *v += base;
    }
    let n_distract = rng.gen_range(spec.distractors.0..=spec.distractors.1);
    for _ in 0..n_distract {
        let (dx, dy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let sigma = rng.gen_range(6.0..12.0);
        let amp = rng.gen_range(15.0..35.0);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 + 0.5 - dx).powi(2) + (y as f64 + 0.5 - dy).powi(2);
                field[(y * w + x) as usize] -= amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let mut darkness = vec![0.0f64; (w * h) as usize];
    for b in &blobs {
        let (x0, y0, x1, y1) = b.pixel_bounds(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                let d2 = b.dist2(x, y);
                if d2 <= 1.0 {
                    let v = b.contrast * (1.0 - 0.4 * d2);
                    let slot = &mut darkness[(y * w + x) as usize];
                    *slot = slot.max(v);
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut image = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            let v = (field[i] - darkness[i] + n).round().clamp(0.0, 255.0);
            image.put_pixel(x, y, Luma([v as u8]));
        }
    }
    let mut boxes = Vec::with_capacity(blobs.len());
    let mut centers = Vec::with_capacity(blobs.len());
    for b in &blobs {
        if let Some(bb) = b.bounding_box(w, h) {
            boxes.push(bb);
            centers.push((b.cx, b.cy));
        }
    }
    Ok(SyntheticScene { image, boxes, centers })
}

/// `count` scenes; scene `i` is drawn from its own stream of the spec seed,
/// so corpora of different sizes share their prefix.
pub fn generate_corpus(spec: &SyntheticSceneSpec, count: usize) -> Result<Vec<SyntheticScene>> {
    if count == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    spec.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            generate_scene(spec, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_blobs_gives_empty_truth() {
        let spec = SyntheticSceneSpec {
            blob_count: (0, 0),
            ..Default::default()
        };
        let c = generate_corpus(&spec, 1).unwrap();
        assert!(c[0].boxes.is_empty());
    }

    #[test]
    fn corpus_is_deterministic() {
        let spec = SyntheticSceneSpec::default();
        let a = generate_corpus(&spec, 3).unwrap();
        let b = generate_corpus(&spec, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_count_near_twenty() {
        let spec = SyntheticSceneSpec::default();
        let c = generate_corpus(&spec, 100).unwrap();
        let mean = c.iter().map(|s| s.boxes.len()).sum::<usize>() as f64 / 100.0;
        assert!((mean - 20.0).abs() <= 1.0, "mean {mean}");
    }

    #[test]
    fn boxes_contain_centers() {
        let c = generate_corpus(&SyntheticSceneSpec::default(), 20).unwrap();
        for s in &c {
            for (b, &(cx, cy)) in s.boxes.iter().zip(&s.centers) {
                assert!(cx >= b.x && cx <= b.x2() && cy >= b.y && cy <= b.y2());
            }
        }
    }

    #[test]
    fn overpacked_spec_is_rejected() {
        let spec = SyntheticSceneSpec {
            width: 20,
            height: 20,
            blob_count: (40, 40),
            ..Default::default()
        };
        assert!(generate_corpus(&spec, 1).is_err());
    }
}
