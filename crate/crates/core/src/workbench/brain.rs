//! Synthetic brains: a color-coded region atlas, its paired Nissl-like
//! reference image, and expression sections rendered from them with planted
//! neurons at chosen per-region densities.

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantify::{AtlasConfig, Region, RegionAtlas, RegionTable};
use crate::registration::AffineTransform;

const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [170, 255, 195],
    [0, 0, 128],
];

// Share of the reference image's contrast that shows in expression sections.
const TONE_GAIN: f64 = 0.3;

fn tissue_texture(x: f64, y: f64) -> f64 {
    8.0 * ((x / 9.0).sin() * (y / 11.0).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticBrainSpec {
    pub width: u32,
    pub height: u32,
    /// Number of leaf regions, at most 16.
    pub regions: usize,
    pub seed: u64,
}

impl Default for SyntheticBrainSpec {
    fn default() -> Self {
        SyntheticBrainSpec {
            width: 320,
            height: 240,
            regions: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBrain {
    pub atlas: RegionAtlas,
    /// Reference image in the atlas frame.
    pub nissl: GrayImage,
    /// Region index + 1 per pixel, 0 outside the brain.
    labels: Vec<u8>,
    /// Reference gray level of each region.
    tones: Vec<f64>,
}

pub fn region_table(n: usize) -> Result<RegionTable> {
    if n == 0 || n > PALETTE.len() {
        return Err(Error::InvalidArgument(format!("region count must be in 1..={}", PALETTE.len())));
    }
    RegionTable::new(
        (0..n)
            .map(|i| Region {
                id: i as u32 + 1,
                name: format!("Region {}", i + 1),
                acronym: format!("R{}", i + 1),
                r: PALETTE[i][0],
                g: PALETTE[i][1],
                b: PALETTE[i][2],
                parent: None,
            })
            .collect(),
    )
}

pub fn generate_brain(spec: &SyntheticBrainSpec) -> Result<SyntheticBrain> {
    if spec.width < 16 || spec.height < 16 {
        return Err(Error::InvalidArgument("synthetic brain needs at least 16x16 pixels".into()));
    }
    let table = region_table(spec.regions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (ax, ay) = (0.42 * w, 0.40 * h);
    let lobes: Vec<(f64, f64, f64)> = (2..5).map(|k| (k as f64, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.02..0.06))).collect();
    let inside = |x: f64, y: f64| {
        let (dx, dy) = ((x - cx) / ax, (y - cy) / ay);
        let t = dy.atan2(dx);
        let r = 1.0 + lobes.iter().map(|(k, ph, a)| a * (k * t + ph).sin()).sum::<f64>();
        dx.hypot(dy) <= r
    };

    let mut seeds: Vec<(f64, f64)> = Vec::new();
    let min_sep = 0.5 * (ax * ay * std::f64::consts::PI / spec.regions as f64).sqrt();
    let mut tries = 0;
    while seeds.len() < spec.regions {
        tries += 1;
        let p = (rng.gen_range(cx - ax..cx + ax), rng.gen_range(cy - ay..cy + ay));
        let sep = if tries > 5000 { 0.0 } else { min_sep };
        if inside(p.0, p.1) && seeds.iter().all(|s| (s.0 - p.0).hypot(s.1 - p.1) >= sep) {
            seeds.push(p);
        }
    }
    let tones: Vec<f64> = (0..spec.regions).map(|i| 90.0 + 110.0 * ((i as f64 * 0.618_034).fract())).collect();

    let mut labels = vec![0u8; (spec.width * spec.height) as usize];
    let mut rgb = RgbImage::from_pixel(spec.width, spec.height, Rgb([0, 0, 0]));
    let mut nissl = GrayImage::new(spec.width, spec.height);
    let noise = Normal::new(0.0, 4.0).expect("valid normal");
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 255.0;
            if inside(px, py) {
                let k = seeds
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 .0 - px).hypot(a.1 .1 - py).total_cmp(&(b.1 .0 - px).hypot(b.1 .1 - py)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                labels[(y * spec.width + x) as usize] = k as u8 + 1;
                rgb.put_pixel(x, y, Rgb(PALETTE[k]));
                v = tones[k] + tissue_texture(px, py) + noise.sample(&mut rng);
            }
            nissl.put_pixel(x, y, Luma([v.round().clamp(0.0, 255.0) as u8]));
        }
    }
    let atlas = RegionAtlas::new(rgb, table, &AtlasConfig::default())?;
    Ok(SyntheticBrain { atlas, nissl, labels, tones })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SectionRenderSpec {
    pub blob_radius: (f64, f64),
    pub contrast: (f64, f64),
    pub noise: f64,
}

impl Default for SectionRenderSpec {
    fn default() -> Self {
        SectionRenderSpec {
            blob_radius: (3.0, 5.0),
            contrast: (60.0, 130.0),
            noise: 4.0,
        }
    }
}

/// An expression section with its planted neuron centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSection {
    pub image: GrayImage,
    pub centers: Vec<(f64, f64)>,
}

impl SyntheticBrain {
    pub fn dimensions(&self) -> (u32, u32) {
        self.nissl.dimensions()
    }

    /// 1-based region index at an atlas pixel, 0 outside the brain.
    pub fn label_at(&self, x: u32, y: u32) -> u8 {
        self.labels[(y * self.nissl.width() + x) as usize]
    }

    /// Renders the brain seen through `placement` (atlas frame to section
    /// frame) with neurons planted at `densities[i]` per pixel of region
    /// `i + 1`.
    pub fn render_section(&self, placement: &AffineTransform, densities: &[f64], spec: &SectionRenderSpec, rng: &mut ChaCha8Rng) -> Result<RenderedSection> {
        if densities.len() != self.tones.len() {
            return Err(Error::Shape(format!("{} densities for {} regions", densities.len(), self.tones.len())));
        }
        if densities.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::InvalidArgument("densities must lie in [0, 1]".into()));
        }
        let (w, h) = self.dimensions();
        let inv = placement.inverse()?;
        let mut region = vec![0u8; (w * h) as usize];
        // Tissue texture carried over from the reference frame.
        let mut texture = vec![0.0f64; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                let (rx, ry) = (sx.round(), sy.round());
                if rx >= 0.0 && ry >= 0.0 && rx < w as f64 && ry < h as f64 {
                    region[(y * w + x) as usize] = self.label_at(rx as u32, ry as u32);
                    texture[(y * w + x) as usize] = tissue_texture(sx + 0.5, sy + 0.5);
                }
            }
        }
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); self.tones.len()];
        for (i, &r) in region.iter().enumerate() {
            if r > 0 {
                members[r as usize - 1].push(i as u32);
            }
        }
        let mut centers = Vec::new();
        for (k, pix) in members.iter().enumerate() {
            let n = (densities[k] * pix.len() as f64).round() as usize;
            for _ in 0..n {
                let i = pix[rng.gen_range(0..pix.len())];
                centers.push(((i % w) as f64 + rng.gen_range(0.0..1.0), (i / w) as f64 + rng.gen_range(0.0..1.0)));
            }
        }
        let mut darkness = vec![0.0f64; (w * h) as usize];
        for &(cx, cy) in &centers {
            let r = rng.gen_range(spec.blob_radius.0..=spec.blob_radius.1);
            let c = rng.gen_range(spec.contrast.0..=spec.contrast.1);
            let (x0, x1) = ((cx - r).floor().max(0.0) as u32, ((cx + r).ceil() as u32).min(w));
            let (y0, y1) = ((cy - r).floor().max(0.0) as u32, ((cy + r).ceil() as u32).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    let d2 = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)) / (r * r);
                    if d2 <= 1.0 {
                        let slot = &mut darkness[(y * w + x) as usize];
                        *slot = slot.max(c * (1.0 - 0.4 * d2));
                    }
                }
            }
        }
        let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut image = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                let base = match region[i] {
                    0 => 248.0,
                    r => 200.0 + TONE_GAIN * (self.tones[r as usize - 1] - 145.0 + texture[i]),
                };
                let v = base - darkness[i] + noise.sample(rng);
                image.put_pixel(x, y, Luma([v.round().clamp(0.0, 255.0) as u8]));
            }
        }
        Ok(RenderedSection { image, centers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_region_owns_pixels() {
        let b = generate_brain(&SyntheticBrainSpec::default()).unwrap();
        for r in b.atlas.table().regions() {
            assert!(b.atlas.region_mask(r.id).unwrap().area > 100, "region {}", r.id);
        }
    }

    #[test]
    fn planted_count_tracks_density() {
        let b = generate_brain(&SyntheticBrainSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = b
            .render_section(&AffineTransform::IDENTITY, &[0.001, 0.002, 0.0, 0.003, 0.001, 0.0], &SectionRenderSpec::default(), &mut rng)
            .unwrap();
        let expected: f64 = [0.001, 0.002, 0.0, 0.003, 0.001, 0.0]
            .iter()
            .zip(b.atlas.table().regions())
            .map(|(d, r)| (d * b.atlas.region_mask(r.id).unwrap().area as f64).round())
            .sum();
        assert_eq!(s.centers.len() as f64, expected);
    }
}
