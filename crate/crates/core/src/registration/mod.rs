//! Intensity-based affine registration with recurrent re-registration.

mod affine;
mod image;

use std::io::Write;
use std::path::Path;

use ::image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

pub use self::affine::AffineTransform;
pub use self::image::{area_resize, gaussian_kernel, gaussian_smooth, preprocess, PreprocessConfig, Preprocessed, WorkImage};
use crate::error::{Error, Result};

/// Metric reported for a run whose optimizer diverged.
pub const WORST_METRIC: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub max_iterations: usize,
    /// First step length, in units of half the fixed image's longer side.
    pub initial_step: f64,
    pub min_step: f64,
    /// Smallest fraction of fixed pixels that must overlap the moving image.
    pub min_overlap: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 3,
            max_iterations: 200,
            initial_step: 0.05,
            min_step: 1e-6,
            min_overlap: 0.25,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidArgument("levels and max_iterations must be positive".into()));
        }
        if !(self.initial_step > 0.0 && self.min_step > 0.0 && self.min_step <= self.initial_step) {
            return Err(Error::InvalidArgument("need 0 < min_step <= initial_step".into()));
        }
        if !(0.0..=1.0).contains(&self.min_overlap) {
            return Err(Error::InvalidArgument("min_overlap must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Outcome of one affine registration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    /// Moving to fixed, in working pixels.
    pub transform: AffineTransform,
    /// Negative normalized cross-correlation; lower is better.
    pub metric: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceRecord {
    /// 1-based.
    pub index: usize,
    /// Cumulative moving-to-fixed transform after this recurrence.
    pub transform: AffineTransform,
    pub metric: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub records: Vec<RecurrenceRecord>,
    /// 1-based index of the record with the lowest metric.
    pub selected: usize,
}

impl RegistrationResult {
    pub fn selected_record(&self) -> &RecurrenceRecord {
        &self.records[self.selected - 1]
    }

    pub fn transform(&self) -> AffineTransform {
        self.selected_record().transform
    }

    pub fn metric(&self) -> f64 {
        self.selected_record().metric
    }

    pub fn trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.metric).collect()
    }

    /// True when the trace never rises before the selected recurrence.
    pub fn descends_to_selection(&self) -> bool {
        self.records[..self.selected].windows(2).all(|w| w[1].metric <= w[0].metric)
    }

    /// Tab-separated `index, metric, selected` rows.
    pub fn write_trace_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("index\tmetric\tselected\n");
        for r in &self.records {
            text.push_str(&format!("{}\t{:.9}\t{}\n", r.index, r.metric, u8::from(r.index == self.selected)));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Level {
    // Per fixed pixel: normalized coordinates and intensity.
    fixed: Vec<(f64, f64, f64)>,
    moving: WorkImage,
    grad_x: WorkImage,
    grad_y: WorkImage,
    // Level pixel size in level-0 moving pixels.
    mfx: f64,
    mfy: f64,
}

struct Problem {
    levels: Vec<Level>,
    scale: f64,
    fixed_center: (f64, f64),
    moving_center: (f64, f64),
    min_overlap: f64,
}

fn pyramid(img: &WorkImage, levels: usize) -> Vec<WorkImage> {
    let mut out = vec![img.clone()];
    while out.len() < levels {
        let last = out.last().unwrap();
        if last.width < 32 || last.height < 32 {
            break;
        }
        out.push(area_resize(last, last.width.div_ceil(2), last.height.div_ceil(2)));
    }
    out
}

impl Problem {
    fn new(fixed: &WorkImage, moving: &WorkImage, cfg: &RegistrationConfig) -> Problem {
        let scale = fixed.width.max(fixed.height) as f64 / 2.0;
        let fixed_center = ((fixed.width as f64 - 1.0) / 2.0, (fixed.height as f64 - 1.0) / 2.0);
        let moving_center = ((moving.width as f64 - 1.0) / 2.0, (moving.height as f64 - 1.0) / 2.0);
        let fp = pyramid(fixed, cfg.levels);
        let mp = pyramid(moving, cfg.levels);
        let n = fp.len().min(mp.len());
        let levels = fp
            .into_iter()
            .zip(mp)
            .take(n)
            .map(|(f, m)| {
                let ffx = fixed.width as f64 / f.width as f64;
                let ffy = fixed.height as f64 / f.height as f64;
                let mut pts = Vec::with_capacity(f.width * f.height);
                for y in 0..f.height {
                    for x in 0..f.width {
                        let x0 = (x as f64 + 0.5) * ffx - 0.5;
                        let y0 = (y as f64 + 0.5) * ffy - 0.5;
                        pts.push(((x0 - fixed_center.0) / scale, (y0 - fixed_center.1) / scale, f.get(x, y)));
                    }
                }
                let (grad_x, grad_y) = m.gradients();
                Level {
                    fixed: pts,
                    mfx: moving.width as f64 / m.width as f64,
                    mfy: moving.height as f64 / m.height as f64,
                    moving: m,
                    grad_x,
                    grad_y,
                }
            })
            .collect();
        Problem {
            levels,
            scale,
            fixed_center,
            moving_center,
            min_overlap: cfg.min_overlap,
        }
    }

    /// Metric and its gradient with respect to the six parameters.
    fn evaluate(&self, level: usize, p: &[f64; 6]) -> (f64, [f64; 6]) {
        let lv = &self.levels[level];
        let (s, cm) = (self.scale, self.moving_center);
        let mut samples = Vec::with_capacity(lv.fixed.len());
        for &(u, v, f) in &lv.fixed {
            let um = p[0] * u + p[1] * v + p[2];
            let vm = p[3] * u + p[4] * v + p[5];
            let x = (um * s + cm.0 + 0.5) / lv.mfx - 0.5;
            let y = (vm * s + cm.1 + 0.5) / lv.mfy - 0.5;
            if let Some(m) = lv.moving.sample(x, y) {
                let gu = lv.grad_x.sample(x, y).unwrap_or(0.0) * s / lv.mfx;
                let gv = lv.grad_y.sample(x, y).unwrap_or(0.0) * s / lv.mfy;
                samples.push((u, v, f, m, gu, gv));
            }
        }
        let n = samples.len();
        if n < 2 || (n as f64) < self.min_overlap * lv.fixed.len() as f64 {
            return (0.0, [0.0; 6]);
        }
        let mf = samples.iter().map(|s| s.2).sum::<f64>() / n as f64;
        let mm = samples.iter().map(|s| s.3).sum::<f64>() / n as f64;
        let (mut sfm, mut sff, mut smm) = (0.0, 0.0, 0.0);
        for s in &samples {
            let (a, b) = (s.2 - mf, s.3 - mm);
            sfm += a * b;
            sff += a * a;
            smm += b * b;
        }
        if sff <= 0.0 || smm <= 0.0 {
            return (0.0, [0.0; 6]);
        }
        let norm = (sff * smm).sqrt();
        let ncc = sfm / norm;
        let mut g = [0.0; 6];
        for s in &samples {
            let (a, b) = (s.2 - mf, s.3 - mm);
            // d(-ncc)/dm_i
            let dm = -(a / norm - ncc * b / smm);
            let (gu, gv) = (dm * s.4, dm * s.5);
            g[0] += gu * s.0;
            g[1] += gu * s.1;
            g[2] += gu;
            g[3] += gv * s.0;
            g[4] += gv * s.1;
            g[5] += gv;
        }
        (-ncc, g)
    }

    fn descend(&self, level: usize, mut p: [f64; 6], cfg: &RegistrationConfig, step: f64) -> ([f64; 6], f64) {
        let (mut m, mut g) = self.evaluate(level, &p);
        let mut alpha = step;
        for _ in 0..cfg.max_iterations {
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(gn > 0.0 && gn.is_finite()) {
                break;
            }
            let mut cand = p;
            for (c, gi) in cand.iter_mut().zip(&g) {
                *c -= alpha * gi / gn;
            }
            let (mc, gc) = self.evaluate(level, &cand);
            if mc < m {
                p = cand;
                m = mc;
                g = gc;
                alpha *= 1.5;
            } else {
                alpha *= 0.5;
                if alpha < cfg.min_step {
                    break;
                }
            }
        }
        (p, m)
    }

    fn to_transform(&self, p: &[f64; 6]) -> Result<AffineTransform> {
        let (cf, cm, s) = (self.fixed_center, self.moving_center, self.scale);
        let sampling = AffineTransform {
            a11: p[0],
            a12: p[1],
            tx: -p[0] * cf.0 - p[1] * cf.1 + s * p[2] + cm.0,
            a21: p[3],
            a22: p[4],
            ty: -p[3] * cf.0 - p[4] * cf.1 + s * p[5] + cm.1,
        };
        sampling.inverse()
    }
}

/// Negative normalized cross-correlation between `fixed` and `moving`
/// warped by `transform`, over the overlap.
pub fn similarity(fixed: &WorkImage, moving: &WorkImage, transform: &AffineTransform) -> Result<f64> {
    let warped = moving.warp(transform, fixed.width, fixed.height, f64::NAN)?;
    let pairs: Vec<(f64, f64)> = fixed.data.iter().zip(&warped.data).filter(|(_, m)| m.is_finite()).map(|(&f, &m)| (f, m)).collect();
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return Ok(0.0);
    }
    let mf = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mm = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sfm, mut sff, mut smm) = (0.0, 0.0, 0.0);
    for (f, m) in pairs {
        sfm += (f - mf) * (m - mm);
        sff += (f - mf) * (f - mf);
        smm += (m - mm) * (m - mm);
    }
    if sff <= 0.0 || smm <= 0.0 {
        return Ok(0.0);
    }
    Ok(-sfm / (sff * smm).sqrt())
}

/// Multi-resolution gradient descent on the six affine parameters.
pub fn register_affine(fixed: &WorkImage, moving: &WorkImage, cfg: &RegistrationConfig) -> Result<AffineFit> {
    cfg.validate()?;
    let problem = Problem::new(fixed, moving, cfg);
    let mut p = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let mut metric = f64::NAN;
    let coarsest = problem.levels.len() - 1;
    for level in (0..=coarsest).rev() {
        let step = cfg.initial_step / (1 << (coarsest - level)) as f64;
        (p, metric) = problem.descend(level, p, cfg, step);
    }
    let transform = match problem.to_transform(&p) {
        Ok(t) if metric.is_finite() && t.is_finite() => t,
        _ => {
            log::warn!("affine registration diverged; falling back to identity");
            return Ok(AffineFit {
                transform: AffineTransform::IDENTITY,
                metric: WORST_METRIC,
                diverged: true,
            });
        }
    };
    Ok(AffineFit {
        transform,
        metric,
        diverged: false,
    })
}

fn border_mean(img: &WorkImage) -> f64 {
    let (w, h) = (img.width, img.height);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                sum += img.get(x, y);
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Registers `moving` onto `fixed` `n` times, each time starting from the
/// previous warped result, and selects the recurrence with the lowest metric.
pub fn recurrent_register(fixed: &WorkImage, moving: &WorkImage, n: usize, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("recurrence count must be at least 1".into()));
    }
    let fill = border_mean(moving);
    let mut current = moving.clone();
    let mut cumulative = AffineTransform::IDENTITY;
    let mut records = Vec::with_capacity(n);
    for index in 1..=n {
        let fit = register_affine(fixed, &current, cfg)?;
        if !fit.diverged {
            current = current.warp(&fit.transform, fixed.width, fixed.height, fill)?;
            cumulative = fit.transform.compose(&cumulative);
        }
        records.push(RecurrenceRecord {
            index,
            transform: cumulative,
            metric: fit.metric,
            diverged: fit.diverged,
        });
    }
    let selected = records
        .iter()
        .min_by(|a, b| a.metric.total_cmp(&b.metric).then(a.index.cmp(&b.index)))
        .map(|r| r.index)
        .unwrap_or(1);
    Ok(RegistrationResult { records, selected })
}

/// Nearest-neighbour resampling of a label raster onto a `width × height`
/// grid, so every output pixel is an input code or `background`.
pub fn warp_labels(labels: &RgbImage, transform: &AffineTransform, width: u32, height: u32, background: Rgb<u8>) -> Result<RgbImage> {
    let inv = transform.inverse()?;
    let (w, h) = (labels.width() as f64, labels.height() as f64);
    Ok(RgbImage::from_fn(width, height, |x, y| {
        let (sx, sy) = inv.apply(x as f64, y as f64);
        let (rx, ry) = (sx.round(), sy.round());
        if rx >= 0.0 && ry >= 0.0 && rx < w && ry < h {
            *labels.get_pixel(rx as u32, ry as u32)
        } else {
            background
        }
    }))
}

/// Warps an atlas by a moving-to-fixed transform onto the fixed extent.
pub fn apply_to_atlas(atlas: &crate::quantify::RegionAtlas, transform: &AffineTransform, width: u32, height: u32) -> Result<crate::quantify::RegionAtlas> {
    atlas.warped(transform, width, height)
}
