//! Classical cell detectors for dark somata on a light background.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::detector::{BoundingBox, Detection};

const NEIGHBORS8: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Pixels darker than `level`.
fn foreground(image: &GrayImage, level: u8) -> Vec<bool> {
    image.as_raw().iter().map(|&v| v < level).collect()
}

/// 8-connected component labels (0 = background, 1..=n) and the count.
fn components(mask: &[bool], w: usize, h: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for (dx, dy) in NEIGHBORS8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
    }
    (labels, next)
}

/// One box per label, bounding its pixels, with pixel counts.
fn label_boxes(labels: &[u32], n: u32, w: usize) -> Vec<(BoundingBox, usize)> {
    let mut lo = vec![(usize::MAX, usize::MAX); n as usize];
    let mut hi = vec![(0usize, 0usize); n as usize];
    let mut area = vec![0usize; n as usize];
    for (p, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let i = l as usize - 1;
        let (x, y) = (p % w, p / w);
        lo[i] = (lo[i].0.min(x), lo[i].1.min(y));
        hi[i] = (hi[i].0.max(x), hi[i].1.max(y));
        area[i] += 1;
    }
    (0..n as usize)
        .filter(|&i| area[i] > 0)
        .map(|i| {
            let b = BoundingBox::tile(
                lo[i].0 as f64,
                lo[i].1 as f64,
                (hi[i].0 - lo[i].0 + 1) as f64,
                (hi[i].1 - lo[i].1 + 1) as f64,
            )
            .expect("component boxes have positive extent");
            (b, area[i])
        })
        .collect()
}

/// Pixel counts of the foreground components at `level`.
pub(crate) fn component_areas(image: &GrayImage, level: u8) -> Vec<usize> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let (labels, n) = components(&foreground(image, level), w, h);
    let mut area = vec![0usize; n as usize];
    for &l in &labels {
        if l > 0 {
            area[l as usize - 1] += 1;
        }
    }
    area
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    /// Pixels strictly darker than this are foreground.
    pub level: u8,
    /// Components with fewer pixels are dropped.
    pub min_area: usize,
}

/// Connected components of the thresholded foreground, one detection per
/// component.
pub fn threshold_detect(image: &GrayImage, params: &ThresholdParams) -> Vec<Detection> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mask = foreground(image, params.level);
    let (labels, n) = components(&mask, w, h);
    label_boxes(&labels, n, w)
        .into_iter()
        .filter(|(_, a)| *a >= params.min_area.max(1))
        .map(|(bbox, _)| Detection { bbox, score: 1.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatershedParams {
    pub level: u8,
    /// Distance-transform peaks lower than this are not basin seeds.
    pub min_peak: f64,
    /// Seeds closer than this to a higher seed are merged into it.
    pub min_distance: f64,
}

/// Exact Euclidean distance of every foreground pixel to the nearest
/// background pixel (outside the image counts as background).
fn distance_transform(mask: &[bool], w: usize, h: usize) -> Vec<f64> {
    // Lower envelope of parabolas over finite squared column distances.
    fn envelope(f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        let mut k = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        let meet = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
        for q in 1..n {
            let mut s = meet(q, v[k]);
            while s <= z[k] {
                k -= 1;
                s = meet(q, v[k]);
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - v[k] as f64;
            *o = d * d + f[v[k]];
        }
    }
    // One background pixel of padding on every side keeps all distances
    // finite.
    let (pw, ph) = (w + 2, h + 2);
    let fg = |x: usize, y: usize| x >= 1 && y >= 1 && x <= w && y <= h && mask[(y - 1) * w + x - 1];
    let mut grid = vec![0.0f64; pw * ph];
    for x in 0..pw {
        let mut run = 0usize;
        for y in 0..ph {
            run = if fg(x, y) { run + 1 } else { 0 };
            grid[y * pw + x] = run as f64;
        }
        let mut run = 0usize;
        for y in (0..ph).rev() {
            run = if fg(x, y) { run + 1 } else { 0 };
            let d = grid[y * pw + x].min(run as f64);
            grid[y * pw + x] = d * d;
        }
    }
    let mut row = vec![0.0; pw];
    for y in 0..ph {
        envelope(&grid[y * pw..(y + 1) * pw], &mut row);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&row);
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = grid[(y + 1) * pw + x + 1].sqrt();
        }
    }
    out
}

#[derive(PartialEq)]
struct Queued {
    height: f64,
    order: usize,
    pixel: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.height
            .total_cmp(&other.height)
            .then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Basin seeds: local maxima of the distance map (a plateau yields its first
/// pixel in raster order) at least `min_peak` high, strongest first, thinned
/// so no two lie closer than `min_distance`.
fn watershed_seeds(mask: &[bool], dist: &[f64], w: usize, h: usize, params: &WatershedParams) -> Vec<usize> {
    let mut peaks: Vec<usize> = Vec::new();
    for p in 0..w * h {
        if !mask[p] || dist[p] < params.min_peak {
            continue;
        }
        let (x, y) = ((p % w) as i64, (p / w) as i64);
        let is_peak = NEIGHBORS8.iter().all(|&(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                return true;
            }
            let q = ny as usize * w + nx as usize;
            dist[q] < dist[p] || (dist[q] == dist[p] && q > p)
        });
        if is_peak {
            peaks.push(p);
        }
    }
    peaks.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut seeds: Vec<usize> = Vec::new();
    for p in peaks {
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        let near = seeds.iter().any(|&s| {
            let (sx, sy) = ((s % w) as f64, (s / w) as f64);
            (sx - x).hypot(sy - y) < params.min_distance
        });
        if !near {
            seeds.push(p);
        }
    }
    seeds
}

/// Number of basins [`watershed_detect`] would return.
pub(crate) fn watershed_count(image: &GrayImage, params: &WatershedParams) -> usize {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mask = foreground(image, params.level);
    let dist = distance_transform(&mask, w, h);
    watershed_seeds(&mask, &dist, w, h, params).len()
}

/// Marker-based watershed on the inverted distance transform of the
/// thresholded foreground, one detection per basin.
pub fn watershed_detect(image: &GrayImage, params: &WatershedParams) -> Vec<Detection> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mask = foreground(image, params.level);
    let dist = distance_transform(&mask, w, h);
    let seeds = watershed_seeds(&mask, &dist, w, h, params);

    // Flood from the seeds in order of decreasing distance.
    let mut labels = vec![0u32; w * h];
    let mut heap = BinaryHeap::new();
    let mut order = 0;
    for (i, &s) in seeds.iter().enumerate() {
        labels[s] = i as u32 + 1;
        heap.push(Queued {
            height: dist[s],
            order,
            pixel: s,
        });
        order += 1;
    }
    while let Some(Queued { pixel, .. }) = heap.pop() {
        let (x, y) = ((pixel % w) as i64, (pixel / w) as i64);
        for (dx, dy) in NEIGHBORS8 {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let q = ny as usize * w + nx as usize;
            if mask[q] && labels[q] == 0 {
                labels[q] = labels[pixel];
                heap.push(Queued {
                    height: dist[q],
                    order,
                    pixel: q,
                });
                order += 1;
            }
        }
    }
    label_boxes(&labels, seeds.len() as u32, w)
        .into_iter()
        .map(|(bbox, _)| Detection { bbox, score: 1.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    /// Gaussian scales searched, ascending.
    pub sigmas: Vec<f64>,
    /// Minimum scale-normalized response, in gray levels.
    pub threshold: f64,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication.
pub(crate) fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * data[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Scale-normalized negative Laplacian-of-Gaussian of the darkness image,
/// one plane per sigma. Dark blobs give positive peaks.
pub fn log_stack(image: &GrayImage, sigmas: &[f64]) -> Vec<Vec<f64>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let dark: Vec<f64> = image.as_raw().iter().map(|&v| 255.0 - v as f64).collect();
    sigmas
        .iter()
        .map(|&s| {
            let g = gaussian_blur(&dark, w, h, s);
            let at = |x: i64, y: i64| g[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];
            let mut out = vec![0.0; w * h];
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let lap = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
                    out[y as usize * w + x as usize] = -s * s * lap;
                }
            }
            out
        })
        .collect()
}

/// Local maxima of a response stack over `(x, y, scale)` above `threshold`.
pub fn blob_peaks(stack: &[Vec<f64>], sigmas: &[f64], w: usize, h: usize, threshold: f64) -> Vec<Detection> {
    peaks_with_response(stack, sigmas, w, h, threshold).into_iter().map(|(d, _)| d).collect()
}

pub(crate) fn peaks_with_response(stack: &[Vec<f64>], sigmas: &[f64], w: usize, h: usize, threshold: f64) -> Vec<(Detection, f64)> {
    let mut out = Vec::new();
    for (si, plane) in stack.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                if v <= threshold {
                    continue;
                }
                let mut is_max = true;
                'scan: for ds in -1i64..=1 {
                    let s2 = si as i64 + ds;
                    if s2 < 0 || s2 >= stack.len() as i64 {
                        continue;
                    }
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if ds == 0 && dx == 0 && dy == 0 {
                                continue;
                            }
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            let q = ny as usize * w + nx as usize;
                            let o = stack[s2 as usize][q];
                            // Ties resolve toward the earlier (scale, pixel).
                            let earlier = (s2 as usize, q) < (si, y * w + x);
                            if o > v || (o == v && earlier) {
                                is_max = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if is_max {
                    let r = sigmas[si] * std::f64::consts::SQRT_2;
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if let Some(bbox) = BoundingBox::tile(cx - r, cy - r, 2.0 * r, 2.0 * r)
                        .ok()
                        .and_then(|b| b.clip(w as f64, h as f64))
                    {
                        out.push((Detection { bbox, score: 1.0 }, v));
                    }
                }
            }
        }
    }
    out
}

/// Laplacian-of-Gaussian blob detection over the given scales.
pub fn blob_detect(image: &GrayImage, params: &BlobParams) -> Vec<Detection> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let stack = log_stack(image, &params.sigmas);
    blob_peaks(&stack, &params.sigmas, w, h, params.threshold)
}

#[cfg(test)]
mod tests {
    use image::Luma;

    use super::*;

    fn disk(img: &mut GrayImage, cx: f64, cy: f64, r: f64, v: u8) {
        for y in 0..img.height() {
            for x in 0..img.width() {
                if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r {
                    img.put_pixel(x, y, Luma([v]));
                }
            }
        }
    }

    fn white(w: u32, h: u32) -> GrayImage {
        GrayImage::from_pixel(w, h, Luma([255]))
    }

    const T: ThresholdParams = ThresholdParams { level: 128, min_area: 1 };
    const W: WatershedParams = WatershedParams {
        level: 128,
        min_peak: 1.0,
        min_distance: 3.0,
    };

    fn blob() -> BlobParams {
        BlobParams {
            sigmas: vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0],
            threshold: 5.0,
        }
    }

    #[test]
    fn blank_and_constant_images_are_empty() {
        for v in [0u8, 120, 255] {
            let img = GrayImage::from_pixel(40, 30, Luma([v]));
            assert!(blob_detect(&img, &blob()).is_empty());
            if v == 255 {
                assert!(threshold_detect(&img, &T).is_empty());
                assert!(watershed_detect(&img, &W).is_empty());
            }
        }
    }

    #[test]
    fn single_blob_single_detection() {
        let mut img = white(40, 40);
        disk(&mut img, 20.0, 18.0, 4.0, 10);
        let t = threshold_detect(&img, &T);
        assert_eq!(t.len(), 1);
        let (cx, cy) = t[0].bbox.center();
        assert!((cx - 20.0).abs() < 0.6 && (cy - 18.0).abs() < 0.6);
        assert_eq!(watershed_detect(&img, &W).len(), 1);
    }

    #[test]
    fn touching_blobs_merge_under_threshold_but_split_under_watershed() {
        let mut img = white(40, 30);
        disk(&mut img, 12.0, 15.0, 5.0, 10);
        disk(&mut img, 21.0, 15.0, 5.0, 10);
        assert_eq!(threshold_detect(&img, &T).len(), 1);
        assert_eq!(watershed_detect(&img, &W).len(), 2);
    }

    #[test]
    fn gaussian_blob_peaks_at_its_scale() {
        let mut img = white(50, 50);
        for y in 0..50 {
            for x in 0..50 {
                let d2 = (x as f64 - 25.0).powi(2) + (y as f64 - 25.0).powi(2);
                let v = 255.0 - 200.0 * (-d2 / (2.0 * 9.0)).exp();
                img.put_pixel(x, y, Luma([v.round() as u8]));
            }
        }
        let dets = blob_detect(&img, &blob());
        assert_eq!(dets.len(), 1);
        let r = dets[0].bbox.w / 2.0 / std::f64::consts::SQRT_2;
        assert!((r - 3.0).abs() <= 0.5, "scale {r}");
    }

    #[test]
    fn distance_transform_of_square() {
        let w = 7;
        let mut mask = vec![false; 49];
        for y in 1..6 {
            for x in 1..6 {
                mask[y * w + x] = true;
            }
        }
        let d = distance_transform(&mask, 7, 7);
        assert_eq!(d[3 * w + 3], 3.0);
        assert_eq!(d[w + 1], 1.0);
        assert_eq!(d[0], 0.0);
    }
}
