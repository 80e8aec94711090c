//! Grid-search tuning of the baselines: each picks the grid point with the
//! lowest mean count offset on the training images.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::classic::{component_areas, log_stack, peaks_with_response, watershed_count, BlobParams, ThresholdParams, WatershedParams};
use super::metrics::count_offset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub levels: Vec<u8>,
    pub min_areas: Vec<usize>,
    pub min_peaks: Vec<f64>,
    pub min_distances: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub blob_thresholds: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            levels: (6..=23).map(|i| i * 10).collect(),
            min_areas: vec![1, 3, 5, 8, 12, 20, 30],
            min_peaks: vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5],
            min_distances: vec![2.0, 3.0, 4.0, 5.0, 6.0],
            sigmas: vec![1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0],
            blob_thresholds: (1..=60).map(|i| i as f64 * 5.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedBaselines {
    pub threshold: ThresholdParams,
    pub watershed: WatershedParams,
    pub blob: BlobParams,
    /// Mean training offset reached by each, in the order above.
    pub training_offsets: [f64; 3],
}

fn mean(v: impl Iterator<Item = usize>, n: usize) -> f64 {
    v.sum::<usize>() as f64 / n as f64
}

/// Tunes all three baselines on `(image, ground-truth count)` pairs.
pub fn tune_baselines(train: &[(&GrayImage, usize)], grid: &TuningGrid) -> Result<TunedBaselines> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("tuning needs at least one image".into()));
    }
    if grid.levels.is_empty() || grid.min_areas.is_empty() || grid.min_peaks.is_empty() || grid.min_distances.is_empty() || grid.blob_thresholds.is_empty() || grid.sigmas.is_empty() {
        return Err(Error::InvalidArgument("every tuning grid axis needs a value".into()));
    }
    let n = train.len();

    let mut best_t = (f64::INFINITY, ThresholdParams { level: 0, min_area: 1 });
    for &level in &grid.levels {
        let areas: Vec<Vec<usize>> = train.iter().map(|(img, _)| component_areas(img, level)).collect();
        for &min_area in &grid.min_areas {
            let off = mean(
                areas.iter().zip(train).map(|(a, (_, gt))| count_offset(a.iter().filter(|&&x| x >= min_area).count(), *gt)),
                n,
            );
            if off < best_t.0 {
                best_t = (off, ThresholdParams { level, min_area });
            }
        }
    }

    let mut best_w = (
        f64::INFINITY,
        WatershedParams {
            level: 0,
            min_peak: 1.0,
            min_distance: 1.0,
        },
    );
    for &level in &grid.levels {
        for &min_peak in &grid.min_peaks {
            for &min_distance in &grid.min_distances {
                let p = WatershedParams {
                    level,
                    min_peak,
                    min_distance,
                };
                let off = mean(train.iter().map(|(img, gt)| count_offset(watershed_count(img, &p), *gt)), n);
                if off < best_w.0 {
                    best_w = (off, p);
                }
            }
        }
    }

    // Peak positions do not depend on the threshold, so one pass per image
    // gives the count at every threshold.
    let responses: Vec<Vec<f64>> = train
        .iter()
        .map(|(img, _)| {
            let stack = log_stack(img, &grid.sigmas);
            peaks_with_response(&stack, &grid.sigmas, img.width() as usize, img.height() as usize, 0.0)
                .into_iter()
                .map(|(_, v)| v)
                .collect()
        })
        .collect();
    let mut best_b = (f64::INFINITY, grid.blob_thresholds[0]);
    for &t in &grid.blob_thresholds {
        let off = mean(responses.iter().zip(train).map(|(r, (_, gt))| count_offset(r.iter().filter(|&&v| v > t).count(), *gt)), n);
        if off < best_b.0 {
            best_b = (off, t);
        }
    }

    Ok(TunedBaselines {
        threshold: best_t.1,
        watershed: best_w.1,
        blob: BlobParams {
            sigmas: grid.sigmas.clone(),
            threshold: best_b.1,
        },
        training_offsets: [best_t.0, best_w.0, best_b.0],
    })
}

#[cfg(test)]
mod tests {
    use image::Luma;

    use super::*;
    use crate::baselines::classic::threshold_detect;

    #[test]
    fn tuning_finds_a_perfect_threshold_on_clean_disks() {
        let mut img = GrayImage::from_pixel(40, 40, Luma([240]));
        for (cx, cy) in [(10.0, 10.0), (30.0, 12.0), (20.0, 30.0)] {
            for y in 0..40u32 {
                for x in 0..40u32 {
                    if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= 4.0 {
                        img.put_pixel(x, y, Luma([40]));
                    }
                }
            }
        }
        let tuned = tune_baselines(&[(&img, 3)], &TuningGrid::default()).unwrap();
        assert_eq!(tuned.training_offsets, [0.0, 0.0, 0.0]);
        assert_eq!(threshold_detect(&img, &tuned.threshold).len(), 3);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(tune_baselines(&[], &TuningGrid::default()).is_err());
    }
}
