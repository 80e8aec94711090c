use serde::{Deserialize, Serialize};

use super::bbox::{BoundingBox, Frame};

/// Pyramid of square-ish anchor boxes laid over a regular grid of centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorSet {
    /// Side of the smallest anchor in pixels.
    pub base_size: f64,
    /// Ratio between consecutive pyramid levels.
    pub scale: f64,
    pub levels: usize,
    /// Width-to-height ratios applied at every level.
    pub aspect_ratios: Vec<f64>,
    /// Distance between anchor centers in pixels.
    pub stride: usize,
}

impl Default for AnchorSet {
    fn default() -> Self {
        AnchorSet {
            base_size: 2.0,
            scale: 1.2,
            levels: 15,
            aspect_ratios: vec![1.0],
            stride: 4,
        }
    }
}

impl AnchorSet {
    /// Side length of level `k`: `base_size * scale^k`.
    pub fn side(&self, level: usize) -> f64 {
        self.base_size * self.scale.powi(level as i32)
    }

    pub fn sides(&self) -> Vec<f64> {
        (0..self.levels).map(|k| self.side(k)).collect()
    }

    /// Anchors per grid center.
    pub fn per_center(&self) -> usize {
        self.levels * self.aspect_ratios.len().max(1)
    }

    /// `(width, height)` of every anchor shape at one center, level-major.
    pub fn shapes(&self) -> Vec<(f64, f64)> {
        let ratios: &[f64] = if self.aspect_ratios.is_empty() {
            &[1.0]
        } else {
            &self.aspect_ratios
        };
        let mut out = Vec::with_capacity(self.per_center());
        for k in 0..self.levels {
            let side = self.side(k);
            for &r in ratios {
                let s = r.sqrt();
                out.push((side * s, side / s));
            }
        }
        out
    }
}

/// Anchor centers per axis for an image `extent` pixels long.
pub fn grid_cells(extent: usize, stride: usize) -> usize {
    (extent / stride.max(1)).max(1)
}

/// Anchors for an image of `(width, height)` pixels, ordered
/// `(row, col, shape)` with the shape index fastest. Boxes are clipped to the
/// image.
pub fn generate_anchors(config: &AnchorSet, (width, height): (usize, usize)) -> Vec<BoundingBox> {
    let rows = grid_cells(height, config.stride);
    let cols = grid_cells(width, config.stride);
    anchors_on_grid(config, rows, cols, (width, height))
}

/// Anchors over an explicit `rows x cols` grid, one center per cell of
/// `stride` pixels.
pub fn anchors_on_grid(config: &AnchorSet, rows: usize, cols: usize, (width, height): (usize, usize)) -> Vec<BoundingBox> {
    let shapes = config.shapes();
    let step_x = if cols == 1 { width as f64 } else { config.stride as f64 };
    let step_y = if rows == 1 { height as f64 } else { config.stride as f64 };
    let mut out = Vec::with_capacity(rows * cols * shapes.len());
    for r in 0..rows {
        let cy = (r as f64 + 0.5) * step_y;
        for c in 0..cols {
            let cx = (c as f64 + 0.5) * step_x;
            for &(w, h) in &shapes {
                let raw = BoundingBox {
                    x: cx - w / 2.0,
                    y: cy - h / 2.0,
                    w,
                    h,
                    frame: Frame::Tile,
                };
                // Centers lie inside the image, so clipping always leaves area.
                out.push(raw.clip(width as f64, height as f64).unwrap_or(raw));
            }
        }
    }
    out
}
