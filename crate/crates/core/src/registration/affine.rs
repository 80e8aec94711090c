use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine map `p' = A p + t` from moving-image to fixed-image pixel
/// coordinates. Pixel `(x, y)` has its center at `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub a11: f64,
    pub a12: f64,
    pub tx: f64,
    pub a21: f64,
    pub a22: f64,
    pub ty: f64,
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        a11: 1.0,
        a12: 0.0,
        tx: 0.0,
        a21: 0.0,
        a22: 1.0,
        ty: 0.0,
    };

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform {
            tx: dx,
            ty: dy,
            ..Self::IDENTITY
        }
    }

    /// Rotation by `degrees` (counter-clockwise in image axes) and uniform
    /// `scale` about `(cx, cy)`, followed by a shift of `(dx, dy)`.
    pub fn similarity(degrees: f64, scale: f64, cx: f64, cy: f64, dx: f64, dy: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let (a11, a12, a21, a22) = (scale * c, -scale * s, scale * s, scale * c);
        AffineTransform {
            a11,
            a12,
            tx: cx - a11 * cx - a12 * cy + dx,
            a21,
            a22,
            ty: cy - a21 * cx - a22 * cy + dy,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a11 * x + self.a12 * y + self.tx, self.a21 * x + self.a22 * y + self.ty)
    }

    pub fn determinant(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn is_finite(&self) -> bool {
        [self.a11, self.a12, self.tx, self.a21, self.a22, self.ty].iter().all(|v| v.is_finite())
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &AffineTransform) -> AffineTransform {
        AffineTransform {
            a11: self.a11 * first.a11 + self.a12 * first.a21,
            a12: self.a11 * first.a12 + self.a12 * first.a22,
            tx: self.a11 * first.tx + self.a12 * first.ty + self.tx,
            a21: self.a21 * first.a11 + self.a22 * first.a21,
            a22: self.a21 * first.a12 + self.a22 * first.a22,
            ty: self.a21 * first.tx + self.a22 * first.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::InvalidArgument(format!("affine transform is singular (det {det})")));
        }
        let (i11, i12, i21, i22) = (self.a22 / det, -self.a12 / det, -self.a21 / det, self.a11 / det);
        Ok(AffineTransform {
            a11: i11,
            a12: i12,
            tx: -(i11 * self.tx + i12 * self.ty),
            a21: i21,
            a22: i22,
            ty: -(i21 * self.tx + i22 * self.ty),
        })
    }

    /// Re-expresses a transform estimated on downsampled images in the pixel
    /// frames of the originals, given each image's per-axis downsampling
    /// factors.
    pub fn rescaled(&self, moving_scale: (f64, f64), fixed_scale: (f64, f64)) -> AffineTransform {
        let down = scale_about_half(1.0 / moving_scale.0, 1.0 / moving_scale.1);
        let up = scale_about_half(fixed_scale.0, fixed_scale.1);
        up.compose(&self.compose(&down))
    }

    /// Mean distance between where `self` and `other` send the four corners
    /// of a `width × height` image.
    pub fn corner_displacement(&self, other: &AffineTransform, width: u32, height: u32) -> f64 {
        let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
        let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
        corners
            .iter()
            .map(|&(x, y)| {
                let (ax, ay) = self.apply(x, y);
                let (bx, by) = other.apply(x, y);
                (ax - bx).hypot(ay - by)
            })
            .sum::<f64>()
            / 4.0
    }
}

// x' + 0.5 = k (x + 0.5)
fn scale_about_half(kx: f64, ky: f64) -> AffineTransform {
    AffineTransform {
        a11: kx,
        a12: 0.0,
        tx: 0.5 * (kx - 1.0),
        a21: 0.0,
        a22: ky,
        ty: 0.5 * (ky - 1.0),
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    #[test]
    fn inverse_round_trips() {
        let t = AffineTransform::similarity(12.0, 1.07, 40.0, 30.0, 3.0, -2.0);
        let back = t.inverse().unwrap().compose(&t);
        assert!(back.corner_displacement(&AffineTransform::IDENTITY, 100, 80) < 1e-9);
    }

    #[test]
    fn singular_has_no_inverse() {
        let t = AffineTransform {
            a11: 1.0,
            a12: 2.0,
            tx: 0.0,
            a21: 2.0,
            a22: 4.0,
            ty: 0.0,
        };
        assert!(t.inverse().is_err());
    }

    #[test]
    fn rescaling_a_translation_scales_the_shift() {
        let t = AffineTransform::translation(3.0, -1.0).rescaled((4.0, 4.0), (4.0, 4.0));
        assert_abs_diff_eq!(t.tx, 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.ty, -4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.a11, 1.0, epsilon = 1e-12);
    }
}
