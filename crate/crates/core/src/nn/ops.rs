//! Forward and backward kernels for the layer types the detector uses.
//!
//! Kernels are plain functions over [`Tensor`]s; [`crate::nn::tape`] chains
//! them for reverse-mode differentiation. Feature maps are `(C, H, W)`,
//! batched feature vectors are `(N, features)`.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Zero padding in `[top, bottom, left, right]` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding::uniform(0);

    pub const fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub fn from_array(p: [usize; 4]) -> Self {
        Padding {
            top: p[0],
            bottom: p[1],
            left: p[2],
            right: p[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stride {
    pub rows: usize,
    pub cols: usize,
}

impl Stride {
    pub const ONE: Stride = Stride { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        Ok(Stride { rows, cols })
    }
}

/// Learnable parameters of a convolution or fully connected layer.
///
/// Convolution kernels are `(out, in, kH, kW)`; fully connected weights are
/// `(out, in)`. Biases are always `(out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kernels: Tensor,
    pub biases: Tensor,
}

impl LayerParams {
    pub fn new(kernels: Tensor, biases: Tensor) -> Result<Self> {
        let out = *kernels
            .shape()
            .first()
            .ok_or_else(|| Error::Shape("kernel tensor has no extents".into()))?;
        if kernels.shape().contains(&0) {
            return Err(Error::Shape(format!(
                "kernel extents must be positive, got {:?}",
                kernels.shape()
            )));
        }
        if biases.shape() != [out] {
            return Err(Error::Shape(format!(
                "{} out-channels but bias shape {:?}",
                out,
                biases.shape()
            )));
        }
        Ok(LayerParams { kernels, biases })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }
}

/// Output index range `[lo, hi)` whose input coordinate
/// `o * stride + k - pad` lands inside `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, pad: usize, k: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let last = in_len as isize - 1 + pad as isize - k as isize;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

pub fn conv2d_output_extent(
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
    stride: Stride,
) -> Result<(usize, usize)> {
    let ph = in_h + padding.top + padding.bottom;
    let pw = in_w + padding.left + padding.right;
    if ph < kh || pw < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        )));
    }
    Ok(((ph - kh) / stride.rows + 1, (pw - kw) / stride.cols + 1))
}

fn conv_dims(input: &Tensor, params: &LayerParams) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    let (o, ci, kh, kw) = match params.kernels.shape() {
        [o, ci, kh, kw] => (*o, *ci, *kh, *kw),
        other => return Err(Error::Shape(format!("conv kernel must be 4-D, got {other:?}"))),
    };
    if ci != c {
        return Err(Error::Shape(format!(
            "input has {c} channels but kernel expects {ci}"
        )));
    }
    Ok((o, c, h, w, kh, kw))
}

/// Patch matrix `(C * kH * kW, oH * oW)`; taps falling in the padding are 0.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, padding: Padding, stride: Stride, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let mut col = vec![0.0; c * kh * kw * p];
    for ci in 0..c {
        for ky in 0..kh {
            let (ylo, yhi) = valid_range(oh, h, padding.top, ky, stride.rows);
            for kx in 0..kw {
                let (xlo, xhi) = valid_range(ow, w, padding.left, kx, stride.cols);
                if xlo >= xhi {
                    continue;
                }
                let row = &mut col[((ci * kh + ky) * kw + kx) * p..][..p];
                for y in ylo..yhi {
                    let base = ci * h * w + (y * stride.rows + ky - padding.top) * w;
                    if stride.cols == 1 {
                        let ix0 = base + xlo + kx - padding.left;
                        row[y * ow + xlo..y * ow + xhi].copy_from_slice(&x[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for xo in xlo..xhi {
                            row[y * ow + xo] = x[base + xo * stride.cols + kx - padding.left];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: sums patch entries back onto the input grid.
#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, padding: Padding, stride: Stride, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..kh {
            let (ylo, yhi) = valid_range(oh, h, padding.top, ky, stride.rows);
            for kx in 0..kw {
                let (xlo, xhi) = valid_range(ow, w, padding.left, kx, stride.cols);
                if xlo >= xhi {
                    continue;
                }
                let row = &col[((ci * kh + ky) * kw + kx) * p..][..p];
                for y in ylo..yhi {
                    let base = ci * h * w + (y * stride.rows + ky - padding.top) * w;
                    if stride.cols == 1 {
                        let ix0 = base + xlo + kx - padding.left;
                        for (d, &v) in x[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&row[y * ow + xlo..y * ow + xhi]) {
                            *d += v;
                        }
                    } else {
                        for xo in xlo..xhi {
                            x[base + xo * stride.cols + kx - padding.left] += row[y * ow + xo];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `out += sum_j a[j] * rows[j]` over up to four rows at a time.
fn axpy_rows(out: &mut [f64], coeffs: &[f64], rows: &[f64], stride: usize) {
    let n = out.len();
    let mut j = 0;
    while j + 4 <= coeffs.len() {
        let (a0, a1, a2, a3) = (coeffs[j], coeffs[j + 1], coeffs[j + 2], coeffs[j + 3]);
        let r0 = &rows[j * stride..j * stride + n];
        let r1 = &rows[(j + 1) * stride..(j + 1) * stride + n];
        let r2 = &rows[(j + 2) * stride..(j + 2) * stride + n];
        let r3 = &rows[(j + 3) * stride..(j + 3) * stride + n];
        for i in 0..n {
            out[i] += a0 * r0[i] + a1 * r1[i] + a2 * r2[i] + a3 * r3[i];
        }
        j += 4;
    }
    for (jj, &a) in coeffs.iter().enumerate().skip(j) {
        for (o, &r) in out.iter_mut().zip(&rows[jj * stride..jj * stride + n]) {
            *o += a * r;
        }
    }
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d(input: &Tensor, params: &LayerParams, padding: Padding, stride: Stride) -> Result<Tensor> {
    let (oc, ic, h, w, kh, kw) = conv_dims(input, params)?;
    let (oh, ow) = conv2d_output_extent(h, w, kh, kw, padding, stride)?;
    let p = oh * ow;
    let kk = ic * kh * kw;
    let col = im2col(input.data(), ic, h, w, kh, kw, padding, stride, oh, ow);
    let mut out = Tensor::zeros(&[oc, oh, ow]);
    let k = params.kernels.data();
    let b = params.biases.data();
    for (o, plane) in out.data_mut().chunks_exact_mut(p).enumerate() {
        plane.fill(b[o]);
        axpy_rows(plane, &k[o * kk..(o + 1) * kk], &col, p);
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub biases: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    padding: Padding,
    stride: Stride,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    conv2d_backward_impl(input, params, padding, stride, grad_out, true)
}

/// As [`conv2d_backward`]; the input gradient is left at zero unless
/// `want_input`.
pub(crate) fn conv2d_backward_impl(
    input: &Tensor,
    params: &LayerParams,
    padding: Padding,
    stride: Stride,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let (oc, ic, h, w, kh, kw) = conv_dims(input, params)?;
    let (oh, ow) = conv2d_output_extent(h, w, kh, kw, padding, stride)?;
    if grad_out.shape() != [oc, oh, ow] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match conv output {:?}",
            grad_out.shape(),
            [oc, oh, ow]
        )));
    }
    let p = oh * ow;
    let kk = ic * kh * kw;
    let col = im2col(input.data(), ic, h, w, kh, kw, padding, stride, oh, ow);
    let g = grad_out.data();
    let k = params.kernels.data();

    let mut gk = Tensor::zeros(params.kernels.shape());
    let mut gb = Tensor::zeros(params.biases.shape());
    for o in 0..oc {
        let grow = &g[o * p..(o + 1) * p];
        gb.data_mut()[o] = grow.iter().sum();
        let gkd = &mut gk.data_mut()[o * kk..(o + 1) * kk];
        for (j, slot) in gkd.iter_mut().enumerate() {
            *slot = dot(grow, &col[j * p..(j + 1) * p]);
        }
    }

    let gi = if want_input {
        // gcol[j] = sum_o K[o, j] G[o]
        let mut gcol = vec![0.0; kk * p];
        let mut coeffs = vec![0.0; oc];
        for (j, row) in gcol.chunks_exact_mut(p).enumerate() {
            for (o, c) in coeffs.iter_mut().enumerate() {
                *c = k[o * kk + j];
            }
            axpy_rows(row, &coeffs, g, p);
        }
        Tensor::new(input.shape().to_vec(), col2im(&gcol, ic, h, w, kh, kw, padding, stride, oh, ow))?
    } else {
        Tensor::zeros(input.shape())
    };
    Ok(ConvGrads {
        input: gi,
        kernels: gk,
        biases: gb,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient of ReLU: passes `grad_out` where the input was positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Max pooling without padding. Returns the pooled tensor and, for every
/// output element, the flat input index that produced it (first maximum in
/// row-major window order on ties).
pub fn max_pool(input: &Tensor, window: (usize, usize), stride: Stride) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    let (wh, ww) = window;
    if wh == 0 || ww == 0 {
        return Err(Error::InvalidArgument("pool window must be positive".into()));
    }
    if wh > h || ww > w {
        return Err(Error::Shape(format!(
            "pool window {wh}x{ww} larger than input {h}x{w}"
        )));
    }
    let oh = (h - wh) / stride.rows + 1;
    let ow = (w - ww) / stride.cols + 1;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0usize; c * oh * ow];
    let x = input.data();
    let od = out.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..wh {
                    let row = base + (y * stride.rows + dy) * w + xo * stride.cols;
                    for dx in 0..ww {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                let oi = (ch * oh + y) * ow + xo;
                od[oi] = best;
                argmax[oi] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each upstream gradient to the input position recorded in `argmax`.
pub fn scatter_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&idx, &u) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += u;
    }
    g
}

/// A box in feature-map coordinates: inclusive cell bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureWindow {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl FeatureWindow {
    /// Maps an image-space box `(x, y, w, h)` onto a feature map of extent
    /// `(fh, fw)` whose cells are `1 / scale` pixels wide.
    ///
    /// Returns `None` when the box misses the feature extent. The boolean is
    /// true when the window had to be widened to give every grid cell at least
    /// one feature cell.
    pub fn from_box(
        (x, y, w, h): (f64, f64, f64, f64),
        scale: f64,
        (fh, fw): (usize, usize),
        grid: (usize, usize),
    ) -> Option<(FeatureWindow, bool)> {
        let fx0 = (x * scale).floor();
        let fy0 = (y * scale).floor();
        let fx1 = ((x + w) * scale).ceil() - 1.0;
        let fy1 = ((y + h) * scale).ceil() - 1.0;
        if fx1 < 0.0 || fy1 < 0.0 || fx0 > (fw - 1) as f64 || fy0 > (fh - 1) as f64 {
            return None;
        }
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        let (mut x0, mut x1) = (clamp(fx0, fw - 1), clamp(fx1, fw - 1));
        let (mut y0, mut y1) = (clamp(fy0, fh - 1), clamp(fy1, fh - 1));
        if x1 < x0 {
            x1 = x0;
        }
        if y1 < y0 {
            y1 = y0;
        }
        let mut expanded = false;
        let widen = |lo: &mut usize, hi: &mut usize, need: usize, extent: usize| {
            let need = need.min(extent);
            while *hi - *lo + 1 < need {
                if *hi + 1 < extent {
                    *hi += 1;
                }
                if *hi - *lo + 1 < need && *lo > 0 {
                    *lo -= 1;
                }
            }
        };
        if x1 - x0 + 1 < grid.1 || y1 - y0 + 1 < grid.0 {
            expanded = true;
            widen(&mut x0, &mut x1, grid.1, fw);
            widen(&mut y0, &mut y1, grid.0, fh);
        }
        Some((FeatureWindow { x0, y0, x1, y1 }, expanded))
    }
}

pub struct RoiPoolOutput {
    /// `(boxes, C, grid_h, grid_w)`
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Max-pools each feature window into a fixed `grid` of cells per channel.
pub fn roi_pool(features: &Tensor, windows: &[FeatureWindow], grid: (usize, usize)) -> Result<RoiPoolOutput> {
    let (c, h, w) = features.dims3()?;
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 {
        return Err(Error::InvalidArgument("RoI grid must be positive".into()));
    }
    let n = windows.len();
    let mut out = Tensor::zeros(&[n, c, gh, gw]);
    let mut argmax = vec![0usize; n * c * gh * gw];
    let f = features.data();
    let od = out.data_mut();
    for (r, win) in windows.iter().enumerate() {
        if win.x1 >= w || win.y1 >= h || win.x0 > win.x1 || win.y0 > win.y1 {
            return Err(Error::Shape(format!("RoI window {win:?} outside {h}x{w} features")));
        }
        let rh = win.y1 - win.y0 + 1;
        let rw = win.x1 - win.x0 + 1;
        for gy in 0..gh {
            let ys = win.y0 + gy * rh / gh;
            let ye = (win.y0 + ((gy + 1) * rh).div_ceil(gh)).max(ys + 1).min(h);
            for gx in 0..gw {
                let xs = win.x0 + gx * rw / gw;
                let xe = (win.x0 + ((gx + 1) * rw).div_ceil(gw)).max(xs + 1).min(w);
                for ch in 0..c {
                    let base = ch * h * w;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base + ys * w + xs;
                    for yy in ys..ye {
                        for xx in xs..xe {
                            let v = f[base + yy * w + xx];
                            if v > best {
                                best = v;
                                best_idx = base + yy * w + xx;
                            }
                        }
                    }
                    let oi = ((r * c + ch) * gh + gy) * gw + gx;
                    od[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
    Ok(RoiPoolOutput {
        output: out,
        argmax,
    })
}

/// Fully connected layer over a batch: `(N, in) x (out, in)^T + b -> (N, out)`.
pub fn linear(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (n, fin) = input.dims2()?;
    let (fout, win) = params.kernels.dims2()?;
    if fin != win {
        return Err(Error::Shape(format!(
            "input has {fin} features but weights expect {win}"
        )));
    }
    let x = input.data();
    let wt = params.kernels.data();
    let b = params.biases.data();
    let mut out = Tensor::zeros(&[n, fout]);
    let od = out.data_mut();
    for i in 0..n {
        let row = &x[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let wrow = &wt[o * fin..(o + 1) * fin];
            od[i * fout + o] = b[o] + row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(out)
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub biases: Tensor,
}

pub fn linear_backward(input: &Tensor, params: &LayerParams, grad_out: &Tensor) -> Result<LinearGrads> {
    let (n, fin) = input.dims2()?;
    let (fout, _) = params.kernels.dims2()?;
    if grad_out.shape() != [n, fout] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match linear output {:?}",
            grad_out.shape(),
            [n, fout]
        )));
    }
    let x = input.data();
    let wt = params.kernels.data();
    let g = grad_out.data();
    let mut gi = Tensor::zeros(&[n, fin]);
    let mut gw = Tensor::zeros(&[fout, fin]);
    let mut gb = Tensor::zeros(&[fout]);
    {
        let gid = gi.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for i in 0..n {
            let row = &x[i * fin..(i + 1) * fin];
            let grow = &mut gid[i * fin..(i + 1) * fin];
            for o in 0..fout {
                let u = g[i * fout + o];
                if u == 0.0 {
                    continue;
                }
                gbd[o] += u;
                let wrow = &wt[o * fin..(o + 1) * fin];
                let gwrow = &mut gwd[o * fin..(o + 1) * fin];
                for j in 0..fin {
                    grow[j] += u * wrow[j];
                    gwrow[j] += u * row[j];
                }
            }
        }
    }
    Ok(LinearGrads {
        input: gi,
        weights: gw,
        biases: gb,
    })
}
