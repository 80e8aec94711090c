//! Two-term detection loss: binary log loss on every labeled box plus a
//! smooth-L1 box regression term on the positives.

use super::bbox::BoundingBox;

/// Score clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Largest log-scale change accepted when decoding, as in the usual
/// `ln(1000 / 16)` guard.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Regression targets `(dx / w, dy / h, ln(w' / w), ln(h' / h))` of `target`
/// relative to `reference`, using box centers.
pub fn encode(reference: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    [
        (tx - rx) / reference.w,
        (ty - ry) / reference.h,
        (target.w / reference.w).ln(),
        (target.h / reference.h).ln(),
    ]
}

/// Inverse of [`encode`].
pub fn decode(reference: &BoundingBox, deltas: &[f64; 4]) -> BoundingBox {
    let (rx, ry) = reference.center();
    let cx = rx + deltas[0] * reference.w;
    let cy = ry + deltas[1] * reference.h;
    let w = reference.w * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = reference.h * deltas[3].min(MAX_LOG_SCALE).exp();
    BoundingBox {
        x: cx - w / 2.0,
        y: cy - h / 2.0,
        w,
        h,
        frame: reference.frame,
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Binary log loss of a neuron probability against a 0/1 target, with the
/// probability clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn log_loss(p: f64, positive: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Per-box training target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Neuron, with its regression target.
    Positive([f64; 4]),
    Negative,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    /// Gradient w.r.t. the `(background, neuron)` logits of every box.
    pub grad_logits: Vec<[f64; 2]>,
    /// Gradient w.r.t. the predicted deltas of every box.
    pub grad_deltas: Vec<[f64; 4]>,
    /// Number of labeled boxes, used for both normalizers.
    pub normalizer: usize,
}

/// Neuron probability from `(background, neuron)` logits.
pub fn neuron_probability(logits: &[f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

/// `L = (1/n_cls) sum L_cls + lambda (1/n_reg) sum p* L_reg`.
///
/// Both normalizers are the number of non-ignored boxes. Ignored boxes
/// contribute nothing to either term or to the gradients.
pub fn multitask_loss(logits: &[[f64; 2]], deltas: &[[f64; 4]], targets: &[Target], lambda: f64) -> LossOutput {
    assert_eq!(logits.len(), targets.len(), "one logit pair per box");
    assert_eq!(deltas.len(), targets.len(), "one delta vector per box");
    let n = targets.iter().filter(|t| !matches!(t, Target::Ignored)).count();
    let mut out = LossOutput {
        total: 0.0,
        classification: 0.0,
        regression: 0.0,
        grad_logits: vec![[0.0; 2]; targets.len()],
        grad_deltas: vec![[0.0; 4]; targets.len()],
        normalizer: n,
    };
    if n == 0 {
        return out;
    }
    let norm = 1.0 / n as f64;
    for (i, target) in targets.iter().enumerate() {
        let positive = match target {
            Target::Ignored => continue,
            Target::Positive(_) => true,
            Target::Negative => false,
        };
        let p = neuron_probability(&logits[i]);
        out.classification += log_loss(p, positive) * norm;
        // d(-log softmax_y)/d logit_k = softmax_k - [k == y]
        let y = if positive { 1.0 } else { 0.0 };
        out.grad_logits[i] = [((1.0 - p) - (1.0 - y)) * norm, (p - y) * norm];

        if let Target::Positive(t) = target {
            for k in 0..4 {
                let d = deltas[i][k] - t[k];
                out.regression += lambda * norm * smooth_l1(d);
                out.grad_deltas[i][k] = lambda * norm * smooth_l1_grad(d);
            }
        }
    }
    out.total = out.classification + out.regression;
    out
}
