use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::{iou, BoundingBox, Detection};
use crate::error::{Error, Result};

/// `|#predicted - #ground truth|`.
pub fn count_offset(predicted: usize, ground_truth: usize) -> usize {
    predicted.abs_diff(ground_truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image: String,
    pub ground_truth: usize,
    pub predicted: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// Tuned hyperparameters, name and value.
    pub params: Vec<(String, f64)>,
    pub images: Vec<ImageEval>,
    pub curve: Vec<CurvePoint>,
    pub average_precision: f64,
}

impl EvalReport {
    pub fn mean_offset(&self) -> f64 {
        if self.images.is_empty() {
            return 0.0;
        }
        self.images.iter().map(|i| i.offset as f64).sum::<f64>() / self.images.len() as f64
    }

    /// Mean offset over images whose ground-truth count is in `range`.
    pub fn mean_offset_where(&self, keep: impl Fn(usize) -> bool) -> Option<f64> {
        let sel: Vec<f64> = self.images.iter().filter(|i| keep(i.ground_truth)).map(|i| i.offset as f64).collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }

    /// Offset against ground-truth count, one `(count, offset)` per image.
    pub fn offset_vs_density(&self) -> Vec<(usize, usize)> {
        self.images.iter().map(|i| (i.ground_truth, i.offset)).collect()
    }

    /// One row per image, then `#`-prefixed summary lines.
    pub fn write_tsv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
        w.write_record(["image", "ground_truth", "predicted", "offset"])?;
        for i in &self.images {
            w.write_record([i.image.clone(), i.ground_truth.to_string(), i.predicted.to_string(), i.offset.to_string()])?;
        }
        let mut out = w.into_inner().map_err(|e| Error::Format {
            what: "report",
            detail: e.to_string(),
        })?;
        let io = |e| Error::io("<report>", e);
        writeln!(out, "# method\t{}", self.method).map_err(io)?;
        for (k, v) in &self.params {
            writeln!(out, "# param\t{k}\t{v}").map_err(io)?;
        }
        writeln!(out, "# mean_offset\t{:.6}", self.mean_offset()).map_err(io)?;
        writeln!(out, "# average_precision\t{:.6}", self.average_precision).map_err(io)?;
        Ok(())
    }

    /// `(recall, precision)` pairs for plotting.
    pub fn write_curve_tsv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
        w.write_record(["threshold", "recall", "precision"])?;
        for p in &self.curve {
            w.write_record([format!("{:.6}", p.threshold), format!("{:.6}", p.recall), format!("{:.6}", p.precision)])?;
        }
        w.flush().map_err(|e| Error::io("<curve>", e))?;
        Ok(())
    }
}

/// Greedy one-to-one matching in descending score order. Returns whether
/// each detection (in input order) is a true positive.
pub fn match_detections(predicted: &[Detection], ground_truth: &[BoundingBox], match_iou: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|&a, &b| predicted[b].score.total_cmp(&predicted[a].score));
    let mut taken = vec![false; ground_truth.len()];
    let mut tp = vec![false; predicted.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(&predicted[i].bbox, gt);
            if o >= match_iou && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[i] = true;
        }
    }
    tp
}

/// Precision-recall over a corpus of `(detections, ground truth)` images
/// and all-point interpolated average precision. With no ground truth at
/// all, recall is undefined and AP is 0.
pub fn precision_recall(images: &[(Vec<Detection>, Vec<BoundingBox>)], match_iou: f64) -> Result<(Vec<CurvePoint>, f64)> {
    if !(match_iou > 0.0 && match_iou <= 1.0) {
        return Err(Error::InvalidArgument(format!("match IoU must be in (0, 1], got {match_iou}")));
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut total_gt = 0;
    for (dets, gt) in images {
        total_gt += gt.len();
        let tp = match_detections(dets, gt, match_iou);
        scored.extend(dets.iter().zip(tp).map(|(d, t)| (d.score, t)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(score, hit) in &scored {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 };
        curve.push(CurvePoint {
            threshold: score,
            recall,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok((curve.clone(), average_precision(&curve)))
}

/// Area under the precision envelope, summed over recall increments.
pub fn average_precision(curve: &[CurvePoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    ap
}

/// Evaluates per-image detections against ground truth.
pub fn evaluate(
    method: &str,
    names: &[String],
    images: &[(Vec<Detection>, Vec<BoundingBox>)],
    match_iou: f64,
    params: Vec<(String, f64)>,
) -> Result<EvalReport> {
    if names.len() != images.len() {
        return Err(Error::InvalidArgument("one name per evaluated image".into()));
    }
    let (curve, ap) = precision_recall(images, match_iou)?;
    Ok(EvalReport {
        method: method.to_string(),
        params,
        images: names
            .iter()
            .zip(images)
            .map(|(n, (d, g))| ImageEval {
                image: n.clone(),
                ground_truth: g.len(),
                predicted: d.len(),
                offset: count_offset(d.len(), g.len()),
            })
            .collect(),
        curve,
        average_precision: ap,
    })
}
