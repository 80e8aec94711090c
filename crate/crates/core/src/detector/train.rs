//! Four-step alternating training of the proposal network and the detection
//! head.
//!
//! 1. proposal network + backbone A
//! 2. detection head + backbone B (initialized from A) on the proposals of 1
//! 3. proposal network only, on top of the frozen backbone B
//! 4. detection head only, on the proposals of 3 over the frozen backbone B

use image::GrayImage;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bbox::{iou, BoundingBox};
use super::labeling::{label_anchors, sample_labels, AnchorLabel, Label, LabelThresholds};
use super::loss::{encode, multitask_loss, Target};
use super::model::{gather_rpn, scatter_rpn, DetectorModel, Handles, InferenceConfig, ModelSpec, Trainable};
use crate::error::{Error, Result};
use crate::nn::{GradientTape, LayerHandle, LayerParams, MomentumSgd, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Passes over the training tiles in each of the four stages.
    pub epochs: usize,
    pub lr_stage12: f64,
    pub lr_stage34: f64,
    pub momentum: f64,
    pub lambda: f64,
    /// IoU range of proposals treated as neurons by the detection head.
    pub positive_range: [f64; 2],
    /// IoU range `[lo, hi)` of proposals treated as background by the head.
    pub negative_range: [f64; 2],
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub head_batch: usize,
    pub head_positive_fraction: f64,
    /// Ground-truth boxes narrower or shorter than this are dropped.
    pub min_object_size: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 500,
            lr_stage12: 1e-5,
            lr_stage34: 1e-6,
            momentum: 0.9,
            lambda: 10.0,
            positive_range: [0.5, 1.0],
            negative_range: [0.0, 0.5],
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 256,
            rpn_positive_fraction: 0.5,
            head_batch: 64,
            head_positive_fraction: 0.25,
            min_object_size: 2.0,
            nms_iou: 0.3,
            score_threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Settings that train the small default network from scratch on a CPU
    /// in minutes: fewer epochs and learning rates scaled up by 500 while
    /// keeping the 10x drop between the stage pairs.
    pub fn desk_scale() -> Self {
        TrainingConfig {
            epochs: 40,
            lr_stage12: 5e-3,
            lr_stage34: 5e-4,
            ..TrainingConfig::default()
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [neg_lo, neg_hi] = self.negative_range;
        let [pos_lo, pos_hi] = self.positive_range;
        if !(0.0 <= neg_lo && neg_lo <= neg_hi && neg_hi <= pos_lo && pos_lo <= pos_hi && pos_hi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "overlap ranges must satisfy 0 <= negative <= positive <= 1, got {:?} / {:?}",
                self.negative_range, self.positive_range
            )));
        }
        if !(0.0 <= self.rpn_neg_iou && self.rpn_neg_iou <= self.rpn_pos_iou && self.rpn_pos_iou <= 1.0) {
            return Err(Error::InvalidArgument("proposal IoU thresholds out of order".into()));
        }
        if self.lr_stage12 < 0.0 || self.lr_stage34 < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("learning rates must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.rpn_batch == 0 || self.head_batch == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One training tile: padded to the model's extent, with its boxes in tile
/// coordinates.
#[derive(Debug, Clone)]
pub struct AnnotatedTile {
    pub image: GrayImage,
    pub valid: (u32, u32),
    pub boxes: Vec<BoundingBox>,
}

impl AnnotatedTile {
    /// Zero-pads `image` at the right and bottom to `extent x extent`.
    pub fn pad(image: &GrayImage, boxes: Vec<BoundingBox>, extent: usize) -> Result<Self> {
        let e = extent as u32;
        if image.width() > e || image.height() > e {
            return Err(Error::ExtentMismatch(format!(
                "{}x{} image does not fit a {e}x{e} tile",
                image.width(),
                image.height()
            )));
        }
        let mut padded = GrayImage::new(e, e);
        image::imageops::replace(&mut padded, image, 0, 0);
        Ok(AnnotatedTile {
            image: padded,
            valid: (image.width(), image.height()),
            boxes,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean loss per epoch for each of the four stages.
    pub stage_losses: Vec<Vec<f64>>,
    /// Mean classification term per epoch for each stage.
    pub stage_classification: Vec<Vec<f64>>,
}

struct StageLog {
    total: Vec<f64>,
    classification: Vec<f64>,
}

struct Prepared {
    input: Tensor,
    gt: Vec<BoundingBox>,
    valid: (f64, f64),
    labels: Vec<AnchorLabel>,
    /// Regression target of each anchor against its matched box.
    targets: Vec<Target>,
}

fn prepare(tile: &AnnotatedTile, anchors: &[BoundingBox], cfg: &TrainingConfig) -> Prepared {
    let gt: Vec<BoundingBox> = tile
        .boxes
        .iter()
        .filter(|b| b.w >= cfg.min_object_size && b.h >= cfg.min_object_size)
        .copied()
        .collect();
    let labels = label_anchors(
        anchors,
        &gt,
        LabelThresholds {
            positive: cfg.rpn_pos_iou,
            negative: cfg.rpn_neg_iou,
        },
    );
    let targets = labels
        .iter()
        .map(|l| match (l.label, l.matched) {
            (Label::Positive, Some(g)) => Target::Positive(encode(&anchors[l.anchor], &gt[g])),
            (Label::Negative, _) => Target::Negative,
            _ => Target::Ignored,
        })
        .collect();
    Prepared {
        input: super::model::normalize_tile(&tile.image, tile.valid),
        gt,
        valid: (tile.valid.0 as f64, tile.valid.1 as f64),
        labels,
        targets,
    }
}

fn layers_mut(model: &mut DetectorModel, t: Trainable) -> Vec<&mut LayerParams> {
    let mut out: Vec<&mut LayerParams> = Vec::new();
    if t.backbone {
        out.extend(model.backbone.iter_mut());
    }
    if t.rpn {
        out.push(&mut model.rpn_conv);
        out.push(&mut model.rpn_cls);
        out.push(&mut model.rpn_reg);
    }
    if t.head {
        out.push(&mut model.head_fc);
        out.push(&mut model.head_cls);
        out.push(&mut model.head_reg);
    }
    out
}

fn handles_of(h: &Handles, t: Trainable) -> Vec<LayerHandle> {
    let mut out = Vec::new();
    if t.backbone {
        out.extend(h.backbone.iter().copied());
    }
    if t.rpn {
        out.extend(h.rpn);
    }
    if t.head {
        out.extend(h.head);
    }
    out
}

struct StageCtx<'a> {
    stage: usize,
    cfg: &'a TrainingConfig,
    lr: f64,
    trainable: Trainable,
}

fn abort(stage: usize, step: usize, reason: impl Into<String>) -> Error {
    Error::TrainingAborted {
        stage,
        step,
        reason: reason.into(),
    }
}

/// Features of a tile: either recomputed on the tape or a cached constant.
fn features(model: &DetectorModel, tape: &mut GradientTape, h: &Handles, data: &Prepared, cached: Option<&Tensor>) -> Result<NodeId> {
    match cached {
        Some(f) => Ok(tape.constant(f.clone())),
        None => {
            let x = tape.constant(data.input.clone());
            model.backbone_forward(tape, h, x)
        }
    }
}

fn rpn_stage(
    model: &mut DetectorModel,
    data: &[Prepared],
    cached: Option<&[Tensor]>,
    ctx: &StageCtx,
    rng: &mut ChaCha8Rng,
) -> Result<StageLog> {
    let per = model.anchors_per_center();
    let mut opt = MomentumSgd::new(ctx.cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = StageLog {
        total: Vec::with_capacity(ctx.cfg.epochs),
        classification: Vec::with_capacity(ctx.cfg.epochs),
    };
    let mut step = 0;
    for epoch in 0..ctx.cfg.epochs {
        order.shuffle(rng);
        let (mut sum, mut cls_sum) = (0.0, 0.0);
        for &i in &order {
            let d = &data[i];
            let mut tape = GradientTape::new();
            let h = model.register(&mut tape, ctx.trainable);
            let f = features(model, &mut tape, &h, d, cached.map(|c| &c[i]))?;
            let rpn = model.rpn_forward(&mut tape, &h, f)?;
            let (logits, deltas) = gather_rpn(tape.value(rpn.cls), tape.value(rpn.reg), per);
            let sampled = sample_labels(&d.labels, ctx.cfg.rpn_batch, ctx.cfg.rpn_positive_fraction, rng);
            let targets: Vec<Target> = sampled
                .iter()
                .map(|l| if l.label == Label::Ignored { Target::Ignored } else { d.targets[l.anchor] })
                .collect();
            let loss = multitask_loss(&logits, &deltas, &targets, ctx.cfg.lambda);
            if !loss.total.is_finite() {
                return Err(abort(ctx.stage, step, "non-finite proposal loss"));
            }
            let shape = tape.value(rpn.cls).shape();
            let (gc, gr) = scatter_rpn(&loss.grad_logits, &loss.grad_deltas, per, (shape[1], shape[2]));
            let grads = tape
                .backward(&[(rpn.cls, gc), (rpn.reg, gr)])
                .map_err(|e| abort(ctx.stage, step, e.to_string()))?;
            let layer_grads: Vec<LayerParams> = handles_of(&h, ctx.trainable).into_iter().map(|hd| grads.layer(hd)).collect();
            opt.update(&mut layers_mut(model, ctx.trainable), &layer_grads, ctx.lr)
                .map_err(|e| abort(ctx.stage, step, e.to_string()))?;
            sum += loss.total;
            cls_sum += loss.classification;
            step += 1;
        }
        let mean = sum / data.len() as f64;
        let cls_mean = cls_sum / data.len() as f64;
        info!("stage {} epoch {} loss {:.5} (classification {:.5})", ctx.stage, epoch + 1, mean, cls_mean);
        log.total.push(mean);
        log.classification.push(cls_mean);
    }
    Ok(log)
}

/// Assigns proposals to ground truth for the detection head.
fn label_rois(rois: &[BoundingBox], gt: &[BoundingBox], cfg: &TrainingConfig) -> Vec<Target> {
    rois.iter()
        .map(|r| {
            let (best, gi) = gt
                .iter()
                .enumerate()
                .map(|(i, g)| (iou(r, g), i))
                .fold((0.0, usize::MAX), |acc, x| if x.0 > acc.0 { x } else { acc });
            if gi != usize::MAX && best >= cfg.positive_range[0] && best <= cfg.positive_range[1] {
                Target::Positive(encode(r, &gt[gi]))
            } else if best >= cfg.negative_range[0] && best < cfg.negative_range[1] {
                Target::Negative
            } else {
                Target::Ignored
            }
        })
        .collect()
}

fn sample_rois(targets: &[Target], cfg: &TrainingConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..targets.len()).filter(|&i| matches!(targets[i], Target::Positive(_))).collect();
    let mut neg: Vec<usize> = (0..targets.len()).filter(|&i| matches!(targets[i], Target::Negative)).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = (cfg.head_batch as f64 * cfg.head_positive_fraction).round() as usize;
    pos.truncate(max_pos);
    neg.truncate(cfg.head_batch - pos.len());
    let mut out: Vec<usize> = pos.into_iter().chain(neg).collect();
    out.sort_unstable();
    out
}

fn head_stage(
    model: &mut DetectorModel,
    data: &[Prepared],
    proposals: &[Vec<BoundingBox>],
    cached: Option<&[Tensor]>,
    ctx: &StageCtx,
    rng: &mut ChaCha8Rng,
) -> Result<StageLog> {
    let mut opt = MomentumSgd::new(ctx.cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = StageLog {
        total: Vec::with_capacity(ctx.cfg.epochs),
        classification: Vec::with_capacity(ctx.cfg.epochs),
    };
    // Ground truth joins the candidate set so every tile has positives.
    let candidates: Vec<(Vec<BoundingBox>, Vec<Target>)> = data
        .iter()
        .zip(proposals)
        .map(|(d, p)| {
            let rois: Vec<BoundingBox> = d.gt.iter().chain(p).copied().collect();
            let targets = label_rois(&rois, &d.gt, ctx.cfg);
            (rois, targets)
        })
        .collect();
    let mut step = 0;
    for epoch in 0..ctx.cfg.epochs {
        order.shuffle(rng);
        let (mut sum, mut cls_sum) = (0.0, 0.0);
        for &i in &order {
            let d = &data[i];
            let (rois, targets) = &candidates[i];
            let picked = sample_rois(targets, ctx.cfg, rng);
            let boxes: Vec<BoundingBox> = picked.iter().map(|&j| rois[j]).collect();
            let (windows, kept) = model.windows(&boxes);
            if windows.is_empty() {
                step += 1;
                continue;
            }
            let mut tape = GradientTape::new();
            let h = model.register(&mut tape, ctx.trainable);
            let f = features(model, &mut tape, &h, d, cached.map(|c| &c[i]))?;
            let (cls, reg) = model.head_forward(&mut tape, &h, f, &windows)?;
            let c = tape.value(cls).data();
            let r = tape.value(reg).data();
            let n = kept.len();
            let logits: Vec<[f64; 2]> = (0..n).map(|k| [c[2 * k], c[2 * k + 1]]).collect();
            let deltas: Vec<[f64; 4]> = (0..n).map(|k| [r[4 * k], r[4 * k + 1], r[4 * k + 2], r[4 * k + 3]]).collect();
            let t: Vec<Target> = kept.iter().map(|&k| targets[picked[k]]).collect();
            let loss = multitask_loss(&logits, &deltas, &t, ctx.cfg.lambda);
            if !loss.total.is_finite() {
                return Err(abort(ctx.stage, step, "non-finite detection loss"));
            }
            let gc = Tensor::new(vec![n, 2], loss.grad_logits.iter().flatten().copied().collect())?;
            let gr = Tensor::new(vec![n, 4], loss.grad_deltas.iter().flatten().copied().collect())?;
            let grads = tape
                .backward(&[(cls, gc), (reg, gr)])
                .map_err(|e| abort(ctx.stage, step, e.to_string()))?;
            let layer_grads: Vec<LayerParams> = handles_of(&h, ctx.trainable).into_iter().map(|hd| grads.layer(hd)).collect();
            opt.update(&mut layers_mut(model, ctx.trainable), &layer_grads, ctx.lr)
                .map_err(|e| abort(ctx.stage, step, e.to_string()))?;
            sum += loss.total;
            cls_sum += loss.classification;
            step += 1;
        }
        let mean = sum / data.len() as f64;
        let cls_mean = cls_sum / data.len() as f64;
        info!("stage {} epoch {} loss {:.5} (classification {:.5})", ctx.stage, epoch + 1, mean, cls_mean);
        log.total.push(mean);
        log.classification.push(cls_mean);
    }
    Ok(log)
}

fn cache_features(model: &DetectorModel, data: &[Prepared]) -> Result<Vec<Tensor>> {
    data.iter()
        .map(|d| {
            let mut tape = GradientTape::new();
            let h = model.register(&mut tape, Trainable::NONE);
            let x = tape.constant(d.input.clone());
            let f = model.backbone_forward(&mut tape, &h, x)?;
            Ok(tape.value(f).clone())
        })
        .collect()
}

fn all_proposals(model: &DetectorModel, data: &[Prepared], cached: Option<&[Tensor]>) -> Result<Vec<Vec<BoundingBox>>> {
    let anchors = model.spec.anchors();
    data.iter()
        .enumerate()
        .map(|(i, d)| {
            let mut tape = GradientTape::new();
            let h = model.register(&mut tape, Trainable::NONE);
            let f = features(model, &mut tape, &h, d, cached.map(|c| &c[i]))?;
            let rpn = model.rpn_forward(&mut tape, &h, f)?;
            Ok(model
                .proposals(tape.value(rpn.cls), tape.value(rpn.reg), &anchors, d.valid)
                .into_iter()
                .map(|p| p.bbox)
                .collect())
        })
        .collect()
}

/// Trains a detector from scratch with the four-step schedule.
pub fn four_step_train(dataset: &[AnnotatedTile], spec: ModelSpec, cfg: &TrainingConfig) -> Result<(DetectorModel, TrainingReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let extent = spec.tile_extent as u32;
    if let Some(t) = dataset.iter().find(|t| t.image.width() != extent || t.image.height() != extent) {
        return Err(Error::ExtentMismatch(format!(
            "training tile is {}x{}, model expects {extent}x{extent}",
            t.image.width(),
            t.image.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let anchors = spec.anchors();
    let data: Vec<Prepared> = dataset.iter().map(|t| prepare(t, &anchors, cfg)).collect();

    // (i) proposal network with its own backbone
    let mut rpn_model = DetectorModel::new(spec.clone(), cfg.seed)?;
    let s1 = rpn_stage(
        &mut rpn_model,
        &data,
        None,
        &StageCtx {
            stage: 1,
            cfg,
            lr: cfg.lr_stage12,
            trainable: Trainable {
                backbone: true,
                rpn: true,
                head: false,
            },
        },
        &mut rng,
    )?;

    // (ii) detection head on the stage-1 proposals
    let proposals = all_proposals(&rpn_model, &data, None)?;
    let mut det_model = DetectorModel::new(spec, cfg.seed.wrapping_add(1))?;
    det_model.backbone = rpn_model.backbone.clone();
    let s2 = head_stage(
        &mut det_model,
        &data,
        &proposals,
        None,
        &StageCtx {
            stage: 2,
            cfg,
            lr: cfg.lr_stage12,
            trainable: Trainable {
                backbone: true,
                rpn: false,
                head: true,
            },
        },
        &mut rng,
    )?;

    // (iii) proposal network on the shared, frozen backbone
    let mut model = det_model;
    model.rpn_conv = rpn_model.rpn_conv;
    model.rpn_cls = rpn_model.rpn_cls;
    model.rpn_reg = rpn_model.rpn_reg;
    let cached = cache_features(&model, &data)?;
    let s3 = rpn_stage(
        &mut model,
        &data,
        Some(&cached),
        &StageCtx {
            stage: 3,
            cfg,
            lr: cfg.lr_stage34,
            trainable: Trainable {
                backbone: false,
                rpn: true,
                head: false,
            },
        },
        &mut rng,
    )?;

    // (iv) detection head on the updated proposals
    let proposals = all_proposals(&model, &data, Some(&cached))?;
    let s4 = head_stage(
        &mut model,
        &data,
        &proposals,
        Some(&cached),
        &StageCtx {
            stage: 4,
            cfg,
            lr: cfg.lr_stage34,
            trainable: Trainable {
                backbone: false,
                rpn: false,
                head: true,
            },
        },
        &mut rng,
    )?;

    Ok((
        model,
        TrainingReport {
            stage_classification: vec![s1.classification, s2.classification, s3.classification, s4.classification],
            stage_losses: vec![s1.total, s2.total, s3.total, s4.total],
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        TrainingConfig::default().validate().unwrap();
        TrainingConfig::desk_scale().validate().unwrap();
        let bad = TrainingConfig {
            negative_range: [0.0, 0.6],
            ..TrainingConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn roi_assignment_uses_half_open_negative_range() {
        let cfg = TrainingConfig::default();
        let gt = [BoundingBox::tile(0.0, 0.0, 4.0, 4.0).unwrap()];
        let rois = [
            BoundingBox::tile(0.0, 0.0, 4.0, 4.0).unwrap(),   // 1.0
            BoundingBox::tile(0.0, 0.0, 4.0, 8.0).unwrap(),   // 0.5
            BoundingBox::tile(2.0, 0.0, 4.0, 4.0).unwrap(),   // 1/3
            BoundingBox::tile(40.0, 40.0, 4.0, 4.0).unwrap(), // 0
        ];
        let t = label_rois(&rois, &gt, &cfg);
        assert!(matches!(t[0], Target::Positive(_)));
        assert!(matches!(t[1], Target::Positive(_)));
        assert_eq!(t[2], Target::Negative);
        assert_eq!(t[3], Target::Negative);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(four_step_train(&[], ModelSpec::default(), &TrainingConfig::desk_scale()).is_err());
    }
}
