//! Annotated tile corpora on disk (`images/<id>.png` plus `gt.jsonl`),
//! detector training from them and evaluation against the baselines.

use std::fs;
use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::gt::{write_gt, GtRecord};
use super::synthetic::{generate_corpus, SyntheticSceneSpec};
use crate::baselines::{blob_detect, count_offset, precision_recall, threshold_detect, tune_baselines, watershed_detect, EvalReport, ImageEval, TunedBaselines, TuningGrid};
use crate::detector::{four_step_train, AnnotatedTile, BoundingBox, DetectorModel, Detection, InferenceConfig, TrainingReport};
use crate::error::{Error, Result};

pub const IMAGES_DIR: &str = "images";
pub const GT_FILE: &str = "gt.jsonl";

/// Match IoU used for precision and recall.
pub const MATCH_IOU: f64 = 0.5;

pub fn tile_id(i: usize) -> String {
    format!("tile-{i:05}")
}

/// Writes `count` synthetic tiles and their ground truth under `dir`.
pub fn write_corpus(spec: &SyntheticSceneSpec, count: usize, dir: &Path) -> Result<Vec<GtRecord>> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let scenes = generate_corpus(spec, count)?;
    let mut records = Vec::with_capacity(count);
    for (i, s) in scenes.iter().enumerate() {
        let id = tile_id(i);
        s.image.save(images.join(format!("{id}.png")))?;
        records.push(GtRecord {
            image: id,
            width: s.image.width(),
            height: s.image.height(),
            boxes: s.boxes.iter().map(|b| [b.x as u32, b.y as u32, b.w as u32, b.h as u32]).collect(),
            scores: None,
        });
    }
    write_gt(&dir.join(GT_FILE), &records)?;
    Ok(records)
}

/// A ground-truth record with its decoded image.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: GrayImage,
    pub boxes: Vec<BoundingBox>,
}

impl LabeledImage {
    pub fn tile(&self, extent: usize) -> Result<AnnotatedTile> {
        AnnotatedTile::pad(&self.image, self.boxes.clone(), extent)
    }
}

/// Loads the image of every record from `images_dir/<image>.png`.
pub fn load_labeled(images_dir: &Path, records: &[GtRecord]) -> Result<Vec<LabeledImage>> {
    records
        .iter()
        .map(|r| {
            r.validate()?;
            let image = image::open(images_dir.join(format!("{}.png", r.image)))?.to_luma8();
            if image.dimensions() != (r.width, r.height) {
                return Err(Error::ExtentMismatch(format!(
                    "image {} is {:?}, record says {}x{}",
                    r.image,
                    image.dimensions(),
                    r.width,
                    r.height
                )));
            }
            Ok(LabeledImage {
                id: r.image.clone(),
                image,
                boxes: r.bounding_boxes()?,
            })
        })
        .collect()
}

pub fn train_detector(train: &[LabeledImage], cfg: &PipelineConfig) -> Result<(DetectorModel, TrainingReport)> {
    let tiles = train.iter().map(|l| l.tile(cfg.model.tile_extent)).collect::<Result<Vec<_>>>()?;
    four_step_train(&tiles, cfg.model.clone(), &cfg.training)
}

/// Detections on every image, kept down to `floor` so the precision-recall
/// curve can sweep the score threshold.
pub fn detect_images(model: &DetectorModel, images: &[LabeledImage], nms_iou: f64, floor: f64) -> Result<Vec<Vec<Detection>>> {
    let cfg = InferenceConfig {
        score_threshold: floor,
        nms_iou,
    };
    images
        .iter()
        .map(|l| {
            let tile = l.tile(model.spec.tile_extent)?;
            model.detect_tile(&tile.image, tile.valid, &cfg)
        })
        .collect()
}

/// Scores a learned detector: the curve and AP use all detections, counts
/// use those at or above `score_threshold`.
pub fn evaluate_learned(model: &DetectorModel, images: &[LabeledImage], inference: &InferenceConfig) -> Result<EvalReport> {
    let dets = detect_images(model, images, inference.nms_iou, 0.01)?;
    let pairs: Vec<(Vec<Detection>, Vec<BoundingBox>)> = dets.into_iter().zip(images).map(|(d, l)| (d, l.boxes.clone())).collect();
    let (curve, ap) = precision_recall(&pairs, MATCH_IOU)?;
    Ok(EvalReport {
        method: "learned".into(),
        params: vec![("score_threshold".into(), inference.score_threshold)],
        images: images
            .iter()
            .zip(&pairs)
            .map(|(l, (d, g))| {
                let predicted = d.iter().filter(|x| x.score >= inference.score_threshold).count();
                ImageEval {
                    image: l.id.clone(),
                    ground_truth: g.len(),
                    predicted,
                    offset: count_offset(predicted, g.len()),
                }
            })
            .collect(),
        curve,
        average_precision: ap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEvaluation {
    pub tuned: TunedBaselines,
    /// Threshold, watershed and blob reports, in that order.
    pub reports: Vec<EvalReport>,
}

/// Grid-tunes the baselines on `train` counts and evaluates them on `test`.
pub fn evaluate_baselines(train: &[LabeledImage], test: &[LabeledImage], grid: &TuningGrid) -> Result<BaselineEvaluation> {
    let pairs: Vec<(&GrayImage, usize)> = train.iter().map(|l| (&l.image, l.boxes.len())).collect();
    let tuned = tune_baselines(&pairs, grid)?;
    let methods: [(&str, Box<dyn Fn(&GrayImage) -> Vec<Detection> + '_>, Vec<(String, f64)>); 3] = [
        ("threshold", Box::new(|i| threshold_detect(i, &tuned.threshold)), named(&tuned.threshold)?),
        ("watershed", Box::new(|i| watershed_detect(i, &tuned.watershed)), named(&tuned.watershed)?),
        ("blob", Box::new(|i| blob_detect(i, &tuned.blob)), named(&tuned.blob)?),
    ];
    let names: Vec<String> = test.iter().map(|l| l.id.clone()).collect();
    let mut reports = Vec::new();
    for (name, detect, params) in methods {
        let pairs: Vec<(Vec<Detection>, Vec<BoundingBox>)> = test.iter().map(|l| (detect(&l.image), l.boxes.clone())).collect();
        reports.push(crate::baselines::evaluate(name, &names, &pairs, MATCH_IOU, params)?);
    }
    Ok(BaselineEvaluation { tuned, reports })
}

// Numeric fields of a parameter struct as `(name, value)` pairs.
fn named<T: Serialize>(params: &T) -> Result<Vec<(String, f64)>> {
    let v = serde_json::to_value(params)?;
    Ok(v.as_object()
        .map(|m| m.iter().filter_map(|(k, v)| v.as_f64().map(|x| (k.clone(), x))).collect())
        .unwrap_or_default())
}
