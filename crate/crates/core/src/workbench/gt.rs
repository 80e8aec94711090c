//! Ground-truth exchange: one JSON record per line, per image, with integer
//! boxes `[x, y, w, h]` and optional detection scores.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{BoundingBox, Detection};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<[u32; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl GtRecord {
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            if b[2] == 0 || b[3] == 0 || b[0] as u64 + b[2] as u64 > self.width as u64 || b[1] as u64 + b[3] as u64 > self.height as u64 {
                return Err(Error::InvalidArgument(format!("box {b:?} outside {}x{} image {}", self.width, self.height, self.image)));
            }
        }
        if let Some(s) = &self.scores {
            if s.len() != self.boxes.len() {
                return Err(Error::Shape(format!("{} scores for {} boxes in {}", s.len(), self.boxes.len(), self.image)));
            }
        }
        Ok(())
    }

    pub fn bounding_boxes(&self) -> Result<Vec<BoundingBox>> {
        self.boxes.iter().map(|b| BoundingBox::tile(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64)).collect()
    }

    /// Snaps detections to whole pixels and clips them to the image.
    pub fn from_detections(image: &str, width: u32, height: u32, detections: &[Detection]) -> GtRecord {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for d in detections {
            let x0 = d.bbox.x.round().clamp(0.0, width as f64) as u32;
            let y0 = d.bbox.y.round().clamp(0.0, height as f64) as u32;
            let x1 = d.bbox.x2().round().clamp(0.0, width as f64) as u32;
            let y1 = d.bbox.y2().round().clamp(0.0, height as f64) as u32;
            if x1 > x0 && y1 > y0 {
                boxes.push([x0, y0, x1 - x0, y1 - y0]);
                scores.push(d.score);
            }
        }
        GtRecord {
            image: image.to_string(),
            width,
            height,
            boxes,
            scores: Some(scores),
        }
    }
}

pub fn write_gt(path: &Path, records: &[GtRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        r.validate()?;
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gt(path: &Path) -> Result<Vec<GtRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: GtRecord = serde_json::from_str(&line)?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

/// Seeded image-level split. The test set receives `floor(n * (1 - f))`
/// images and the remainder goes to training.
pub fn split_records(records: &[GtRecord], train_fraction: f64, seed: u64) -> Result<(Vec<GtRecord>, Vec<GtRecord>)> {
    if records.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (records.len() as f64 * (1.0 - train_fraction) + 1e-9).floor() as usize;
    let n_train = records.len() - n_test;
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train.into_iter().map(|i| records[i].clone()).collect(), test.into_iter().map(|i| records[i].clone()).collect()))
}
