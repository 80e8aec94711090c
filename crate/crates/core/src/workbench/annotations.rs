//! Durable bounding-box annotations: an append-only journal of add/remove
//! events, replayed on open and compacted on export.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::gt::GtRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    pub id: u64,
    /// `[x, y, w, h]` in image pixels.
    pub rect: [u32; 4],
    pub annotator: String,
    pub created_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ImageAnnotations {
    pub image: String,
    pub revision: u64,
    pub boxes: Vec<AnnotatedBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Event {
    Add { image: String, revision: u64, boxes: Vec<AnnotatedBox> },
    Remove { image: String, revision: u64, ids: Vec<u64> },
}

/// True when two `[x, y, w, h]` rectangles share interior area.
pub fn rects_intersect(a: [u32; 4], b: [u32; 4]) -> bool {
    let (ax2, ay2) = (a[0] as u64 + a[2] as u64, a[1] as u64 + a[3] as u64);
    let (bx2, by2) = (b[0] as u64 + b[2] as u64, b[1] as u64 + b[3] as u64);
    (a[0] as u64) < bx2 && (b[0] as u64) < ax2 && (a[1] as u64) < by2 && (b[1] as u64) < ay2
}

/// Annotation state for a fixed set of images of known size.
#[derive(Debug)]
pub struct AnnotationStore {
    journal: PathBuf,
    file: File,
    extents: BTreeMap<String, (u32, u32)>,
    images: BTreeMap<String, ImageAnnotations>,
    next_id: u64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl AnnotationStore {
    /// Opens or creates the journal at `journal` and replays it. A torn
    /// final line (never acknowledged) is dropped.
    pub fn open(journal: &Path, extents: BTreeMap<String, (u32, u32)>) -> Result<Self> {
        let mut images: BTreeMap<String, ImageAnnotations> = extents
            .keys()
            .map(|k| {
                (
                    k.clone(),
                    ImageAnnotations {
                        image: k.clone(),
                        ..Default::default()
                    },
                )
            })
            .collect();
        let mut next_id = 1;
        let mut valid_len = 0u64;
        if journal.exists() {
            let f = File::open(journal).map_err(|e| Error::io(journal, e))?;
            let mut reader = BufReader::new(f);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(|e| Error::io(journal, e))?;
                if n == 0 {
                    break;
                }
                if !line.ends_with('\n') {
                    log::warn!("dropping torn journal tail in {}", journal.display());
                    break;
                }
                let event: Event = serde_json::from_str(line.trim_end())?;
                match event {
                    Event::Add { image, revision, boxes } => {
                        let entry = images.get_mut(&image).ok_or_else(|| Error::NotFound(format!("journal image {image}")))?;
                        next_id = next_id.max(boxes.iter().map(|b| b.id + 1).max().unwrap_or(0));
                        entry.boxes.extend(boxes);
                        entry.revision = revision;
                    }
                    Event::Remove { image, revision, ids } => {
                        let entry = images.get_mut(&image).ok_or_else(|| Error::NotFound(format!("journal image {image}")))?;
                        entry.boxes.retain(|b| !ids.contains(&b.id));
                        entry.revision = revision;
                    }
                }
                valid_len += n as u64;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(journal).map_err(|e| Error::io(journal, e))?;
        file.set_len(valid_len).map_err(|e| Error::io(journal, e))?;
        Ok(AnnotationStore {
            journal: journal.to_path_buf(),
            file,
            extents,
            images,
            next_id,
        })
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.extents.keys().map(String::as_str)
    }

    pub fn extent(&self, image: &str) -> Result<(u32, u32)> {
        self.extents.get(image).copied().ok_or_else(|| Error::NotFound(format!("image {image}")))
    }

    pub fn get(&self, image: &str) -> Result<&ImageAnnotations> {
        self.images.get(image).ok_or_else(|| Error::NotFound(format!("image {image}")))
    }

    fn check_revision(&self, image: &str, expected: Option<u64>) -> Result<()> {
        let current = self.get(image)?.revision;
        match expected {
            Some(e) if e != current => Err(Error::RevisionConflict { expected: e, current }),
            _ => Ok(()),
        }
    }

    fn append(&mut self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.journal, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.journal, e))
    }

    /// Adds boxes; returns the image's state once the event is on disk.
    pub fn add_boxes(&mut self, image: &str, rects: &[[u32; 4]], annotator: &str, expected_revision: Option<u64>) -> Result<ImageAnnotations> {
        let (w, h) = self.extent(image)?;
        self.check_revision(image, expected_revision)?;
        for r in rects {
            if r[2] == 0 || r[3] == 0 || r[0] as u64 + r[2] as u64 > w as u64 || r[1] as u64 + r[3] as u64 > h as u64 {
                return Err(Error::InvalidArgument(format!("box {r:?} is empty or outside the {w}x{h} image")));
            }
        }
        let created_ms = now_ms();
        let boxes: Vec<AnnotatedBox> = rects
            .iter()
            .enumerate()
            .map(|(i, &rect)| AnnotatedBox {
                id: self.next_id + i as u64,
                rect,
                annotator: annotator.to_string(),
                created_ms,
            })
            .collect();
        let revision = self.get(image)?.revision + 1;
        self.append(&Event::Add {
            image: image.to_string(),
            revision,
            boxes: boxes.clone(),
        })?;
        self.next_id += rects.len() as u64;
        let entry = self.images.get_mut(image).expect("checked above");
        entry.boxes.extend(boxes);
        entry.revision = revision;
        Ok(entry.clone())
    }

    /// Removes every box sharing area with `rect`.
    pub fn remove_intersecting(&mut self, image: &str, rect: [u32; 4], expected_revision: Option<u64>) -> Result<(usize, ImageAnnotations)> {
        self.check_revision(image, expected_revision)?;
        if rect[2] == 0 || rect[3] == 0 {
            return Err(Error::InvalidArgument("removal rectangle has zero area".into()));
        }
        let ids: Vec<u64> = self.get(image)?.boxes.iter().filter(|b| rects_intersect(b.rect, rect)).map(|b| b.id).collect();
        let revision = self.get(image)?.revision + 1;
        self.append(&Event::Remove {
            image: image.to_string(),
            revision,
            ids: ids.clone(),
        })?;
        let entry = self.images.get_mut(image).expect("checked above");
        entry.boxes.retain(|b| !ids.contains(&b.id));
        entry.revision = revision;
        Ok((ids.len(), entry.clone()))
    }

    /// Rewrites the journal as one add event per annotated image.
    pub fn compact(&mut self) -> Result<()> {
        let tmp = self.journal.with_extension("compact");
        {
            let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            for a in self.images.values().filter(|a| a.revision > 0) {
                let mut line = serde_json::to_string(&Event::Add {
                    image: a.image.clone(),
                    revision: a.revision,
                    boxes: a.boxes.clone(),
                })?;
                line.push('\n');
                f.write_all(line.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
            }
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, &self.journal).map_err(|e| Error::io(&self.journal, e))?;
        if let Some(dir) = self.journal.parent().filter(|d| !d.as_os_str().is_empty()) {
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        self.file = OpenOptions::new().append(true).open(&self.journal).map_err(|e| Error::io(&self.journal, e))?;
        Ok(())
    }

    /// Exchange records for images that carry at least one revision.
    pub fn records(&self) -> Vec<GtRecord> {
        self.images
            .values()
            .filter(|a| a.revision > 0)
            .map(|a| {
                let (width, height) = self.extents[&a.image];
                GtRecord {
                    image: a.image.clone(),
                    width,
                    height,
                    boxes: a.boxes.iter().map(|b| b.rect).collect(),
                    scores: None,
                }
            })
            .collect()
    }
}

/// Directory of tile images: `<id>.png` with an optional paired
/// `<id>.expr.png` expression image.
#[derive(Debug, Clone)]
pub struct ImageStore {
    dir: PathBuf,
}

impl ImageStore {
    pub fn new(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::NotFound(dir.display().to_string()));
        }
        Ok(ImageStore { dir: dir.to_path_buf() })
    }

    /// Image ids in sorted order.
    pub fn ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let name = entry.map_err(|e| Error::io(&self.dir, e))?.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(".png") {
                if !stem.ends_with(".expr") {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn checked(&self, id: &str) -> Result<()> {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::InvalidArgument(format!("bad image id {id:?}")));
        }
        Ok(())
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        self.checked(id)?;
        let p = self.dir.join(format!("{id}.png"));
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::NotFound(format!("image {id}")))
        }
    }

    pub fn expression_path(&self, id: &str) -> Result<Option<PathBuf>> {
        self.checked(id)?;
        let p = self.dir.join(format!("{id}.expr.png"));
        Ok(p.is_file().then_some(p))
    }

    pub fn extents(&self) -> Result<BTreeMap<String, (u32, u32)>> {
        self.ids()?
            .into_iter()
            .map(|id| {
                let dims = image::image_dimensions(self.image_path(&id)?)?;
                Ok((id, dims))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn touching_rectangles_do_not_intersect() {
        assert!(!rects_intersect([0, 0, 5, 5], [5, 0, 5, 5]));
        assert!(rects_intersect([0, 0, 5, 5], [4, 4, 5, 5]));
    }
}
