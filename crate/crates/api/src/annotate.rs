//! An annotation workspace: `images/` of tiles plus the `annotations.jsonl`
//! journal next to it.

use std::fs;
use std::path::{Path, PathBuf};

use denerd_core::workbench::{read_gt, split_records, write_gt, AnnotationStore, ImageAnnotations, ImageStore};

use crate::error::{ApiError, ApiResult};
use crate::types::*;

pub const JOURNAL_FILE: &str = "annotations.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

#[derive(Debug)]
pub struct AnnotationWorkspace {
    dir: PathBuf,
    images: ImageStore,
    store: AnnotationStore,
}

impl AnnotationWorkspace {
    pub fn open(dir: &Path) -> ApiResult<Self> {
        let images = ImageStore::new(&dir.join(denerd_core::workbench::IMAGES_DIR))?;
        let store = AnnotationStore::open(&dir.join(JOURNAL_FILE), images.extents()?)?;
        Ok(AnnotationWorkspace {
            dir: dir.to_path_buf(),
            images,
            store,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn list(&self) -> ApiResult<Vec<ImageInfo>> {
        let ids: Vec<String> = self.store.image_ids().map(str::to_string).collect();
        ids.iter()
            .map(|id| {
                let (width, height) = self.store.extent(id)?;
                let ann = self.store.get(id)?;
                Ok(ImageInfo {
                    id: id.clone(),
                    width,
                    height,
                    has_expression: self.images.expression_path(id)?.is_some(),
                    revision: ann.revision,
                    boxes: ann.boxes.len(),
                })
            })
            .collect()
    }

    pub fn image_bytes(&self, id: &str) -> ApiResult<Vec<u8>> {
        let p = self.images.image_path(id)?;
        fs::read(&p).map_err(|e| denerd_core::Error::io(&p, e).into())
    }

    pub fn expression_bytes(&self, id: &str) -> ApiResult<Vec<u8>> {
        let p = self.images.expression_path(id)?.ok_or_else(|| ApiError::not_found(format!("no expression image for {id}")))?;
        fs::read(&p).map_err(|e| denerd_core::Error::io(&p, e).into())
    }

    pub fn get(&self, id: &str) -> ApiResult<ImageAnnotations> {
        Ok(self.store.get(id)?.clone())
    }

    pub fn add(&mut self, id: &str, req: &AddBoxesRequest) -> ApiResult<ImageAnnotations> {
        if req.annotator.trim().is_empty() {
            return Err(ApiError::invalid("annotator must not be empty"));
        }
        Ok(self.store.add_boxes(id, &req.boxes, &req.annotator, req.revision)?)
    }

    pub fn remove(&mut self, id: &str, req: &RemoveBoxesRequest) -> ApiResult<RemoveBoxesResponse> {
        let (removed, annotations) = self.store.remove_intersecting(id, req.rect, req.revision)?;
        Ok(RemoveBoxesResponse { removed, annotations })
    }

    /// Compacts the journal and writes seeded train and test splits.
    pub fn export(&mut self, req: &ExportRequest) -> ApiResult<ExportResponse> {
        self.store.compact()?;
        let records = self.store.records();
        let (train, test) = split_records(&records, req.train_fraction, req.seed)?;
        let dir = req.out_dir.clone().unwrap_or_else(|| self.dir.join("export"));
        fs::create_dir_all(&dir).map_err(|e| denerd_core::Error::io(&dir, e))?;
        let (train_path, test_path) = (dir.join(TRAIN_FILE), dir.join(TEST_FILE));
        write_gt(&train_path, &train)?;
        write_gt(&test_path, &test)?;
        Ok(ExportResponse {
            train: train.len(),
            test: test.len(),
            train_path,
            test_path,
        })
    }

    /// Adds every box of a ground-truth file as new annotations.
    pub fn import(&mut self, req: &ImportRequest) -> ApiResult<ImportResponse> {
        let records = read_gt(&req.gt_path)?;
        for r in &records {
            r.validate()?;
            if self.store.extent(&r.image)? != (r.width, r.height) {
                return Err(ApiError::invalid(format!("record for {} has the wrong extent", r.image)));
            }
        }
        let mut boxes = 0;
        for r in records.iter().filter(|r| !r.boxes.is_empty()) {
            self.store.add_boxes(&r.image, &r.boxes, &req.annotator, None)?;
            boxes += r.boxes.len();
        }
        Ok(ImportResponse { images: records.len(), boxes })
    }
}
