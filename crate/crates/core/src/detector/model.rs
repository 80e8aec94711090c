//! Region-proposal detector: a small convolutional backbone shared by a
//! proposal network (objectness + box deltas per anchor) and a detection
//! head that classifies and refines RoI-pooled proposals.

use image::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::anchors::{anchors_on_grid, AnchorSet};
use super::bbox::{BoundingBox, Detection};
use super::loss::{decode, neuron_probability};
use super::nms::nms;
use crate::error::{Error, Result};
use crate::nn::init::{glorot_conv, glorot_linear};
use crate::nn::{Checkpoint, FeatureWindow, GradientTape, LayerHandle, LayerParams, NodeId, Padding, Stride, Tensor};

const CHECKPOINT_KIND: &str = "denerd-detector";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub nms_iou: f64,
    /// Proposals narrower or shorter than this many pixels are dropped.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top_n: 600,
            post_nms_top_n: 100,
            nms_iou: 0.7,
            min_size: 2.0,
        }
    }
}

/// Architecture of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// Side of the square, zero-padded input tile in pixels.
    pub tile_extent: usize,
    /// Output channels of each convolution block.
    pub backbone_channels: Vec<usize>,
    /// Number of leading blocks followed by 2x2 max pooling.
    pub pooled_blocks: usize,
    pub kernel_size: usize,
    pub rpn_channels: usize,
    pub head_hidden: usize,
    pub roi_grid: (usize, usize),
    pub anchors: AnchorSet,
    pub proposals: ProposalConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            tile_extent: 101,
            backbone_channels: vec![8, 16, 32],
            pooled_blocks: 2,
            kernel_size: 3,
            rpn_channels: 16,
            head_hidden: 64,
            roi_grid: (2, 2),
            anchors: AnchorSet::default(),
            proposals: ProposalConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn feature_stride(&self) -> usize {
        1 << self.pooled_blocks
    }

    /// Feature map side after the pooling stages.
    pub fn feature_extent(&self) -> usize {
        let mut e = self.tile_extent;
        for _ in 0..self.pooled_blocks {
            e /= 2;
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::InvalidArgument("backbone needs positive channel counts".into()));
        }
        if self.pooled_blocks > self.backbone_channels.len() {
            return Err(Error::InvalidArgument("more pooled blocks than backbone blocks".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument("kernel size must be odd to preserve extents".into()));
        }
        if self.anchors.stride != self.feature_stride() {
            return Err(Error::InvalidArgument(format!(
                "anchor stride {} must equal the backbone stride {}",
                self.anchors.stride,
                self.feature_stride()
            )));
        }
        if self.feature_extent() == 0 {
            return Err(Error::InvalidArgument("tile too small for the backbone".into()));
        }
        Ok(())
    }

    /// Anchors in tile coordinates, ordered `(row, col, shape)`.
    pub fn anchors(&self) -> Vec<BoundingBox> {
        let f = self.feature_extent();
        anchors_on_grid(&self.anchors, f, f, (self.tile_extent, self.tile_extent))
    }
}

/// Thresholds applied to the detection head's output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.5,
            nms_iou: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub spec: ModelSpec,
    pub backbone: Vec<LayerParams>,
    pub rpn_conv: LayerParams,
    pub rpn_cls: LayerParams,
    pub rpn_reg: LayerParams,
    pub head_fc: LayerParams,
    pub head_cls: LayerParams,
    pub head_reg: LayerParams,
}

/// Which parameter groups receive gradients in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub rpn: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        backbone: false,
        rpn: false,
        head: false,
    };
}

/// Tape handles of every layer, registered once per forward pass.
pub(crate) struct Handles {
    pub backbone: Vec<LayerHandle>,
    pub rpn: [LayerHandle; 3],
    pub head: [LayerHandle; 3],
}

pub(crate) struct RpnOutput {
    pub cls: NodeId,
    pub reg: NodeId,
}

impl DetectorModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = spec.kernel_size;
        let mut backbone = Vec::new();
        let mut in_ch = 1;
        for &c in &spec.backbone_channels {
            backbone.push(glorot_conv(&mut rng, c, in_ch, k, k));
            in_ch = c;
        }
        let per = spec.anchors.per_center();
        let rpn_conv = glorot_conv(&mut rng, spec.rpn_channels, in_ch, 3, 3);
        let rpn_cls = glorot_conv(&mut rng, 2 * per, spec.rpn_channels, 1, 1);
        let rpn_reg = scaled(glorot_conv(&mut rng, 4 * per, spec.rpn_channels, 1, 1), 0.1);
        let pooled = in_ch * spec.roi_grid.0 * spec.roi_grid.1;
        let head_fc = glorot_linear(&mut rng, spec.head_hidden, pooled);
        let head_cls = glorot_linear(&mut rng, 2, spec.head_hidden);
        let head_reg = scaled(glorot_linear(&mut rng, 4, spec.head_hidden), 0.1);
        Ok(DetectorModel {
            spec,
            backbone,
            rpn_conv,
            rpn_cls,
            rpn_reg,
            head_fc,
            head_cls,
            head_reg,
        })
    }

    pub fn anchors_per_center(&self) -> usize {
        self.spec.anchors.per_center()
    }

    pub(crate) fn register(&self, tape: &mut GradientTape, trainable: Trainable) -> Handles {
        Handles {
            backbone: self.backbone.iter().map(|l| tape.layer(l, trainable.backbone)).collect(),
            rpn: [
                tape.layer(&self.rpn_conv, trainable.rpn),
                tape.layer(&self.rpn_cls, trainable.rpn),
                tape.layer(&self.rpn_reg, trainable.rpn),
            ],
            head: [
                tape.layer(&self.head_fc, trainable.head),
                tape.layer(&self.head_cls, trainable.head),
                tape.layer(&self.head_reg, trainable.head),
            ],
        }
    }

    pub(crate) fn backbone_forward(&self, tape: &mut GradientTape, h: &Handles, input: NodeId) -> Result<NodeId> {
        let pad = Padding::uniform(self.spec.kernel_size / 2);
        let mut x = input;
        for (i, layer) in h.backbone.iter().enumerate() {
            x = tape.conv2d(x, *layer, pad, Stride::ONE)?;
            x = tape.relu(x);
            if i < self.spec.pooled_blocks {
                x = tape.max_pool(x, (2, 2), Stride { rows: 2, cols: 2 })?;
            }
        }
        Ok(x)
    }

    pub(crate) fn rpn_forward(&self, tape: &mut GradientTape, h: &Handles, features: NodeId) -> Result<RpnOutput> {
        let hidden = tape.conv2d(features, h.rpn[0], Padding::uniform(1), Stride::ONE)?;
        let hidden = tape.relu(hidden);
        let cls = tape.conv2d(hidden, h.rpn[1], Padding::NONE, Stride::ONE)?;
        let reg = tape.conv2d(hidden, h.rpn[2], Padding::NONE, Stride::ONE)?;
        Ok(RpnOutput { cls, reg })
    }

    /// Returns `(class logits (R, 2), box deltas (R, 4))` nodes.
    pub(crate) fn head_forward(
        &self,
        tape: &mut GradientTape,
        h: &Handles,
        features: NodeId,
        windows: &[FeatureWindow],
    ) -> Result<(NodeId, NodeId)> {
        let pooled = tape.roi_pool(features, windows, self.spec.roi_grid)?;
        let hidden = tape.linear(pooled, h.head[0])?;
        let hidden = tape.relu(hidden);
        let cls = tape.linear(hidden, h.head[1])?;
        let reg = tape.linear(hidden, h.head[2])?;
        Ok((cls, reg))
    }

    /// Maps image-space boxes to feature windows; boxes missing the feature
    /// map are dropped. Returns the kept box indices alongside.
    pub(crate) fn windows(&self, boxes: &[BoundingBox]) -> (Vec<FeatureWindow>, Vec<usize>) {
        let f = self.spec.feature_extent();
        let scale = 1.0 / self.spec.feature_stride() as f64;
        let mut windows = Vec::with_capacity(boxes.len());
        let mut kept = Vec::with_capacity(boxes.len());
        for (i, b) in boxes.iter().enumerate() {
            if let Some((w, _expanded)) = FeatureWindow::from_box((b.x, b.y, b.w, b.h), scale, (f, f), self.spec.roi_grid) {
                windows.push(w);
                kept.push(i);
            }
        }
        (windows, kept)
    }

    /// Proposal boxes from the proposal network's outputs, highest
    /// objectness first.
    pub(crate) fn proposals(&self, cls: &Tensor, reg: &Tensor, anchors: &[BoundingBox], valid: (f64, f64)) -> Vec<Detection> {
        let (logits, deltas) = gather_rpn(cls, reg, self.anchors_per_center());
        let cfg = &self.spec.proposals;
        let mut scored: Vec<(usize, f64)> = logits.iter().map(neuron_probability).enumerate().collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(cfg.pre_nms_top_n);
        let candidates: Vec<Detection> = scored
            .into_iter()
            .filter_map(|(i, p)| {
                let b = decode(&anchors[i], &deltas[i]).clip(valid.0, valid.1)?;
                (b.w >= cfg.min_size && b.h >= cfg.min_size).then_some(Detection { bbox: b, score: p })
            })
            .collect();
        let mut kept = nms(&candidates, cfg.nms_iou);
        kept.truncate(cfg.post_nms_top_n);
        kept
    }

    fn check_tile(&self, tile: &GrayImage) -> Result<()> {
        let e = self.spec.tile_extent as u32;
        if tile.width() != e || tile.height() != e {
            return Err(Error::ExtentMismatch(format!(
                "tile is {}x{}, model expects {e}x{e}",
                tile.width(),
                tile.height()
            )));
        }
        Ok(())
    }

    /// Proposal boxes for a padded tile.
    pub fn propose(&self, tile: &GrayImage, valid: (u32, u32)) -> Result<Vec<Detection>> {
        self.check_tile(tile)?;
        let mut tape = GradientTape::new();
        let h = self.register(&mut tape, Trainable::NONE);
        let x = tape.constant(normalize_tile(tile, valid));
        let f = self.backbone_forward(&mut tape, &h, x)?;
        let rpn = self.rpn_forward(&mut tape, &h, f)?;
        let anchors = self.spec.anchors();
        Ok(self.proposals(tape.value(rpn.cls), tape.value(rpn.reg), &anchors, (valid.0 as f64, valid.1 as f64)))
    }

    /// Detections in tile coordinates with score at least the threshold,
    /// after non-maximum suppression.
    ///
    /// `tile` must have the model's padded extent; `valid` is the extent of
    /// real image content at its top-left, the rest being zero fill.
    pub fn detect_tile(&self, tile: &GrayImage, valid: (u32, u32), cfg: &InferenceConfig) -> Result<Vec<Detection>> {
        self.check_tile(tile)?;
        let mut tape = GradientTape::new();
        let h = self.register(&mut tape, Trainable::NONE);
        let x = tape.constant(normalize_tile(tile, valid));
        let f = self.backbone_forward(&mut tape, &h, x)?;
        let rpn = self.rpn_forward(&mut tape, &h, f)?;
        let anchors = self.spec.anchors();
        let limits = (valid.0 as f64, valid.1 as f64);
        let proposals = self.proposals(tape.value(rpn.cls), tape.value(rpn.reg), &anchors, limits);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BoundingBox> = proposals.iter().map(|d| d.bbox).collect();
        let (windows, kept) = self.windows(&boxes);
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let (cls, reg) = self.head_forward(&mut tape, &h, f, &windows)?;
        let cls = tape.value(cls).data();
        let reg = tape.value(reg).data();
        let mut dets = Vec::new();
        for (r, &bi) in kept.iter().enumerate() {
            let p = neuron_probability(&[cls[2 * r], cls[2 * r + 1]]);
            if p < cfg.score_threshold {
                continue;
            }
            let d = [reg[4 * r], reg[4 * r + 1], reg[4 * r + 2], reg[4 * r + 3]];
            if let Some(b) = decode(&boxes[bi], &d).clip(limits.0, limits.1) {
                dets.push(Detection { bbox: b, score: p });
            }
        }
        Ok(nms(&dets, cfg.nms_iou))
    }

    fn named_layers(&self) -> Vec<(String, &LayerParams)> {
        let mut out: Vec<(String, &LayerParams)> = self
            .backbone
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("backbone.{i}"), l))
            .collect();
        out.push(("rpn.conv".into(), &self.rpn_conv));
        out.push(("rpn.cls".into(), &self.rpn_cls));
        out.push(("rpn.reg".into(), &self.rpn_reg));
        out.push(("head.fc".into(), &self.head_fc));
        out.push(("head.cls".into(), &self.head_cls));
        out.push(("head.reg".into(), &self.head_reg));
        out
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        for (name, layer) in self.named_layers() {
            tensors.push((format!("{name}.kernels"), layer.kernels.clone()));
            tensors.push((format!("{name}.biases"), layer.biases.clone()));
        }
        Ok(Checkpoint {
            meta: serde_json::json!({ "kind": CHECKPOINT_KIND, "spec": self.spec }),
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "not a detector checkpoint".into(),
            });
        }
        let spec: ModelSpec = serde_json::from_value(ck.meta["spec"].clone())?;
        spec.validate()?;
        let layer = |name: &str| -> Result<LayerParams> {
            LayerParams::new(
                ck.get(&format!("{name}.kernels"))?.clone(),
                ck.get(&format!("{name}.biases"))?.clone(),
            )
        };
        let backbone = (0..spec.backbone_channels.len())
            .map(|i| layer(&format!("backbone.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let model = DetectorModel {
            backbone,
            rpn_conv: layer("rpn.conv")?,
            rpn_cls: layer("rpn.cls")?,
            rpn_reg: layer("rpn.reg")?,
            head_fc: layer("head.fc")?,
            head_cls: layer("head.cls")?,
            head_reg: layer("head.reg")?,
            spec,
        };
        // Shapes must agree with a freshly built model of the same spec.
        let reference = DetectorModel::new(model.spec.clone(), 0)?;
        for ((name, a), (_, b)) in model.named_layers().iter().zip(reference.named_layers()) {
            if a.kernels.shape() != b.kernels.shape() || a.biases.shape() != b.biases.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!("layer {name} has unexpected shape"),
                });
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_checkpoint()?.to_bytes()
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

fn scaled(mut l: LayerParams, factor: f64) -> LayerParams {
    l.kernels.scale(factor);
    l
}

/// Splits proposal-network maps into per-anchor logits and deltas. Anchor
/// `(row, col, k)` reads channels `2k..2k+2` and `4k..4k+4`.
pub(crate) fn gather_rpn(cls: &Tensor, reg: &Tensor, per: usize) -> (Vec<[f64; 2]>, Vec<[f64; 4]>) {
    let shape = cls.shape();
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let c = cls.data();
    let r = reg.data();
    let mut logits = Vec::with_capacity(plane * per);
    let mut deltas = Vec::with_capacity(plane * per);
    for cell in 0..plane {
        for k in 0..per {
            logits.push([c[(2 * k) * plane + cell], c[(2 * k + 1) * plane + cell]]);
            deltas.push([
                r[(4 * k) * plane + cell],
                r[(4 * k + 1) * plane + cell],
                r[(4 * k + 2) * plane + cell],
                r[(4 * k + 3) * plane + cell],
            ]);
        }
    }
    (logits, deltas)
}

/// Inverse layout of [`gather_rpn`] for gradients.
pub(crate) fn scatter_rpn(
    grad_logits: &[[f64; 2]],
    grad_deltas: &[[f64; 4]],
    per: usize,
    (h, w): (usize, usize),
) -> (Tensor, Tensor) {
    let plane = h * w;
    let mut gc = Tensor::zeros(&[2 * per, h, w]);
    let mut gr = Tensor::zeros(&[4 * per, h, w]);
    let (gcd, grd) = (gc.data_mut(), gr.data_mut());
    for cell in 0..plane {
        for k in 0..per {
            let i = cell * per + k;
            gcd[(2 * k) * plane + cell] = grad_logits[i][0];
            gcd[(2 * k + 1) * plane + cell] = grad_logits[i][1];
            for d in 0..4 {
                grd[(4 * k + d) * plane + cell] = grad_deltas[i][d];
            }
        }
    }
    (gc, gr)
}

/// Input tensor `(1, H, W)` for a tile: pixel darkness relative to the tile's
/// median over the valid region, scaled to `[-1, 1]`. Zero-fill outside the
/// valid region maps to 0.
pub fn normalize_tile(tile: &GrayImage, valid: (u32, u32)) -> Tensor {
    let (w, h) = (tile.width() as usize, tile.height() as usize);
    let (vw, vh) = ((valid.0 as usize).min(w), (valid.1 as usize).min(h));
    let raw = tile.as_raw();
    let mut hist = [0usize; 256];
    for y in 0..vh {
        for &v in &raw[y * w..y * w + vw] {
            hist[v as usize] += 1;
        }
    }
    let total = vw * vh;
    let median = if total == 0 {
        0.0
    } else {
        let mut acc = 0;
        let mut m = 0;
        for (v, &c) in hist.iter().enumerate() {
            acc += c;
            if 2 * acc >= total {
                m = v;
                break;
            }
        }
        m as f64
    };
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        if y < vh && x < vw {
            (median - raw[i] as f64) / 255.0
        } else {
            0.0
        }
    })
}
