//! Whole-section detection: tiling with zero padding, per-tile detection,
//! center marking and assembly of the section-wide binary neuron map.

mod map;

use std::fmt;
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Pixel};
use serde::{Deserialize, Serialize};

use crate::detector::{nms, DetectorModel, Detection, Frame, InferenceConfig};
use crate::error::{Error, Result};

pub use map::{BinaryNeuronMap, MapSidecar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Age {
    P4,
    P14,
    P56,
}

impl Age {
    pub const ALL: [Age; 3] = [Age::P4, Age::P14, Age::P56];
}

impl fmt::Display for Age {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Age::P4 => "P4",
            Age::P14 => "P14",
            Age::P56 => "P56",
        })
    }
}

impl FromStr for Age {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P4" => Ok(Age::P4),
            "P14" => Ok(Age::P14),
            "P56" => Ok(Age::P56),
            _ => Err(Error::InvalidArgument(format!("unknown age {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Marker {
    #[serde(rename = "GAD1")]
    Gad1,
    #[serde(rename = "VGAT")]
    Vgat,
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Marker::Gad1 => "GAD1",
            Marker::Vgat => "VGAT",
        })
    }
}

impl FromStr for Marker {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GAD1" => Ok(Marker::Gad1),
            "VGAT" => Ok(Marker::Vgat),
            _ => Err(Error::InvalidArgument(format!("unknown marker {s:?}"))),
        }
    }
}

/// A grayscale brain-section raster with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionImage {
    pub id: String,
    pub pixels: GrayImage,
    pub age: Age,
    pub marker: Marker,
    /// Medio-lateral position of the section within its brain.
    pub ml_index: u32,
}

/// One tile of a section, zero-padded to `(tile_size + 1)` squared.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile<P: Pixel<Subpixel = u8>> {
    pub section_id: String,
    pub row: u32,
    pub col: u32,
    /// Top-left of the tile in section pixels.
    pub origin: (u32, u32),
    /// Extent of real section content at the tile's top-left.
    pub valid: (u32, u32),
    pub pixels: ImageBuffer<P, Vec<u8>>,
}

/// `(rows, cols)` of the tile grid covering `width x height`.
pub fn grid_shape(width: u32, height: u32, tile_size: u32) -> (u32, u32) {
    (height.div_ceil(tile_size), width.div_ceil(tile_size))
}

/// Splits any 8-bit raster into padded tiles in row-major grid order.
pub fn split_raster<P: Pixel<Subpixel = u8>>(section_id: &str, raster: &ImageBuffer<P, Vec<u8>>, tile_size: u32) -> Result<Vec<Tile<P>>> {
    if tile_size == 0 {
        return Err(Error::InvalidArgument("tile size must be at least 1".into()));
    }
    let (w, h) = raster.dimensions();
    let (rows, cols) = grid_shape(w, h, tile_size);
    let ext = tile_size + 1;
    let mut tiles = Vec::with_capacity((rows * cols) as usize);
    for row in 0..rows {
        for col in 0..cols {
            let (x0, y0) = (col * tile_size, row * tile_size);
            let valid = ((w - x0).min(tile_size), (h - y0).min(tile_size));
            let mut pixels = ImageBuffer::<P, Vec<u8>>::new(ext, ext);
            for y in 0..valid.1 {
                for x in 0..valid.0 {
                    pixels.put_pixel(x, y, *raster.get_pixel(x0 + x, y0 + y));
                }
            }
            tiles.push(Tile {
                section_id: section_id.to_string(),
                row,
                col,
                origin: (x0, y0),
                valid,
                pixels,
            });
        }
    }
    Ok(tiles)
}

pub fn split_section(section: &SectionImage, tile_size: u32) -> Result<Vec<Tile<image::Luma<u8>>>> {
    split_raster(&section.id, &section.pixels, tile_size)
}

/// Drops padding and zero fill and reassembles the section raster.
pub fn stitch_tiles<P: Pixel<Subpixel = u8>>(tiles: &[Tile<P>], width: u32, height: u32, tile_size: u32) -> Result<ImageBuffer<P, Vec<u8>>> {
    let (rows, cols) = grid_shape(width, height, tile_size);
    let mut seen = vec![false; (rows * cols) as usize];
    let mut out = ImageBuffer::<P, Vec<u8>>::new(width, height);
    for t in tiles {
        if t.row >= rows || t.col >= cols {
            return Err(Error::InvalidArgument(format!("tile ({}, {}) outside the {rows}x{cols} grid", t.row, t.col)));
        }
        seen[(t.row * cols + t.col) as usize] = true;
        for y in 0..t.valid.1 {
            for x in 0..t.valid.0 {
                out.put_pixel(t.origin.0 + x, t.origin.1 + y, *t.pixels.get_pixel(x, y));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::MissingTile {
            row: i as u32 / cols,
            col: i as u32 % cols,
        });
    }
    Ok(out)
}

/// Binary `tile_size x tile_size` raster of detection centers, padding
/// removed. Center = `floor(origin + extent / 2)`; centers in the padding
/// ring or outside the tile are discarded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileMask {
    pub size: u32,
    pub data: Vec<u8>,
}

impl TileMask {
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.size + x) as usize]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

pub fn box_center_pixel(d: &Detection) -> (i64, i64) {
    ((d.bbox.x + d.bbox.w / 2.0).floor() as i64, (d.bbox.y + d.bbox.h / 2.0).floor() as i64)
}

pub fn mark_centers(detections: &[Detection], tile_size: u32) -> TileMask {
    let mut data = vec![0u8; (tile_size * tile_size) as usize];
    for d in detections {
        let (cx, cy) = box_center_pixel(d);
        if cx >= 0 && cy >= 0 && cx < tile_size as i64 && cy < tile_size as i64 {
            data[cy as usize * tile_size as usize + cx as usize] = 1;
        }
    }
    TileMask { size: tile_size, data }
}

/// Concatenates per-tile masks, keyed by `(row, col)`, into the section map.
pub fn assemble_map(tiles: &[((u32, u32), TileMask)], width: u32, height: u32, tile_size: u32) -> Result<BinaryNeuronMap> {
    let (rows, cols) = grid_shape(width, height, tile_size);
    let mut seen = vec![false; (rows * cols) as usize];
    let mut map = BinaryNeuronMap::new(width, height);
    for ((row, col), mask) in tiles {
        if *row >= rows || *col >= cols || mask.size != tile_size {
            return Err(Error::InvalidArgument(format!("tile ({row}, {col}) does not fit the {rows}x{cols} grid")));
        }
        let slot = &mut seen[(row * cols + col) as usize];
        if *slot {
            return Err(Error::InvalidArgument(format!("tile ({row}, {col}) given twice")));
        }
        *slot = true;
        let (x0, y0) = (col * tile_size, row * tile_size);
        for y in 0..tile_size.min(height - y0) {
            for x in 0..tile_size.min(width - x0) {
                if mask.get(x, y) == 1 {
                    map.set(x0 + x, y0 + y);
                }
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::MissingTile {
            row: i as u32 / cols,
            col: i as u32 % cols,
        });
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SectionConfig {
    pub tile_size: u32,
    pub inference: InferenceConfig,
    /// IoU threshold of the deduplication pass across tile borders.
    pub cross_tile_nms: f64,
}

impl Default for SectionConfig {
    fn default() -> Self {
        SectionConfig {
            tile_size: 100,
            inference: InferenceConfig::default(),
            cross_tile_nms: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectionDetections {
    /// Detections in section coordinates after cross-tile suppression.
    pub detections: Vec<Detection>,
    pub map: BinaryNeuronMap,
}

/// Runs the detector over every tile of `section`.
pub fn detect_section(model: &DetectorModel, section: &SectionImage, cfg: &SectionConfig) -> Result<SectionDetections> {
    let tile_size = cfg.tile_size;
    if tile_size as usize + 1 != model.spec.tile_extent {
        return Err(Error::ExtentMismatch(format!(
            "tile size {tile_size} does not match the model's {}-pixel padded extent",
            model.spec.tile_extent
        )));
    }
    let tiles = split_section(section, tile_size)?;
    // (tile index, detection in section frame)
    let mut all: Vec<(usize, Detection)> = Vec::new();
    for (ti, t) in tiles.iter().enumerate() {
        for d in model.detect_tile(&t.pixels, t.valid, &cfg.inference)? {
            let bbox = d.bbox.translate(t.origin.0 as f64, t.origin.1 as f64, Frame::Section);
            all.push((ti, Detection { bbox, score: d.score }));
        }
    }
    let kept = dedupe(&all, cfg.cross_tile_nms);
    let mut per_tile: Vec<Vec<Detection>> = vec![Vec::new(); tiles.len()];
    for &(ti, d) in &kept {
        let t = &tiles[ti];
        let mut local = d;
        local.bbox = d.bbox.translate(-(t.origin.0 as f64), -(t.origin.1 as f64), Frame::Tile);
        per_tile[ti].push(local);
    }
    let masks: Vec<((u32, u32), TileMask)> = tiles
        .iter()
        .zip(&per_tile)
        .map(|(t, dets)| ((t.row, t.col), mark_centers(dets, tile_size)))
        .collect();
    let map = assemble_map(&masks, section.pixels.width(), section.pixels.height(), tile_size)?;
    Ok(SectionDetections {
        detections: kept.into_iter().map(|(_, d)| d).collect(),
        map,
    })
}

/// Section-frame suppression that remembers each survivor's tile.
fn dedupe(all: &[(usize, Detection)], iou_threshold: f64) -> Vec<(usize, Detection)> {
    let dets: Vec<Detection> = all.iter().map(|(_, d)| *d).collect();
    let kept = nms(&dets, iou_threshold);
    // nms returns a subsequence in score order; recover tiles by matching
    // the first unused identical detection.
    let mut used = vec![false; all.len()];
    kept.into_iter()
        .map(|k| {
            let i = all
                .iter()
                .enumerate()
                .position(|(i, (_, d))| !used[i] && *d == k)
                .expect("nms output is a subset of its input");
            used[i] = true;
            all[i]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use image::{Luma, Rgb, RgbImage};

    use super::*;
    use crate::detector::BoundingBox;

    fn det(x: f64, y: f64, w: f64, h: f64) -> Detection {
        Detection {
            bbox: BoundingBox::tile(x, y, w, h).unwrap(),
            score: 0.9,
        }
    }

    #[test]
    fn tile_counts() {
        for ((w, h), n) in [((300, 200), 6), ((100, 100), 1), ((101, 100), 2)] {
            let img = GrayImage::new(w, h);
            let tiles = split_raster("s", &img, 100).unwrap();
            assert_eq!(tiles.len(), n);
            assert!(tiles.iter().all(|t| t.pixels.dimensions() == (101, 101)));
        }
    }

    #[test]
    fn second_tile_is_mostly_zero_fill() {
        let img = GrayImage::from_pixel(101, 100, Luma([200]));
        let tiles = split_raster("s", &img, 100).unwrap();
        assert_eq!(tiles[1].valid, (1, 100));
        assert_eq!(tiles[1].pixels.as_raw().iter().filter(|&&v| v != 0).count(), 100);
    }

    #[test]
    fn padding_is_zero() {
        let img = GrayImage::from_pixel(100, 100, Luma([255]));
        let t = &split_raster("s", &img, 100).unwrap()[0];
        for i in 0..101 {
            assert_eq!(t.pixels.get_pixel(100, i)[0], 0);
            assert_eq!(t.pixels.get_pixel(i, 100)[0], 0);
        }
    }

    #[test]
    fn rgb_round_trip() {
        let img = RgbImage::from_fn(37, 23, |x, y| Rgb([x as u8, y as u8, (x * y) as u8]));
        let tiles = split_raster("s", &img, 10).unwrap();
        assert_eq!(stitch_tiles(&tiles, 37, 23, 10).unwrap(), img);
    }

    #[test]
    fn center_marking() {
        assert_eq!(mark_centers(&[], 100).count_ones(), 0);
        let m = mark_centers(&[det(10.0, 10.0, 4.0, 4.0)], 100);
        assert_eq!(m.count_ones(), 1);
        assert_eq!(m.get(12, 12), 1);
        let m = mark_centers(&[det(10.0, 10.0, 4.0, 4.0), det(11.0, 11.0, 2.0, 2.0)], 100);
        assert_eq!(m.count_ones(), 1);
    }

    #[test]
    fn padding_ring_centers_are_discarded() {
        let m = mark_centers(&[det(98.0, 40.0, 4.0, 4.0)], 100);
        assert_eq!(m.count_ones(), 0);
    }

    #[test]
    fn assembly_offsets_and_missing_tiles() {
        let mut one = TileMask {
            size: 100,
            data: vec![0; 10000],
        };
        one.data[5 * 100 + 5] = 1;
        let zero = TileMask {
            size: 100,
            data: vec![0; 10000],
        };
        // tile (row 0, col 1) holds the mark: x = 105, y = 5
        let map = assemble_map(&[((0, 0), zero.clone()), ((0, 1), one.clone())], 200, 100, 100).unwrap();
        assert_eq!(map.count_ones(), 1);
        assert_eq!(map.get(105, 5), 1);
        match assemble_map(&[((0, 0), zero)], 200, 100, 100) {
            Err(Error::MissingTile { row: 0, col: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }
}
