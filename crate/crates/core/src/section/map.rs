use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Section-wide raster with 1 at every detected neuron center.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryNeuronMap {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

/// Record stored next to a persisted map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub section_id: String,
    pub model_checksum: String,
    pub tile_size: u32,
    pub width: u32,
    pub height: u32,
    pub ones: usize,
}

impl BinaryNeuronMap {
    pub fn new(width: u32, height: u32) -> Self {
        BinaryNeuronMap {
            width,
            height,
            data: vec![0; (width as usize) * (height as usize)],
        }
    }

    /// From a row-major 0/1 buffer.
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::Shape(format!("{} values for a {width}x{height} map", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("map values must be 0 or 1".into()));
        }
        Ok(BinaryNeuronMap { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32) {
        self.data[y as usize * self.width as usize + x as usize] = 1;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Writes a 1-bit grayscale PNG (1 = white).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width, self.height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
        let stride = (self.width as usize).div_ceil(8);
        let mut packed = vec![0u8; stride * self.height as usize];
        for y in 0..self.height as usize {
            for x in 0..self.width as usize {
                if self.data[y * self.width as usize + x] == 1 {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer.write_image_data(&packed).map_err(|e| png_err(path, e))?;
        writer.finish().map_err(|e| png_err(path, e))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
        let info = reader.info();
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
            return Err(Error::Format {
                what: "neuron map",
                detail: format!("{} is not a 1-bit grayscale PNG", path.display()),
            });
        }
        let (w, h) = (info.width, info.height);
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let frame = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
        let stride = frame.line_size;
        let mut data = vec![0u8; (w as usize) * (h as usize)];
        for y in 0..h as usize {
            for x in 0..w as usize {
                data[y * w as usize + x] = (buf[y * stride + x / 8] >> (7 - x % 8)) & 1;
            }
        }
        BinaryNeuronMap::from_raw(w, h, data)
    }

    /// Saves `<stem>.png` and `<stem>.json`.
    pub fn save_with_sidecar(&self, stem: &Path, section_id: &str, model_checksum: &str, tile_size: u32) -> Result<()> {
        self.save_png(&stem.with_extension("png"))?;
        let sidecar = MapSidecar {
            section_id: section_id.to_string(),
            model_checksum: model_checksum.to_string(),
            tile_size,
            width: self.width,
            height: self.height,
            ones: self.count_ones(),
        };
        let path = stem.with_extension("json");
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &sidecar)?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        what: "png",
        detail: format!("{}: {e}", path.display()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BinaryNeuronMap::new(13, 7);
        m.set(0, 0);
        m.set(12, 6);
        m.set(8, 3);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(BinaryNeuronMap::load_png(&p).unwrap(), m);
    }

    #[test]
    fn rejects_non_binary() {
        assert!(BinaryNeuronMap::from_raw(2, 1, vec![0, 2]).is_err());
    }
}
