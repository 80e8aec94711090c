//! Per-region masks from color-coded atlases and neural densities.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::{warp_labels, AffineTransform};
use crate::section::{Age, BinaryNeuronMap, Marker};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: u32,
    pub name: String,
    pub acronym: String,
    pub r: u8,
    pub g: u8,
    pub b: u8,
    /// Composite region this one rolls up into.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<u32>,
}

impl Region {
    pub fn rgb(&self) -> Rgb<u8> {
        Rgb([self.r, self.g, self.b])
    }
}

/// Leaf regions plus optional composite parents that own no pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionTable {
    regions: Vec<Region>,
}

impl RegionTable {
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut codes = HashSet::new();
        for r in &regions {
            if !ids.insert(r.id) {
                return Err(Error::InvalidArgument(format!("duplicate region id {}", r.id)));
            }
            if !codes.insert([r.r, r.g, r.b]) {
                return Err(Error::InvalidArgument(format!("region {} reuses color {:?}", r.id, [r.r, r.g, r.b])));
            }
        }
        for r in &regions {
            if let Some(p) = r.parent {
                if !ids.contains(&p) || p == r.id {
                    return Err(Error::InvalidArgument(format!("region {} has unknown parent {p}", r.id)));
                }
            }
        }
        Ok(RegionTable { regions })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn get(&self, id: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    /// Tab-separated with header `id name acronym r g b [parent]`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().delimiter(b'\t').comment(Some(b'#')).from_path(path)?;
        let regions = rd.deserialize().collect::<std::result::Result<Vec<Region>, _>>()?;
        RegionTable::new(regions)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
        wr.write_record(["id", "name", "acronym", "r", "g", "b", "parent"])?;
        for r in &self.regions {
            wr.write_record([
                r.id.to_string(),
                r.name.clone(),
                r.acronym.clone(),
                r.r.to_string(),
                r.g.to_string(),
                r.b.to_string(),
                r.parent.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlasConfig {
    /// Codes that mark empty space rather than a region.
    pub background: Vec<[u8; 3]>,
    /// Off-palette pixels within this RGB distance snap to the nearest
    /// region color; farther ones become background. `None` rejects them.
    pub snap_distance: Option<f64>,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            background: vec![[0, 0, 0], [255, 255, 255]],
            snap_distance: Some(10.0),
        }
    }
}

/// Color-coded label raster with its region table.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionAtlas {
    labels: RgbImage,
    table: RegionTable,
    background: Vec<[u8; 3]>,
}

impl RegionAtlas {
    pub fn new(mut labels: RgbImage, table: RegionTable, cfg: &AtlasConfig) -> Result<Self> {
        let background = if cfg.background.is_empty() { vec![[0, 0, 0]] } else { cfg.background.clone() };
        for r in table.regions() {
            if background.contains(&[r.r, r.g, r.b]) {
                return Err(Error::InvalidArgument(format!("region {} uses a background color", r.id)));
            }
        }
        let palette: HashSet<[u8; 3]> = table.regions().iter().map(|r| [r.r, r.g, r.b]).collect();
        let mut snapped: HashMap<[u8; 3], [u8; 3]> = HashMap::new();
        for px in labels.pixels_mut() {
            let code = px.0;
            if palette.contains(&code) || background.contains(&code) {
                continue;
            }
            let Some(limit) = cfg.snap_distance else {
                return Err(Error::Format {
                    what: "atlas",
                    detail: format!("color {code:?} is neither a region nor background"),
                });
            };
            let to = *snapped.entry(code).or_insert_with(|| {
                palette
                    .iter()
                    .map(|p| (rgb_distance(p, &code), *p))
                    .filter(|(d, _)| *d <= limit)
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .map(|(_, p)| p)
                    .unwrap_or(background[0])
            });
            px.0 = to;
        }
        Ok(RegionAtlas { labels, table, background })
    }

    pub fn labels(&self) -> &RgbImage {
        &self.labels
    }

    pub fn table(&self) -> &RegionTable {
        &self.table
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.labels.dimensions()
    }

    pub fn is_background(&self, code: [u8; 3]) -> bool {
        self.background.contains(&code)
    }

    pub fn region_mask(&self, id: u32) -> Result<RegionMask> {
        let region = self.table.get(id).ok_or_else(|| Error::NotFound(format!("region {id}")))?;
        let code = region.rgb();
        let data: Vec<u8> = self.labels.pixels().map(|p| u8::from(*p == code)).collect();
        let area = data.iter().filter(|&&v| v == 1).count();
        let (width, height) = self.labels.dimensions();
        Ok(RegionMask {
            region: id,
            width,
            height,
            data,
            area,
        })
    }

    /// Nearest-neighbour warp onto a `width × height` target; uncovered
    /// pixels take the first background code.
    pub fn warped(&self, transform: &AffineTransform, width: u32, height: u32) -> Result<RegionAtlas> {
        let labels = warp_labels(&self.labels, transform, width, height, Rgb(self.background[0]))?;
        Ok(RegionAtlas {
            labels,
            table: self.table.clone(),
            background: self.background.clone(),
        })
    }
}

fn rgb_distance(a: &[u8; 3], b: &[u8; 3]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub region: u32,
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
    pub area: usize,
}

/// Centers inside a region, its area and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionDensity {
    pub count: usize,
    pub area: usize,
    pub density: f64,
}

pub fn density(mask: &RegionMask, map: &BinaryNeuronMap) -> Result<RegionDensity> {
    if (mask.width, mask.height) != map.dimensions() {
        return Err(Error::ExtentMismatch(format!(
            "mask {}x{} vs map {}x{}",
            mask.width,
            mask.height,
            map.width(),
            map.height()
        )));
    }
    if mask.area == 0 {
        return Err(Error::ZeroArea(mask.region));
    }
    let count = mask.data.iter().zip(map.as_raw()).filter(|(&m, &v)| m == 1 && v == 1).count();
    Ok(RegionDensity {
        count,
        area: mask.area,
        density: count as f64 / mask.area as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRecord {
    pub region: u32,
    pub age: Age,
    pub marker: Marker,
    pub section: String,
    pub density: f64,
    pub count: usize,
    pub area: usize,
}

/// One section's neuron map with its registered atlas.
#[derive(Debug, Clone, Copy)]
pub struct SectionQuantInput<'a> {
    pub section: &'a str,
    pub age: Age,
    pub marker: Marker,
    pub map: &'a BinaryNeuronMap,
    pub atlas: &'a RegionAtlas,
}

/// One record per region present in the section, in table order.
pub fn quantify_section(input: &SectionQuantInput<'_>) -> Result<Vec<DensityRecord>> {
    let atlas = input.atlas;
    if atlas.dimensions() != input.map.dimensions() {
        return Err(Error::ExtentMismatch(format!(
            "section {}: atlas {:?} vs map {:?}",
            input.section,
            atlas.dimensions(),
            input.map.dimensions()
        )));
    }
    let index: HashMap<[u8; 3], usize> = atlas.table.regions().iter().enumerate().map(|(i, r)| ([r.r, r.g, r.b], i)).collect();
    let n = atlas.table.regions().len();
    let (mut area, mut count) = (vec![0usize; n], vec![0usize; n]);
    for (px, &hit) in atlas.labels.pixels().zip(input.map.as_raw()) {
        if let Some(&i) = index.get(&px.0) {
            area[i] += 1;
            count[i] += hit as usize;
        }
    }
    let mut out = Vec::new();
    for (i, r) in atlas.table.regions().iter().enumerate() {
        if area[i] == 0 {
            log::debug!("region {} absent from section {}", r.id, input.section);
            continue;
        }
        out.push(DensityRecord {
            region: r.id,
            age: input.age,
            marker: input.marker,
            section: input.section.to_string(),
            density: count[i] as f64 / area[i] as f64,
            count: count[i],
            area: area[i],
        });
    }
    Ok(out)
}

/// Quantifies every section; failures are returned per section and do not
/// stop the others.
pub fn quantify_brain(inputs: &[SectionQuantInput<'_>]) -> (Vec<DensityRecord>, Vec<(String, Error)>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for input in inputs {
        match quantify_section(input) {
            Ok(r) => records.extend(r),
            Err(e) => failures.push((input.section.to_string(), e)),
        }
    }
    (records, failures)
}

/// Adds one record per composite region and section by summing the counts
/// and areas of its descendants.
pub fn with_parent_records(records: &[DensityRecord], table: &RegionTable) -> Vec<DensityRecord> {
    let ancestors = |mut id: u32| {
        let mut out = Vec::new();
        while let Some(p) = table.get(id).and_then(|r| r.parent) {
            out.push(p);
            id = p;
        }
        out
    };
    let mut sums: BTreeMap<(String, u32), (Age, Marker, usize, usize)> = BTreeMap::new();
    for r in records {
        for p in ancestors(r.region) {
            let e = sums.entry((r.section.clone(), p)).or_insert((r.age, r.marker, 0, 0));
            e.2 += r.count;
            e.3 += r.area;
        }
    }
    let mut out = records.to_vec();
    for ((section, region), (age, marker, count, area)) in sums {
        out.push(DensityRecord {
            region,
            age,
            marker,
            section,
            density: count as f64 / area as f64,
            count,
            area,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGroup {
    pub region: u32,
    pub marker: Marker,
    pub age: Age,
    pub densities: Vec<f64>,
    pub mean: f64,
}

impl DensityGroup {
    pub fn sections(&self) -> usize {
        self.densities.len()
    }
}

/// Groups by region, marker and age, in that sort order. Densities within a
/// group are ordered by section id so the result does not depend on input
/// order.
pub fn aggregate(records: &[DensityRecord]) -> Vec<DensityGroup> {
    let mut groups: BTreeMap<(u32, Marker, Age), Vec<(&str, f64)>> = BTreeMap::new();
    for r in records {
        groups.entry((r.region, r.marker, r.age)).or_default().push((&r.section, r.density));
    }
    groups
        .into_iter()
        .map(|((region, marker, age), mut v)| {
            v.sort_by(|a, b| a.0.cmp(b.0).then(a.1.total_cmp(&b.1)));
            let densities: Vec<f64> = v.into_iter().map(|(_, d)| d).collect();
            let mean = densities.iter().sum::<f64>() / densities.len() as f64;
            DensityGroup {
                region,
                marker,
                age,
                densities,
                mean,
            }
        })
        .collect()
}

pub fn write_density_tsv(records: &[DensityRecord], path: &Path) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    wr.write_record(["section", "age", "marker", "region", "count", "area", "density"])?;
    for r in records {
        wr.write_record([
            r.section.clone(),
            r.age.to_string(),
            r.marker.to_string(),
            r.region.to_string(),
            r.count.to_string(),
            r.area.to_string(),
            format!("{:.9}", r.density),
        ])?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct DensityRow {
    section: String,
    age: String,
    marker: String,
    region: u32,
    count: usize,
    area: usize,
}

/// Reads a table written by [`write_density_tsv`]. Densities are recomputed
/// from the integer counts and areas, so they are exact.
pub fn read_density_tsv(path: &Path) -> Result<Vec<DensityRecord>> {
    let mut rd = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
    rd.deserialize::<DensityRow>()
        .map(|row| {
            let row = row?;
            if row.area == 0 {
                return Err(Error::ZeroArea(row.region));
            }
            Ok(DensityRecord {
                region: row.region,
                age: row.age.parse()?,
                marker: row.marker.parse()?,
                section: row.section,
                density: row.count as f64 / row.area as f64,
                count: row.count,
                area: row.area,
            })
        })
        .collect()
}
