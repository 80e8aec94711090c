//! Synthetic three-age datasets: one atlas with a paired reference image
//! per age, and expression sections whose regional densities follow a
//! chosen developmental pattern per region.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::brain::{generate_brain, SectionRenderSpec, SyntheticBrainSpec};
use super::manifest::{AtlasEntry, DatasetManifest, SectionEntry};
use crate::error::{Error, Result};
use crate::registration::AffineTransform;
use crate::section::{Age, Marker};
use crate::stats::{ClusterGenerator, Pattern};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub brain: SyntheticBrainSpec,
    pub markers: Vec<Marker>,
    /// Per-region density model; `sections` is the count per age and marker.
    pub generator: ClusterGenerator,
    /// Pattern of region `i` is `patterns[i % patterns.len()]`.
    pub patterns: Vec<Pattern>,
    pub render: SectionRenderSpec,
    /// Largest section misplacement relative to its atlas.
    pub max_rotation_deg: f64,
    pub max_scale_change: f64,
    /// As a fraction of the image width and height.
    pub max_shift: f64,
    /// Sections are drawn in the atlas frame and the atlases are marked as
    /// already registered.
    pub prealigned: bool,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            brain: SyntheticBrainSpec {
                width: 640,
                height: 480,
                ..Default::default()
            },
            markers: vec![Marker::Gad1],
            generator: ClusterGenerator {
                sections: 8,
                base_density: 0.0015,
                ..ClusterGenerator::default()
            },
            patterns: Pattern::OBSERVED.to_vec(),
            render: SectionRenderSpec::default(),
            max_rotation_deg: 4.0,
            max_scale_change: 0.04,
            max_shift: 0.03,
            prealigned: false,
            seed: 0,
        }
    }
}

/// What was planted in one section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionTruth {
    pub id: String,
    pub age: Age,
    pub marker: Marker,
    pub ml_index: u32,
    /// Atlas frame to section frame.
    pub placement: AffineTransform,
    /// Planted density per region, in region-table order.
    pub densities: Vec<f64>,
    pub planted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTruth {
    /// `(region id, pattern)` for every region.
    pub patterns: Vec<(u32, Pattern)>,
    pub sections: Vec<SectionTruth>,
}

impl DatasetTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "truth.json";

pub fn section_id(age: Age, marker: Marker, ml_index: u32) -> String {
    format!("{age}-{marker}-{ml_index:02}")
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes atlases, sections, `truth.json` and a checksummed
/// `manifest.json` under `dir`.
pub fn generate_dataset(spec: &SyntheticDatasetSpec, dir: &Path) -> Result<(DatasetManifest, DatasetTruth)> {
    if spec.markers.is_empty() || spec.patterns.is_empty() {
        return Err(Error::InvalidArgument("dataset needs at least one marker and one pattern".into()));
    }
    if spec.generator.sections == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one section per group".into()));
    }
    let mut markers = spec.markers.clone();
    markers.sort();
    markers.dedup();
    ensure_dir(&dir.join("sections"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // One anatomy for every age, so that density differences between ages
    // come only from the injected patterns.
    let brain = generate_brain(&spec.brain)?;
    let mut manifest = DatasetManifest::default();
    for age in Age::ALL {
        let rel = PathBuf::from("atlases").join(age.to_string());
        ensure_dir(&dir.join(&rel))?;
        let entry = AtlasEntry {
            id: age.to_string(),
            labels: rel.join("labels.png"),
            regions: rel.join("regions.tsv"),
            nissl: rel.join("nissl.png"),
            registered: spec.prealigned,
        };
        brain.atlas.labels().save(dir.join(&entry.labels))?;
        brain.atlas.table().save(&dir.join(&entry.regions))?;
        brain.nissl.save(dir.join(&entry.nissl))?;
        manifest.atlases.push(entry);
    }

    let regions: Vec<u32> = brain.atlas.table().regions().iter().map(|r| r.id).collect();
    let patterns: Vec<(u32, Pattern)> = regions.iter().enumerate().map(|(i, &id)| (id, spec.patterns[i % spec.patterns.len()])).collect();

    // densities[marker][region][age][section]
    let mut densities = Vec::new();
    for _ in &markers {
        let mut per_region = Vec::new();
        for &(_, pattern) in &patterns {
            per_region.push(spec.generator.sample(pattern, &mut rng)?);
        }
        densities.push(per_region);
    }

    let (w, h) = brain.dimensions();
    let mut truth = Vec::new();
    for (k, age) in Age::ALL.iter().enumerate() {
        for (mi, &marker) in markers.iter().enumerate() {
            for s in 0..spec.generator.sections {
                let id = section_id(*age, marker, s as u32);
                let placement = if spec.prealigned {
                    AffineTransform::IDENTITY
                } else {
                    let deg = rng.gen_range(-1.0..=1.0) * spec.max_rotation_deg;
                    let scale = 1.0 + rng.gen_range(-1.0..=1.0) * spec.max_scale_change;
                    let dx = rng.gen_range(-1.0..=1.0) * spec.max_shift * w as f64;
                    let dy = rng.gen_range(-1.0..=1.0) * spec.max_shift * h as f64;
                    AffineTransform::similarity(deg, scale, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, dx, dy)
                };
                let d: Vec<f64> = densities[mi].iter().map(|r| r[k][s]).collect();
                let rendered = brain.render_section(&placement, &d, &spec.render, &mut rng)?;
                let image = PathBuf::from("sections").join(format!("{id}.png"));
                rendered.image.save(dir.join(&image))?;
                manifest.sections.push(SectionEntry {
                    id: id.clone(),
                    image,
                    expression: None,
                    age: *age,
                    marker,
                    ml_index: s as u32,
                    atlas: age.to_string(),
                });
                truth.push(SectionTruth {
                    id,
                    age: *age,
                    marker,
                    ml_index: s as u32,
                    placement,
                    densities: d,
                    planted: rendered.centers.len(),
                });
            }
        }
    }

    manifest.compute_checksums(dir)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    let truth = DatasetTruth { patterns, sections: truth };
    let path = dir.join(TRUTH_FILE);
    let mut text = serde_json::to_string_pretty(&truth)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok((manifest, truth))
}
