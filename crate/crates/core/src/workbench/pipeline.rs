//! The end-to-end run: detection, registration, atlas warping and
//! quantification per section, then aggregation and cluster assignment.
//!
//! Sections are processed in parallel; every table is written in a fixed
//! order so reruns on unchanged inputs are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::gt::{write_gt, GtRecord};
use super::manifest::{AtlasEntry, DatasetManifest, SectionEntry};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::quantify::{aggregate, quantify_section, with_parent_records, write_density_tsv, DensityGroup, DensityRecord, RegionAtlas, RegionTable, SectionQuantInput};
use crate::registration::{preprocess, recurrent_register, AffineTransform, RegistrationResult};
use crate::section::{detect_section, SectionImage};
use crate::stats::{classify_groups, tier, write_cluster_tsv, ClusterAssignment};

/// Report bundle file names under the output directory.
pub const DENSITIES_TSV: &str = "densities.tsv";
pub const DENSITY_BARS_TSV: &str = "density_bars.tsv";
pub const CLUSTERS_TSV: &str = "clusters.tsv";
pub const REGISTRATION_TSV: &str = "registration.tsv";
pub const FAILURES_TSV: &str = "failures.tsv";
pub const DETECTIONS_JSONL: &str = "detections.jsonl";

/// Tables that must not change between reruns on the same inputs.
pub const REPORT_TABLES: [&str; 6] = [DENSITIES_TSV, DENSITY_BARS_TSV, CLUSTERS_TSV, REGISTRATION_TSV, FAILURES_TSV, DETECTIONS_JSONL];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Detect,
    Register,
    Atlas,
    Quantify,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Detect => "detect",
            Stage::Register => "register",
            Stage::Atlas => "atlas",
            Stage::Quantify => "quantify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionFailure {
    pub section: String,
    pub stage: Stage,
    pub message: String,
}

/// Registration outcome of one section, in original pixel frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionRegistration {
    pub section: String,
    /// Atlas frame to section frame.
    pub transform: AffineTransform,
    pub selected: usize,
    pub metric: f64,
    pub recurrences: usize,
    pub fixed_working: (usize, usize),
    pub moving_working: (usize, usize),
    /// Skipped because the atlas was marked as registered.
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub sections: usize,
    pub succeeded: Vec<String>,
    pub failures: Vec<SectionFailure>,
    pub densities: Vec<DensityRecord>,
    pub groups: Vec<DensityGroup>,
    pub clusters: Vec<ClusterAssignment>,
    pub registrations: Vec<SectionRegistration>,
}

impl PipelineReport {
    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }
}

struct LoadedAtlas {
    atlas: RegionAtlas,
    nissl: DynamicImage,
    registered: bool,
}

fn load_atlas(root: &Path, entry: &AtlasEntry, cfg: &PipelineConfig) -> Result<LoadedAtlas> {
    let labels = image::open(root.join(&entry.labels))?.to_rgb8();
    let table = RegionTable::load(&root.join(&entry.regions))?;
    let atlas = RegionAtlas::new(labels, table, &cfg.atlas)?;
    let nissl = image::open(root.join(&entry.nissl))?;
    Ok(LoadedAtlas {
        atlas,
        nissl,
        registered: entry.registered,
    })
}

struct SectionOutcome {
    records: Vec<DensityRecord>,
    detections: GtRecord,
    registration: SectionRegistration,
}

struct Context<'a> {
    root: &'a Path,
    out: &'a Path,
    model: &'a DetectorModel,
    model_checksum: String,
    cfg: &'a PipelineConfig,
}

fn fail(section: &str, stage: Stage) -> impl FnOnce(Error) -> SectionFailure + '_ {
    move |e| SectionFailure {
        section: section.to_string(),
        stage,
        message: e.to_string(),
    }
}

fn process_section(ctx: &Context<'_>, entry: &SectionEntry, atlas: std::result::Result<&LoadedAtlas, &str>) -> std::result::Result<SectionOutcome, SectionFailure> {
    let id = entry.id.as_str();
    let raw = image::open(ctx.root.join(&entry.image)).map_err(|e| fail(id, Stage::Load)(e.into()))?;
    let section = SectionImage {
        id: entry.id.clone(),
        pixels: raw.to_luma8(),
        age: entry.age,
        marker: entry.marker,
        ml_index: entry.ml_index,
    };
    let (w, h) = section.pixels.dimensions();

    let detected = detect_section(ctx.model, &section, &ctx.cfg.section).map_err(fail(id, Stage::Detect))?;
    detected
        .map
        .save_with_sidecar(&ctx.out.join("maps").join(id), id, &ctx.model_checksum, ctx.cfg.section.tile_size)
        .map_err(fail(id, Stage::Detect))?;

    let atlas = atlas.map_err(|msg| SectionFailure {
        section: id.to_string(),
        stage: Stage::Atlas,
        message: msg.to_string(),
    })?;
    let registration = if atlas.registered {
        SectionRegistration {
            section: id.to_string(),
            transform: AffineTransform::IDENTITY,
            selected: 0,
            metric: f64::NAN,
            recurrences: 0,
            fixed_working: (w as usize, h as usize),
            moving_working: (atlas.nissl.width() as usize, atlas.nissl.height() as usize),
            skipped: true,
        }
    } else {
        register(ctx, id, &raw, &atlas.nissl).map_err(fail(id, Stage::Register))?
    };
    let warped = if atlas.registered {
        atlas.atlas.clone()
    } else {
        atlas.atlas.warped(&registration.transform, w, h).map_err(fail(id, Stage::Atlas))?
    };
    let atlas_path = ctx.out.join("atlases").join(format!("{id}.png"));
    warped.labels().save(&atlas_path).map_err(|e| fail(id, Stage::Atlas)(e.into()))?;

    let input = SectionQuantInput {
        section: id,
        age: entry.age,
        marker: entry.marker,
        map: &detected.map,
        atlas: &warped,
    };
    let records = quantify_section(&input).map_err(fail(id, Stage::Quantify))?;
    let records = with_parent_records(&records, warped.table());

    let overlay = overlay(&section, &warped, &detected.map);
    let overlay_path = ctx.out.join("overlays").join(format!("{id}.png"));
    overlay.save(&overlay_path).map_err(|e| fail(id, Stage::Quantify)(e.into()))?;

    Ok(SectionOutcome {
        records,
        detections: GtRecord::from_detections(id, w, h, &detected.detections),
        registration,
    })
}

fn register(ctx: &Context<'_>, id: &str, section: &DynamicImage, nissl: &DynamicImage) -> Result<SectionRegistration> {
    let fixed = preprocess(section, &ctx.cfg.preprocess)?;
    let moving = preprocess(nissl, &ctx.cfg.preprocess)?;
    let result: RegistrationResult = recurrent_register(&fixed.image, &moving.image, ctx.cfg.recurrences, &ctx.cfg.registration)?;
    result.write_trace_tsv(&ctx.out.join("traces").join(format!("{id}.tsv")))?;
    Ok(SectionRegistration {
        section: id.to_string(),
        transform: result.transform().rescaled(moving.scale, fixed.scale),
        selected: result.selected,
        metric: result.metric(),
        recurrences: result.records.len(),
        fixed_working: (fixed.image.width, fixed.image.height),
        moving_working: (moving.image.width, moving.image.height),
        skipped: false,
    })
}

/// The section in gray with atlas colors tinted in and every detected
/// center marked in its region's color (black outside any region).
pub fn overlay(section: &SectionImage, atlas: &RegionAtlas, map: &crate::section::BinaryNeuronMap) -> RgbImage {
    let (w, h) = section.pixels.dimensions();
    let labels = atlas.labels();
    let mut out = RgbImage::from_fn(w, h, |x, y| {
        let g = section.pixels.get_pixel(x, y)[0] as f64;
        let code = labels.get_pixel(x, y).0;
        if atlas.is_background(code) {
            Rgb([g as u8; 3])
        } else {
            Rgb(std::array::from_fn(|c| (0.75 * g + 0.25 * code[c] as f64).round() as u8))
        }
    });
    for y in 0..h {
        for x in 0..w {
            if map.get(x, y) == 0 {
                continue;
            }
            let code = labels.get_pixel(x, y).0;
            let color = if atlas.is_background(code) { [0, 0, 0] } else { code };
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    out.put_pixel(xx, yy, Rgb(color));
                }
            }
        }
    }
    out
}

fn create_dirs(out: &Path) -> Result<()> {
    for sub in ["maps", "traces", "atlases", "overlays"] {
        let p = out.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.9}")
    } else {
        "-".into()
    }
}

fn registration_table(rows: &[SectionRegistration]) -> String {
    let mut s = String::from("section\tskipped\tselected\trecurrences\tmetric\ta11\ta12\ttx\ta21\ta22\tty\tfixed_w\tfixed_h\tmoving_w\tmoving_h\n");
    for r in rows {
        let t = &r.transform;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{}\t{}\t{}\t{}",
            r.section,
            u8::from(r.skipped),
            r.selected,
            r.recurrences,
            fmt_metric(r.metric),
            t.a11,
            t.a12,
            t.tx,
            t.a21,
            t.a22,
            t.ty,
            r.fixed_working.0,
            r.fixed_working.1,
            r.moving_working.0,
            r.moving_working.1
        );
    }
    s
}

fn density_bars(groups: &[DensityGroup]) -> String {
    let mut s = String::from("region\tmarker\tage\tsections\tmean\tmin\tmax\n");
    for g in groups {
        let min = g.densities.iter().copied().fold(f64::INFINITY, f64::min);
        let max = g.densities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{:.9}\t{:.9}\t{:.9}", g.region, g.marker, g.age, g.sections(), g.mean, min, max);
    }
    s
}

fn failures_table(rows: &[SectionFailure]) -> String {
    let mut s = String::from("section\tstage\terror\n");
    for f in rows {
        let msg = f.message.replace(['\t', '\n'], " ");
        let _ = writeln!(s, "{}\t{}\t{}", f.section, f.stage.name(), msg);
    }
    s
}

/// Runs every section of `manifest` (paths relative to `root`) and writes
/// the report bundle under `out`. Section failures are collected in the
/// report rather than returned as errors.
pub fn run_pipeline(manifest: &DatasetManifest, root: &Path, model: &DetectorModel, cfg: &PipelineConfig, out: &Path) -> Result<PipelineReport> {
    manifest.validate()?;
    cfg.validate()?;
    create_dirs(out)?;
    let ctx = Context {
        root,
        out,
        model,
        model_checksum: model.checksum()?,
        cfg,
    };

    let atlases: BTreeMap<&str, std::result::Result<LoadedAtlas, String>> = manifest
        .atlases
        .par_iter()
        .map(|a| (a.id.as_str(), load_atlas(root, a, cfg).map_err(|e| format!("atlas {}: {e}", a.id))))
        .collect();

    let outcomes: Vec<std::result::Result<SectionOutcome, SectionFailure>> = manifest
        .sections
        .par_iter()
        .map(|s| {
            let atlas = match &atlases[s.atlas.as_str()] {
                Ok(a) => Ok(a),
                Err(msg) => Err(msg.as_str()),
            };
            process_section(&ctx, s, atlas)
        })
        .collect();

    let mut report = PipelineReport {
        sections: manifest.sections.len(),
        ..Default::default()
    };
    let mut detections = Vec::new();
    for (entry, outcome) in manifest.sections.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                report.succeeded.push(entry.id.clone());
                report.densities.extend(o.records);
                report.registrations.push(o.registration);
                detections.push(o.detections);
            }
            Err(f) => {
                log::error!("section {} failed at {}: {}", f.section, f.stage.name(), f.message);
                report.failures.push(f);
            }
        }
    }
    report.densities.sort_by(|a, b| a.section.cmp(&b.section).then(a.region.cmp(&b.region)));
    report.registrations.sort_by(|a, b| a.section.cmp(&b.section));
    report.failures.sort_by(|a, b| a.section.cmp(&b.section));
    detections.sort_by(|a, b| a.image.cmp(&b.image));
    report.groups = aggregate(&report.densities);
    report.clusters = classify_groups(&report.groups, &cfg.stats)?;

    write_density_tsv(&report.densities, &out.join(DENSITIES_TSV))?;
    write_text(&out.join(DENSITY_BARS_TSV), &density_bars(&report.groups))?;
    write_cluster_tsv(&report.clusters, &out.join(CLUSTERS_TSV))?;
    write_text(&out.join(REGISTRATION_TSV), &registration_table(&report.registrations))?;
    write_text(&out.join(FAILURES_TSV), &failures_table(&report.failures))?;
    write_gt(&out.join(DETECTIONS_JSONL), &detections)?;
    Ok(report)
}

/// Plain-text summary of a finished run.
pub fn summarize(report: &PipelineReport) -> String {
    let mut s = format!(
        "sections: {} ok, {} failed of {}\n",
        report.succeeded.len(),
        report.failures.len(),
        report.sections
    );
    for c in &report.clusters {
        let _ = writeln!(
            s,
            "region {:>3} {}  {}  cluster {}  p_early {:.3e} ({})  p_late {:.3e} ({})",
            c.region,
            c.marker,
            c.pattern,
            c.pattern.cluster().map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            c.p_early,
            tier(c.p_early),
            c.p_late,
            tier(c.p_late)
        );
    }
    for f in &report.failures {
        let _ = writeln!(s, "failed {} at {}: {}", f.section, f.stage.name(), f.message);
    }
    s
}

/// Resolves a manifest argument that may name the file or its directory.
pub fn manifest_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join(super::dataset::MANIFEST_FILE)
    } else {
        arg.to_path_buf()
    }
}
