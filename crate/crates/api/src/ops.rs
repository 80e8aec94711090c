//! Every operation, executed on the local filesystem.

use std::fs;
use std::path::{Path, PathBuf};

use denerd_core::baselines::EvalReport;
use denerd_core::detector::DetectorModel;
use denerd_core::nn::Checkpoint;
use denerd_core::quantify::{aggregate, quantify_section, read_density_tsv, with_parent_records, write_density_tsv, RegionAtlas, RegionTable, SectionQuantInput};
use denerd_core::registration::{preprocess, recurrent_register, warp_labels};
use denerd_core::section::{detect_section, Age, BinaryNeuronMap, Marker, SectionImage};
use denerd_core::stats::{classify_groups, ranksum as core_ranksum, write_cluster_tsv, RankSumResult};
use denerd_core::workbench::{
    evaluate_baselines, evaluate_learned, generate_dataset as core_generate_dataset, load_labeled, manifest_path, read_gt, run_pipeline, split_records, summarize, train_detector, write_corpus, write_gt, DatasetManifest, GtRecord, PipelineConfig,
};
use image::Rgb;

use crate::error::{ApiError, ApiResult};
use crate::types::*;

pub const MODEL_FILE: &str = "model.ckpt";
pub const SUMMARY_FILE: &str = "summary.txt";

fn io_err(path: &Path, e: std::io::Error) -> ApiError {
    denerd_core::Error::io(path, e).into()
}

fn ensure_dir(p: &Path) -> ApiResult<()> {
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn parent_dir(p: &Path) -> ApiResult<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => ensure_dir(d),
        _ => Ok(()),
    }
}

pub fn health() -> Health {
    Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    }
}

pub fn load_model(path: &Path) -> ApiResult<DetectorModel> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(DetectorModel::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?)
}

pub fn save_model(model: &DetectorModel, path: &Path) -> ApiResult<()> {
    parent_dir(path)?;
    fs::write(path, model.to_bytes()?).map_err(|e| io_err(path, e))
}

pub fn generate_corpus(req: &GenerateCorpusRequest) -> ApiResult<GenerateCorpusResponse> {
    if req.count == 0 {
        return Err(ApiError::invalid("count must be positive"));
    }
    let records = write_corpus(&req.spec, req.count, &req.out_dir)?;
    Ok(GenerateCorpusResponse {
        images: records.len(),
        boxes: records.iter().map(|r| r.boxes.len()).sum(),
        images_dir: req.out_dir.join(denerd_core::workbench::IMAGES_DIR),
        gt_path: req.out_dir.join(denerd_core::workbench::GT_FILE),
    })
}

pub fn generate_dataset(req: &GenerateDatasetRequest) -> ApiResult<GenerateDatasetResponse> {
    let (manifest, truth) = core_generate_dataset(&req.spec, &req.out_dir)?;
    Ok(GenerateDatasetResponse {
        manifest_path: req.out_dir.join(denerd_core::workbench::MANIFEST_FILE),
        truth_path: req.out_dir.join(denerd_core::workbench::TRUTH_FILE),
        sections: truth.sections.len(),
        atlases: manifest.atlases.len(),
    })
}

fn write_eval(dir: &Path, report: &EvalReport) -> ApiResult<()> {
    let table = dir.join(format!("eval_{}.tsv", report.method));
    report.write_tsv(fs::File::create(&table).map_err(|e| io_err(&table, e))?)?;
    let curve = dir.join(format!("pr_{}.tsv", report.method));
    report.write_curve_tsv(fs::File::create(&curve).map_err(|e| io_err(&curve, e))?)?;
    Ok(())
}

pub fn train(req: &TrainRequest) -> ApiResult<TrainResponse> {
    req.config.validate()?;
    let (train_records, test_records): (Vec<GtRecord>, Vec<GtRecord>) = match &req.train_gt {
        Some(train) => (read_gt(train)?, req.test_gt.as_deref().map(read_gt).transpose()?.unwrap_or_default()),
        None => {
            let all = read_gt(&req.corpus_dir.join(denerd_core::workbench::GT_FILE))?;
            split_records(&all, req.config.train_fraction, req.config.seed)?
        }
    };
    if train_records.is_empty() {
        return Err(ApiError::invalid("no training records"));
    }
    let images = req.corpus_dir.join(denerd_core::workbench::IMAGES_DIR);
    let train_set = load_labeled(&images, &train_records)?;
    let (model, report) = train_detector(&train_set, &req.config)?;
    save_model(&model, &req.model_out)?;

    let mut learned = None;
    let mut baselines = None;
    if req.evaluate || req.baselines {
        if test_records.is_empty() {
            return Err(ApiError::invalid("evaluation needs test records"));
        }
        let test_set = load_labeled(&images, &test_records)?;
        let dir = match &req.report_dir {
            Some(d) => d.clone(),
            None => req.model_out.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        ensure_dir(&dir)?;
        if req.evaluate {
            let r = evaluate_learned(&model, &test_set, &req.config.section.inference)?;
            write_eval(&dir, &r)?;
            learned = Some(r);
        }
        if req.baselines {
            let b = evaluate_baselines(&train_set, &test_set, &req.grid)?;
            for r in &b.reports {
                write_eval(&dir, r)?;
            }
            baselines = Some(b);
        }
    }
    Ok(TrainResponse {
        model_path: req.model_out.clone(),
        checksum: model.checksum()?,
        train_images: train_records.len(),
        test_images: test_records.len(),
        stage_losses: report.stage_losses,
        learned,
        baselines,
    })
}

pub fn detect(req: &DetectRequest) -> ApiResult<DetectResponse> {
    let model = load_model(&req.model)?;
    let pixels = image::open(&req.image).map_err(denerd_core::Error::from)?.to_luma8();
    let id = match &req.section_id {
        Some(id) => id.clone(),
        None => req
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| ApiError::invalid("image path has no file name"))?,
    };
    let (w, h) = pixels.dimensions();
    // Age, marker and position do not affect detection.
    let section = SectionImage {
        id: id.clone(),
        pixels,
        age: Age::P4,
        marker: Marker::Gad1,
        ml_index: 0,
    };
    let found = detect_section(&model, &section, &req.section)?;
    let record = GtRecord::from_detections(&id, w, h, &found.detections);
    if let Some(dir) = &req.out_dir {
        ensure_dir(dir)?;
        found.map.save_with_sidecar(&dir.join(&id), &id, &model.checksum()?, req.section.tile_size)?;
        write_gt(&dir.join(format!("{id}.jsonl")), std::slice::from_ref(&record))?;
    }
    Ok(DetectResponse {
        section_id: id,
        detections: record,
        centers: found.map.count_ones(),
    })
}

pub fn register(req: &RegisterRequest) -> ApiResult<RegisterResponse> {
    if req.recurrences == 0 {
        return Err(ApiError::invalid("recurrences must be at least 1"));
    }
    req.registration.validate()?;
    let fixed_raw = image::open(&req.fixed).map_err(denerd_core::Error::from)?;
    let moving_raw = image::open(&req.moving).map_err(denerd_core::Error::from)?;
    let fixed = preprocess(&fixed_raw, &req.preprocess)?;
    let moving = preprocess(&moving_raw, &req.preprocess)?;
    let result = recurrent_register(&fixed.image, &moving.image, req.recurrences, &req.registration)?;
    if let Some(path) = &req.trace_out {
        parent_dir(path)?;
        result.write_trace_tsv(path)?;
    }
    let transform = result.transform().rescaled(moving.scale, fixed.scale);
    if let Some(warp) = &req.atlas {
        let labels = image::open(&warp.labels).map_err(denerd_core::Error::from)?.to_rgb8();
        let warped = warp_labels(&labels, &transform, fixed_raw.width(), fixed_raw.height(), Rgb([0, 0, 0]))?;
        parent_dir(&warp.out)?;
        warped.save(&warp.out).map_err(denerd_core::Error::from)?;
    }
    Ok(RegisterResponse {
        selected: result.selected,
        metric: result.metric(),
        descends_to_selection: result.descends_to_selection(),
        working_transform: result.transform(),
        transform,
        fixed_working: (fixed.image.width, fixed.image.height),
        moving_working: (moving.image.width, moving.image.height),
        records: result.records,
    })
}

pub fn quantify(req: &QuantifyRequest) -> ApiResult<QuantifyResponse> {
    let map = BinaryNeuronMap::load_png(&req.map)?;
    let labels = image::open(&req.labels).map_err(denerd_core::Error::from)?.to_rgb8();
    let table = RegionTable::load(&req.regions)?;
    let atlas = RegionAtlas::new(labels, table, &req.atlas)?;
    let input = SectionQuantInput {
        section: &req.section,
        age: req.age,
        marker: req.marker,
        map: &map,
        atlas: &atlas,
    };
    let mut records = quantify_section(&input)?;
    if req.parents {
        records = with_parent_records(&records, atlas.table());
    }
    if let Some(out) = &req.out {
        parent_dir(out)?;
        write_density_tsv(&records, out)?;
    }
    Ok(QuantifyResponse { records })
}

pub fn stats(req: &StatsRequest) -> ApiResult<StatsResponse> {
    let records = read_density_tsv(&req.densities)?;
    let groups = aggregate(&records);
    let clusters = classify_groups(&groups, &req.stats)?;
    if let Some(out) = &req.out {
        parent_dir(out)?;
        write_cluster_tsv(&clusters, out)?;
    }
    Ok(StatsResponse { groups, clusters })
}

pub fn ranksum(req: &RanksumRequest) -> ApiResult<RankSumResult> {
    Ok(core_ranksum(&req.x, &req.y)?)
}

fn run_loaded(manifest_arg: &Path, model: &DetectorModel, config: &PipelineConfig, out_dir: &Path) -> ApiResult<RunResponse> {
    let path = manifest_path(manifest_arg);
    let manifest = DatasetManifest::load(&path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let report = run_pipeline(&manifest, &root, model, config, out_dir)?;
    let summary = summarize(&report);
    let summary_path = out_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, &summary).map_err(|e| io_err(&summary_path, e))?;
    Ok(RunResponse {
        sections: report.sections,
        succeeded: report.succeeded,
        failures: report.failures,
        clusters: report.clusters,
        out_dir: out_dir.to_path_buf(),
        summary,
    })
}

pub fn run(req: &RunRequest) -> ApiResult<RunResponse> {
    let model = load_model(&req.model)?;
    run_loaded(&req.manifest, &model, &req.config, &req.out_dir)
}

/// Generates whatever is missing under `work_dir` (corpus, model, dataset)
/// and runs the pipeline into `work_dir/out`.
pub fn run_all(req: &RunAllRequest) -> ApiResult<RunAllResponse> {
    req.config.validate()?;
    ensure_dir(&req.work_dir)?;
    let (model_path, training) = match &req.model {
        Some(p) => (p.clone(), None),
        None => {
            let corpus_dir = req.work_dir.join("corpus");
            generate_corpus(&GenerateCorpusRequest {
                spec: req.config.corpus.clone(),
                count: req.config.corpus_size,
                out_dir: corpus_dir.clone(),
            })?;
            let model_out = req.work_dir.join(MODEL_FILE);
            let trained = train(&TrainRequest {
                config: req.config.clone(),
                corpus_dir,
                train_gt: None,
                test_gt: None,
                model_out: model_out.clone(),
                evaluate: true,
                baselines: req.baselines,
                grid: Default::default(),
                report_dir: Some(req.work_dir.join("evaluation")),
            })?;
            (model_out, Some(trained))
        }
    };
    let manifest_path = match &req.manifest {
        Some(p) => manifest_path(p),
        None => {
            let data = req.work_dir.join("data");
            generate_dataset(&GenerateDatasetRequest {
                spec: req.config.dataset.clone(),
                out_dir: data,
            })?
            .manifest_path
        }
    };
    let model = load_model(&model_path)?;
    let run = run_loaded(&manifest_path, &model, &req.config, &req.work_dir.join("out"))?;
    Ok(RunAllResponse {
        manifest_path,
        model_path,
        training,
        run,
    })
}

/// The summary of a finished run plus the size of each report table.
pub fn report(req: &ReportRequest) -> ApiResult<ReportResponse> {
    let summary_path = req.out_dir.join(SUMMARY_FILE);
    let mut text = fs::read_to_string(&summary_path).map_err(|e| io_err(&summary_path, e))?;
    text.push_str("tables:\n");
    for name in denerd_core::workbench::REPORT_TABLES {
        let p: PathBuf = req.out_dir.join(name);
        let rows = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?.lines().count();
        text.push_str(&format!("  {name}\t{rows} lines\n"));
    }
    Ok(ReportResponse { text })
}
