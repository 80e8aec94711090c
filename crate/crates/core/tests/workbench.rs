use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;

use denerd_core::detector::{DetectorModel, ModelSpec};
use denerd_core::quantify::{RegionAtlas, RegionTable};
use denerd_core::section::BinaryNeuronMap;
use denerd_core::workbench::pipeline::{DENSITIES_TSV, REPORT_TABLES};
use denerd_core::workbench::*;
use denerd_core::Error;
use proptest::prelude::*;

fn record(i: usize, w: u32, h: u32, boxes: Vec<[u32; 4]>) -> GtRecord {
    GtRecord {
        image: format!("img{i:03}"),
        width: w,
        height: h,
        boxes,
        scores: None,
    }
}

fn records(n: usize) -> Vec<GtRecord> {
    (0..n).map(|i| record(i, 100, 100, vec![[i as u32 % 90, 3, 5, 6]])).collect()
}

// ground-truth exchange and split

#[test]
fn gt_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut recs = records(5);
    recs[2].scores = Some(vec![0.123456789012345]);
    recs[3].boxes.clear();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_gt(&a, &recs).unwrap();
    let back = read_gt(&a).unwrap();
    assert_eq!(back, recs);
    write_gt(&b, &back).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn gt_rejects_boxes_outside_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    fs::write(&p, "{\"image\":\"x\",\"width\":10,\"height\":10,\"boxes\":[[8,8,5,1]]}\n").unwrap();
    assert!(read_gt(&p).is_err());
}

#[test]
fn split_220_gives_110_110() {
    let (train, test) = split_records(&records(220), 0.5, 7).unwrap();
    assert_eq!((train.len(), test.len()), (110, 110));
}

#[test]
fn split_of_one_image_goes_to_train() {
    let (train, test) = split_records(&records(1), 0.5, 7).unwrap();
    assert_eq!((train.len(), test.len()), (1, 0));
}

#[test]
fn split_of_nothing_is_rejected() {
    assert!(matches!(split_records(&[], 0.5, 0), Err(Error::EmptySample)));
}

#[test]
fn split_rejects_fraction_outside_unit_interval() {
    assert!(split_records(&records(4), 0.0, 0).is_err());
    assert!(split_records(&records(4), 1.0, 0).is_err());
}

proptest! {
    #[test]
    fn split_is_deterministic_disjoint_and_complete(n in 1usize..120, f in 0.05f64..0.95, seed in any::<u64>()) {
        let recs = records(n);
        let (train, test) = split_records(&recs, f, seed).unwrap();
        let again = split_records(&recs, f, seed).unwrap();
        prop_assert_eq!(&(train.clone(), test.clone()), &again);
        let a: BTreeSet<_> = train.iter().map(|r| r.image.clone()).collect();
        let b: BTreeSet<_> = test.iter().map(|r| r.image.clone()).collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), n);
    }
}

// annotation store

fn extents(n: usize) -> BTreeMap<String, (u32, u32)> {
    (0..n).map(|i| (format!("img{i:03}"), (100, 80))).collect()
}

#[test]
fn add_then_fetch_increments_revision() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AnnotationStore::open(&dir.path().join("j.log"), extents(2)).unwrap();
    assert_eq!(store.get("img000").unwrap().revision, 0);
    store.add_boxes("img000", &[[1, 2, 10, 10]], "ann1", Some(0)).unwrap();
    let a = store.get("img000").unwrap();
    assert_eq!(a.revision, 1);
    assert_eq!(a.boxes.len(), 1);
    assert_eq!(a.boxes[0].rect, [1, 2, 10, 10]);
    assert_eq!(a.boxes[0].annotator, "ann1");
}

#[test]
fn removal_rectangle_over_two_of_three_leaves_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AnnotationStore::open(&dir.path().join("j.log"), extents(1)).unwrap();
    store
        .add_boxes("img000", &[[0, 0, 10, 10], [20, 0, 10, 10], [60, 60, 10, 10]], "a", None)
        .unwrap();
    // Overlaps the first box at its corner and the second at its left edge.
    let (removed, state) = store.remove_intersecting("img000", [8, 5, 14, 3], None).unwrap();
    assert_eq!(removed, 2);
    assert_eq!(state.boxes.len(), 1);
    assert_eq!(state.boxes[0].rect, [60, 60, 10, 10]);
    assert_eq!(state.revision, 2);
}

#[test]
fn stale_revision_is_a_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AnnotationStore::open(&dir.path().join("j.log"), extents(1)).unwrap();
    store.add_boxes("img000", &[[0, 0, 5, 5]], "a", Some(0)).unwrap();
    let err = store.add_boxes("img000", &[[9, 9, 5, 5]], "b", Some(0)).unwrap_err();
    assert!(matches!(err, Error::RevisionConflict { expected: 0, current: 1 }));
    assert_eq!(store.get("img000").unwrap().boxes.len(), 1);
}

#[test]
fn invalid_boxes_and_unknown_images_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AnnotationStore::open(&dir.path().join("j.log"), extents(1)).unwrap();
    assert!(matches!(store.add_boxes("img000", &[[95, 0, 10, 5]], "a", None), Err(Error::InvalidArgument(_))));
    assert!(matches!(store.add_boxes("img000", &[[5, 5, 0, 5]], "a", None), Err(Error::InvalidArgument(_))));
    assert!(matches!(store.add_boxes("nope", &[[0, 0, 1, 1]], "a", None), Err(Error::NotFound(_))));
    assert_eq!(store.get("img000").unwrap().revision, 0);
}

#[test]
fn restart_reproduces_every_acknowledged_mutation() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.log");
    let before: Vec<ImageAnnotations> = {
        let mut store = AnnotationStore::open(&journal, extents(3)).unwrap();
        store.add_boxes("img000", &[[0, 0, 5, 5], [10, 10, 5, 5]], "a", None).unwrap();
        store.add_boxes("img002", &[[1, 1, 3, 3]], "b", None).unwrap();
        store.remove_intersecting("img000", [0, 0, 2, 2], None).unwrap();
        store.add_boxes("img000", &[[40, 40, 9, 9]], "c", Some(2)).unwrap();
        ["img000", "img001", "img002"].iter().map(|i| store.get(i).unwrap().clone()).collect()
    };
    let mut store = AnnotationStore::open(&journal, extents(3)).unwrap();
    let after: Vec<ImageAnnotations> = ["img000", "img001", "img002"].iter().map(|i| store.get(i).unwrap().clone()).collect();
    assert_eq!(before, after);
    // Ids keep increasing after a restart.
    let s = store.add_boxes("img001", &[[0, 0, 2, 2]], "a", None).unwrap();
    let max_before = before.iter().flat_map(|a| a.boxes.iter().map(|b| b.id)).max().unwrap();
    assert!(s.boxes[0].id > max_before);
}

#[test]
fn torn_journal_tail_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.log");
    {
        let mut store = AnnotationStore::open(&journal, extents(1)).unwrap();
        store.add_boxes("img000", &[[0, 0, 5, 5]], "a", None).unwrap();
    }
    let mut f = fs::OpenOptions::new().append(true).open(&journal).unwrap();
    f.write_all(b"{\"op\":\"add\",\"image\":\"img000\",\"rev").unwrap();
    drop(f);
    let mut store = AnnotationStore::open(&journal, extents(1)).unwrap();
    assert_eq!(store.get("img000").unwrap().revision, 1);
    store.add_boxes("img000", &[[9, 9, 5, 5]], "a", Some(1)).unwrap();
    let store = AnnotationStore::open(&journal, extents(1)).unwrap();
    assert_eq!(store.get("img000").unwrap().boxes.len(), 2);
}

#[test]
fn compaction_preserves_state() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.log");
    let mut store = AnnotationStore::open(&journal, extents(2)).unwrap();
    for k in 0..5 {
        store.add_boxes("img001", &[[k, k, 3, 3]], "a", None).unwrap();
    }
    store.remove_intersecting("img001", [0, 0, 2, 2], None).unwrap();
    let before = store.get("img001").unwrap().clone();
    store.compact().unwrap();
    assert_eq!(fs::read_to_string(&journal).unwrap().lines().count(), 1);
    store.add_boxes("img000", &[[0, 0, 1, 1]], "a", None).unwrap();
    let reopened = AnnotationStore::open(&journal, extents(2)).unwrap();
    assert_eq!(reopened.get("img001").unwrap(), &before);
    assert_eq!(reopened.get("img000").unwrap().revision, 1);
}

#[test]
fn export_after_220_annotated_images_splits_110_110() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AnnotationStore::open(&dir.path().join("j.log"), extents(230)).unwrap();
    for i in 0..220 {
        store.add_boxes(&format!("img{i:03}"), &[[1, 1, 4, 4]], "a", None).unwrap();
    }
    let recs = store.records();
    assert_eq!(recs.len(), 220);
    let (train, test) = split_records(&recs, 0.5, 3).unwrap();
    assert_eq!((train.len(), test.len()), (110, 110));
}

#[test]
fn image_store_lists_pairs_and_rejects_traversal() {
    let dir = tempfile::tempdir().unwrap();
    let img = image::GrayImage::new(7, 5);
    img.save(dir.path().join("b.png")).unwrap();
    img.save(dir.path().join("a.png")).unwrap();
    img.save(dir.path().join("a.expr.png")).unwrap();
    let store = ImageStore::new(dir.path()).unwrap();
    assert_eq!(store.ids().unwrap(), vec!["a", "b"]);
    assert!(store.expression_path("a").unwrap().is_some());
    assert!(store.expression_path("b").unwrap().is_none());
    assert_eq!(store.extents().unwrap()["a"], (7, 5));
    assert!(store.image_path("../a").is_err());
    assert!(matches!(store.image_path("zzz"), Err(Error::NotFound(_))));
}

// manifests and datasets

fn small_dataset(prealigned: bool, sections: usize) -> (tempfile::TempDir, DatasetManifest, DatasetTruth) {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticDatasetSpec {
        prealigned,
        ..Default::default()
    };
    spec.brain.width = 160;
    spec.brain.height = 120;
    spec.generator.sections = sections;
    let (m, t) = generate_dataset(&spec, dir.path()).unwrap();
    (dir, m, t)
}

#[test]
fn generated_manifest_loads_and_detects_tampering() {
    let (dir, m, t) = small_dataset(true, 2);
    let path = dir.path().join("manifest.json");
    assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    assert_eq!(m.sections.len(), 6);
    assert_eq!(t.sections.len(), 6);
    let victim = dir.path().join(&m.sections[0].image);
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&victim, bytes).unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::Checksum { .. })));
}

#[test]
fn manifest_with_missing_file_fails_to_load() {
    let (dir, m, _) = small_dataset(true, 1);
    fs::remove_file(dir.path().join(&m.atlases[1].nissl)).unwrap();
    assert!(matches!(DatasetManifest::load(&dir.path().join("manifest.json")), Err(Error::NotFound(_))));
}

#[test]
fn dataset_generation_is_deterministic() {
    let (a, ma, _) = small_dataset(false, 1);
    let (b, mb, _) = small_dataset(false, 1);
    assert_eq!(ma, mb);
    assert_eq!(fs::read(a.path().join("truth.json")).unwrap(), fs::read(b.path().join("truth.json")).unwrap());
}

#[test]
fn corpus_mean_blob_count_is_near_twenty() {
    let spec = SyntheticSceneSpec::default();
    let corpus = generate_corpus(&spec, 100).unwrap();
    let mean = corpus.iter().map(|s| s.boxes.len()).sum::<usize>() as f64 / 100.0;
    assert!((mean - 20.0).abs() <= 1.0, "mean {mean}");
}

#[test]
fn corpus_is_reproducible_from_its_seed() {
    let spec = SyntheticSceneSpec { seed: 11, ..Default::default() };
    let a = generate_corpus(&spec, 3).unwrap();
    let b = generate_corpus(&spec, 3).unwrap();
    assert_eq!(a, b);
}

// configuration

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 9;
    cfg.recurrences = 5;
    cfg.stats.bonferroni = true;
    let text = cfg.to_toml().unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn partial_config_fills_defaults() {
    let cfg = PipelineConfig::from_toml("seed = 4\n[registration]\nlevels = 2\n").unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.registration.levels, 2);
    assert_eq!(cfg.registration.max_iterations, PipelineConfig::default().registration.max_iterations);
    assert_eq!(cfg.recurrences, 20);
    cfg.validate().unwrap();
}

#[test]
fn config_rejects_mismatched_tile_size() {
    let mut cfg = PipelineConfig::default();
    cfg.section.tile_size = 64;
    assert!(cfg.validate().is_err());
}

// pipeline

fn quick_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.recurrences = 3;
    cfg.registration.max_iterations = 40;
    cfg.preprocess.max_side = 96;
    cfg
}

fn model() -> DetectorModel {
    DetectorModel::new(ModelSpec::default(), 5).unwrap()
}

#[test]
fn empty_manifest_gives_an_empty_successful_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let report = run_pipeline(&DatasetManifest::default(), dir.path(), &model(), &quick_config(), &out).unwrap();
    assert!(report.is_success());
    assert_eq!(report.sections, 0);
    assert!(report.densities.is_empty() && report.clusters.is_empty());
    let table = fs::read_to_string(out.join(DENSITIES_TSV)).unwrap();
    assert_eq!(table.lines().count(), 1);
}

#[test]
fn prealigned_section_densities_match_a_pixel_oracle() {
    let (dir, m, _) = small_dataset(true, 1);
    let one = DatasetManifest {
        sections: vec![m.sections[0].clone()],
        ..m.clone()
    };
    let out = dir.path().join("out");
    let report = run_pipeline(&one, dir.path(), &model(), &quick_config(), &out).unwrap();
    assert!(report.is_success(), "{:?}", report.failures);

    let id = &one.sections[0].id;
    let map = BinaryNeuronMap::load_png(&out.join("maps").join(format!("{id}.png"))).unwrap();
    let atlas_entry = one.atlas(&one.sections[0].atlas).unwrap();
    let labels = image::open(dir.path().join(&atlas_entry.labels)).unwrap().to_rgb8();
    let table = RegionTable::load(&dir.path().join(&atlas_entry.regions)).unwrap();
    let atlas = RegionAtlas::new(labels.clone(), table.clone(), &Default::default()).unwrap();
    assert_eq!(atlas.labels(), &labels);

    let mut expected = Vec::new();
    for r in table.regions() {
        let (mut area, mut count) = (0usize, 0usize);
        for y in 0..labels.height() {
            for x in 0..labels.width() {
                if labels.get_pixel(x, y).0 == [r.r, r.g, r.b] {
                    area += 1;
                    count += map.get(x, y) as usize;
                }
            }
        }
        if area > 0 {
            expected.push((r.id, count, area, count as f64 / area as f64));
        }
    }
    let got: Vec<_> = report.densities.iter().map(|d| (d.region, d.count, d.area, d.density)).collect();
    assert_eq!(got, expected);
}

#[test]
fn rerun_produces_byte_identical_tables() {
    let (dir, m, _) = small_dataset(false, 2);
    let cfg = quick_config();
    let a = dir.path().join("run-a");
    let b = dir.path().join("run-b");
    let ra = run_pipeline(&m, dir.path(), &model(), &cfg, &a).unwrap();
    run_pipeline(&m, dir.path(), &model(), &cfg, &b).unwrap();
    assert!(ra.is_success(), "{:?}", ra.failures);
    for t in REPORT_TABLES {
        assert_eq!(fs::read(a.join(t)).unwrap(), fs::read(b.join(t)).unwrap(), "{t}");
    }
    for s in &m.sections {
        let f = format!("{}.tsv", s.id);
        assert_eq!(fs::read(a.join("traces").join(&f)).unwrap(), fs::read(b.join("traces").join(&f)).unwrap());
    }
}

#[test]
fn broken_section_is_recorded_and_others_continue() {
    let (dir, m, _) = small_dataset(true, 1);
    fs::write(dir.path().join(&m.sections[1].image), b"not an image").unwrap();
    let out = dir.path().join("out");
    let report = run_pipeline(&m, dir.path(), &model(), &quick_config(), &out).unwrap();
    assert!(!report.is_success());
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].section, m.sections[1].id);
    assert_eq!(report.failures[0].stage, Stage::Load);
    assert_eq!(report.succeeded.len(), m.sections.len() - 1);
    let failures = fs::read_to_string(out.join("failures.tsv")).unwrap();
    assert_eq!(failures.lines().count(), 2);
}

#[test]
fn missing_atlas_fails_only_its_sections() {
    let (dir, m, _) = small_dataset(true, 1);
    fs::remove_file(dir.path().join(&m.atlases[0].labels)).unwrap();
    let report = run_pipeline(&m, dir.path(), &model(), &quick_config(), &dir.path().join("out")).unwrap();
    let failed: Vec<_> = report.failures.iter().map(|f| (f.section.as_str(), f.stage)).collect();
    let expected: Vec<_> = m
        .sections
        .iter()
        .filter(|s| s.atlas == m.atlases[0].id)
        .map(|s| (s.id.as_str(), Stage::Atlas))
        .collect();
    assert_eq!(failed, expected);
    assert_eq!(report.succeeded.len(), m.sections.len() - expected.len());
}
