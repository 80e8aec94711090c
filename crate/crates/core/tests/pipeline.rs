//! Full synthetic three-age run with a briefly trained detector.

use std::fs;

use denerd_core::quantify::{RegionAtlas, RegionTable};
use denerd_core::section::BinaryNeuronMap;
use denerd_core::workbench::*;

#[test]
fn injected_patterns_are_recovered_end_to_end() {
    let mut cfg = PipelineConfig::default();
    cfg.training.epochs = 8;
    cfg.preprocess.max_side = 160;
    let labeled: Vec<LabeledImage> = generate_corpus(&cfg.corpus, 200)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| LabeledImage {
            id: format!("t{i}"),
            image: s.image,
            boxes: s.boxes,
        })
        .collect();
    let (model, _) = train_detector(&labeled, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (manifest, truth) = generate_dataset(&cfg.dataset, &data).unwrap();
    let out = dir.path().join("out");
    let report = run_pipeline(&manifest, &data, &model, &cfg, &out).unwrap();
    assert!(report.is_success(), "{:?}", report.failures);

    // Every region lands in the cluster whose effect was injected.
    assert_eq!(report.clusters.len(), truth.patterns.len());
    for (c, (region, pattern)) in report.clusters.iter().zip(&truth.patterns) {
        assert_eq!(c.region, *region);
        assert_eq!(c.pattern, *pattern, "region {region}: got {}, injected {}", c.pattern, pattern);
    }
    assert_eq!(report.clusters[0].pattern.to_string(), "P4 ≅ P14 > P56");

    // The density table agrees with a pixel count over the written map and
    // warped atlas of each section.
    let table = RegionTable::load(&data.join(&manifest.atlases[0].regions)).unwrap();
    for s in &manifest.sections {
        let map = BinaryNeuronMap::load_png(&out.join("maps").join(format!("{}.png", s.id))).unwrap();
        let labels = image::open(out.join("atlases").join(format!("{}.png", s.id))).unwrap().to_rgb8();
        RegionAtlas::new(labels.clone(), table.clone(), &cfg.atlas).unwrap();
        for r in table.regions() {
            let (mut area, mut count) = (0usize, 0usize);
            for (x, y, px) in labels.enumerate_pixels() {
                if px.0 == [r.r, r.g, r.b] {
                    area += 1;
                    count += map.get(x, y) as usize;
                }
            }
            let rec = report.densities.iter().find(|d| d.section == s.id && d.region == r.id);
            match rec {
                Some(d) => assert_eq!((d.count, d.area, d.density), (count, area, count as f64 / area as f64)),
                None => assert_eq!(area, 0),
            }
        }
    }

    for s in &manifest.sections {
        let trace = fs::read_to_string(out.join("traces").join(format!("{}.tsv", s.id))).unwrap();
        assert_eq!(trace.lines().count(), cfg.recurrences + 1);
    }
    assert!(fs::metadata(out.join("overlays").join(format!("{}.png", manifest.sections[0].id))).is_ok());
}
