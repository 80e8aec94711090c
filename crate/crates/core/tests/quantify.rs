use denerd_core::quantify::{aggregate, density, quantify_brain, read_density_tsv, with_parent_records, write_density_tsv, AtlasConfig, DensityRecord, Region, RegionAtlas, RegionTable, SectionQuantInput};
use denerd_core::section::{Age, BinaryNeuronMap, Marker};
use denerd_core::Error;
use image::{Rgb, RgbImage};
use proptest::prelude::*;

const RED: [u8; 3] = [200, 0, 0];
const GREEN: [u8; 3] = [0, 200, 0];
const BLUE: [u8; 3] = [0, 0, 200];

fn region(id: u32, c: [u8; 3], parent: Option<u32>) -> Region {
    Region {
        id,
        name: format!("r{id}"),
        acronym: format!("R{id}"),
        r: c[0],
        g: c[1],
        b: c[2],
        parent,
    }
}

fn table() -> RegionTable {
    RegionTable::new(vec![region(1, RED, None), region(2, GREEN, None), region(3, BLUE, None)]).unwrap()
}

fn atlas(img: RgbImage) -> RegionAtlas {
    RegionAtlas::new(img, table(), &AtlasConfig::default()).unwrap()
}

fn record(section: &str, region: u32, d: f64) -> DensityRecord {
    DensityRecord {
        region,
        age: Age::P4,
        marker: Marker::Gad1,
        section: section.into(),
        density: d,
        count: 0,
        area: 1,
    }
}

#[test]
fn single_region_atlas_masks_everything() {
    let a = atlas(RgbImage::from_pixel(7, 5, Rgb(RED)));
    let m = a.region_mask(1).unwrap();
    assert_eq!(m.area, 35);
    assert!(m.data.iter().all(|&v| v == 1));
    assert_eq!(a.region_mask(2).unwrap().area, 0);
}

#[test]
fn sixty_forty_split() {
    let a = atlas(RgbImage::from_fn(10, 10, |x, _| Rgb(if x < 6 { RED } else { GREEN })));
    let (r, g) = (a.region_mask(1).unwrap(), a.region_mask(2).unwrap());
    assert_eq!((r.area, g.area), (60, 40));
    assert!(r.data.iter().zip(&g.data).all(|(a, b)| a & b == 0));
}

#[test]
fn density_examples() {
    let a = atlas(RgbImage::from_fn(20, 10, |x, _| Rgb(if x < 10 { RED } else { [255, 255, 255] })));
    let mask = a.region_mask(1).unwrap();
    assert_eq!(mask.area, 100);
    let mut map = BinaryNeuronMap::new(20, 10);
    assert_eq!(density(&mask, &map).unwrap().density, 0.0);
    map.set(1, 1);
    map.set(5, 7);
    map.set(9, 9);
    map.set(15, 3);
    let d = density(&mask, &map).unwrap();
    assert_eq!((d.count, d.density), (3, 0.03));
    let full = BinaryNeuronMap::from_raw(20, 10, vec![1; 200]).unwrap();
    assert_eq!(density(&mask, &full).unwrap().density, 1.0);
}

#[test]
fn zero_area_and_extent_mismatch_rejected() {
    let a = atlas(RgbImage::from_pixel(4, 4, Rgb(RED)));
    let map = BinaryNeuronMap::new(4, 4);
    assert!(matches!(density(&a.region_mask(3).unwrap(), &map), Err(Error::ZeroArea(3))));
    assert!(matches!(density(&a.region_mask(1).unwrap(), &BinaryNeuronMap::new(3, 4)), Err(Error::ExtentMismatch(_))));
}

#[test]
fn two_region_section_gives_two_records_and_boundary_is_exact() {
    let a = atlas(RgbImage::from_fn(10, 4, |x, _| Rgb(if x < 5 { RED } else { GREEN })));
    let mut map = BinaryNeuronMap::new(10, 4);
    map.set(4, 0); // last red column
    map.set(5, 0); // first green column
    map.set(5, 1);
    let input = SectionQuantInput {
        section: "s1",
        age: Age::P14,
        marker: Marker::Vgat,
        map: &map,
        atlas: &a,
    };
    let (recs, failures) = quantify_brain(&[input]);
    assert!(failures.is_empty());
    assert_eq!(recs.len(), 2);
    assert_eq!((recs[0].region, recs[0].count), (1, 1));
    assert_eq!((recs[1].region, recs[1].count), (2, 2));
}

#[test]
fn mismatched_section_fails_alone() {
    let a = atlas(RgbImage::from_pixel(4, 4, Rgb(RED)));
    let good = BinaryNeuronMap::new(4, 4);
    let bad = BinaryNeuronMap::new(5, 4);
    let mk = |s, map| SectionQuantInput {
        section: s,
        age: Age::P4,
        marker: Marker::Gad1,
        map,
        atlas: &a,
    };
    let (recs, failures) = quantify_brain(&[mk("ok", &good), mk("bad", &bad)]);
    assert_eq!(recs.len(), 1);
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].0, "bad");
}

#[test]
fn aggregation_examples() {
    let g = aggregate(&[record("a", 1, 0.5)]);
    assert_eq!((g.len(), g[0].sections(), g[0].mean), (1, 1, 0.5));
    let g = aggregate(&[record("a", 1, 0.25), record("b", 1, 0.25), record("c", 1, 0.25)]);
    assert_eq!((g[0].sections(), g[0].mean), (3, 0.25));
    let g = aggregate(&[record("a", 1, 0.01), record("b", 1, 0.02), record("c", 1, 0.03)]);
    assert!((g[0].mean - 0.02).abs() < 1e-15);
}

#[test]
fn aggregation_ignores_input_order() {
    let recs = vec![record("b", 1, 0.2), record("a", 1, 0.1), record("a", 2, 0.3)];
    let mut rev = recs.clone();
    rev.reverse();
    assert_eq!(aggregate(&recs), aggregate(&rev));
}

#[test]
fn parent_sums_children() {
    let t = RegionTable::new(vec![region(10, [9, 9, 90], None), region(1, RED, Some(10)), region(2, GREEN, Some(10))]).unwrap();
    let a = RegionAtlas::new(RgbImage::from_fn(10, 2, |x, _| Rgb(if x < 4 { RED } else { GREEN })), t.clone(), &AtlasConfig::default()).unwrap();
    let mut map = BinaryNeuronMap::new(10, 2);
    map.set(0, 0);
    map.set(9, 1);
    map.set(8, 1);
    let input = SectionQuantInput {
        section: "s",
        age: Age::P56,
        marker: Marker::Gad1,
        map: &map,
        atlas: &a,
    };
    let (recs, _) = quantify_brain(&[input]);
    let all = with_parent_records(&recs, &t);
    let parent = all.iter().find(|r| r.region == 10).unwrap();
    assert_eq!((parent.count, parent.area), (3, 20));
}

#[test]
fn region_table_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("regions.tsv");
    let t = RegionTable::new(vec![region(1, RED, None), region(2, GREEN, Some(1))]).unwrap();
    t.save(&p).unwrap();
    assert_eq!(RegionTable::load(&p).unwrap(), t);
}

#[test]
fn density_table_round_trips_exactly() {
    let recs = vec![
        DensityRecord {
            region: 2,
            age: Age::P14,
            marker: Marker::Vgat,
            section: "s1".into(),
            density: 7.0 / 3.0e4,
            count: 7,
            area: 30000,
        },
        DensityRecord {
            region: 1,
            age: Age::P4,
            marker: Marker::Gad1,
            section: "s0".into(),
            density: 0.0,
            count: 0,
            area: 11,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.tsv");
    write_density_tsv(&recs, &p).unwrap();
    assert_eq!(read_density_tsv(&p).unwrap(), recs);
}

fn atlas_and_map() -> impl Strategy<Value = (u32, u32, Vec<u8>, Vec<u8>)> {
    (1u32..24, 1u32..24).prop_flat_map(|(w, h)| {
        let n = (w * h) as usize;
        (Just(w), Just(h), prop::collection::vec(0u8..5, n), prop::collection::vec(0u8..2, n))
    })
}

fn code(i: u8) -> [u8; 3] {
    match i {
        0 => [0, 0, 0],
        1 => RED,
        2 => GREEN,
        3 => BLUE,
        _ => [255, 255, 255],
    }
}

proptest! {
    #[test]
    fn masks_partition_the_foreground((w, h, labels, _bits) in atlas_and_map()) {
        let a = atlas(RgbImage::from_fn(w, h, |x, y| Rgb(code(labels[(y * w + x) as usize]))));
        let masks: Vec<_> = (1..=3).map(|id| a.region_mask(id).unwrap()).collect();
        for (i, &l) in labels.iter().enumerate() {
            let covering = masks.iter().filter(|m| m.data[i] == 1).count();
            prop_assert_eq!(covering, usize::from((1..=3).contains(&l)));
        }
    }

    #[test]
    fn density_matches_pixel_oracle_and_conserves((w, h, labels, bits) in atlas_and_map()) {
        let a = atlas(RgbImage::from_fn(w, h, |x, y| Rgb(code(labels[(y * w + x) as usize]))));
        let map = BinaryNeuronMap::from_raw(w, h, bits.clone()).unwrap();
        let mut conserved = 0usize;
        for id in 1..=3u32 {
            let mask = a.region_mask(id).unwrap();
            let (mut area, mut hits) = (0usize, 0usize);
            for y in 0..h {
                for x in 0..w {
                    if a.labels().get_pixel(x, y).0 == code(id as u8) {
                        area += 1;
                        hits += map.get(x, y) as usize;
                    }
                }
            }
            if area == 0 {
                prop_assert!(density(&mask, &map).is_err());
                continue;
            }
            let d = density(&mask, &map).unwrap();
            prop_assert_eq!(d.density, hits as f64 / area as f64);
            conserved += d.count;
        }
        let on_atlas = labels.iter().zip(&bits).filter(|(&l, &b)| (1..=3).contains(&l) && b == 1).count();
        prop_assert_eq!(conserved, on_atlas);
    }
}
