use approx::assert_abs_diff_eq;
use denerd_core::registration::{
    apply_to_atlas, gaussian_kernel, preprocess, recurrent_register, register_affine, similarity, AffineTransform, PreprocessConfig, RegistrationConfig,
    WorkImage,
};
use denerd_core::workbench::{generate_brain, SyntheticBrainSpec};
use image::{DynamicImage, GrayImage, Luma, Rgb};
use proptest::prelude::*;
use std::collections::HashSet;

fn working_nissl(seed: u64) -> WorkImage {
    let brain = generate_brain(&SyntheticBrainSpec {
        seed,
        ..Default::default()
    })
    .unwrap();
    let cfg = PreprocessConfig { max_side: 160, sigma: 1.0 };
    preprocess(&DynamicImage::ImageLuma8(brain.nissl), &cfg).unwrap().image
}

fn fill(img: &WorkImage) -> f64 {
    img.data[0]
}

/// Moving image such that the true moving-to-fixed transform is `truth`.
fn warped_copy(fixed: &WorkImage, truth: &AffineTransform) -> WorkImage {
    fixed.warp(&truth.inverse().unwrap(), fixed.width, fixed.height, fill(fixed)).unwrap()
}

#[test]
fn preprocess_without_smoothing_is_plain_downsampling() {
    let img = GrayImage::from_fn(8, 4, |x, y| Luma([(x * 20 + y * 3) as u8]));
    let cfg = PreprocessConfig { max_side: 4, sigma: 0.0 };
    let p = preprocess(&DynamicImage::ImageLuma8(img.clone()), &cfg).unwrap();
    assert_eq!((p.image.width, p.image.height), (4, 2));
    for y in 0..2u32 {
        for x in 0..4u32 {
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += img.get_pixel(2 * x + dx, 2 * y + dy)[0] as f64;
                }
            }
            assert_abs_diff_eq!(p.image.get(x as usize, y as usize), s / 4.0, epsilon = 1e-9);
        }
    }
}

#[test]
fn constant_image_stays_constant() {
    let img = DynamicImage::ImageRgb8(image::RgbImage::from_pixel(40, 30, Rgb([90, 90, 90])));
    let p = preprocess(&img, &PreprocessConfig::default()).unwrap();
    assert!(p.image.data.iter().all(|&v| (v - 90.0).abs() < 1e-9));
}

#[test]
fn impulse_spreads_into_the_gaussian_kernel() {
    let mut img = GrayImage::new(21, 21);
    img.put_pixel(10, 10, Luma([255]));
    let p = preprocess(&DynamicImage::ImageLuma8(img), &PreprocessConfig { max_side: 512, sigma: 1.0 }).unwrap();
    // Independent kernel: exp(-k^2/2) over -3..=3, normalized.
    let raw: Vec<f64> = (-3i32..=3).map(|k| (-(k * k) as f64 / 2.0).exp()).collect();
    let sum: f64 = raw.iter().sum();
    let k: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    assert_eq!(gaussian_kernel(1.0).len(), 7);
    for dy in -3i32..=3 {
        for dx in -3i32..=3 {
            let got = p.image.get((10 + dx) as usize, (10 + dy) as usize);
            let want = 255.0 * k[(dx + 3) as usize] * k[(dy + 3) as usize];
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }
    }
    assert_abs_diff_eq!(p.image.get(6, 10), 0.0, epsilon = 1e-12);
}

#[test]
fn identical_images_register_to_identity() {
    let f = working_nissl(1);
    let fit = register_affine(&f, &f, &RegistrationConfig::default()).unwrap();
    assert!(!fit.diverged);
    assert!(fit.transform.corner_displacement(&AffineTransform::IDENTITY, f.width as u32, f.height as u32) < 0.1);
    for t in [
        AffineTransform::translation(2.0, 0.0),
        AffineTransform::similarity(3.0, 1.0, 80.0, 60.0, 0.0, 0.0),
        AffineTransform::similarity(0.0, 1.05, 80.0, 60.0, 0.0, 0.0),
    ] {
        assert!(fit.metric <= similarity(&f, &f, &t).unwrap());
    }
}

#[test]
fn recovers_a_translation() {
    let f = working_nissl(2);
    let truth = AffineTransform::translation(8.0, -5.0);
    let m = warped_copy(&f, &truth);
    let fit = register_affine(&f, &m, &RegistrationConfig::default()).unwrap();
    let (x, y) = fit.transform.apply(f.width as f64 / 2.0, f.height as f64 / 2.0);
    let (tx, ty) = truth.apply(f.width as f64 / 2.0, f.height as f64 / 2.0);
    assert!((x - tx).abs() <= 1.0 && (y - ty).abs() <= 1.0, "{:?}", fit.transform);
}

#[test]
fn recovers_a_rotation() {
    let f = working_nissl(3);
    let (cx, cy) = ((f.width as f64 - 1.0) / 2.0, (f.height as f64 - 1.0) / 2.0);
    let truth = AffineTransform::similarity(10.0, 1.0, cx, cy, 0.0, 0.0);
    let m = warped_copy(&f, &truth);
    let fit = register_affine(&f, &m, &RegistrationConfig::default()).unwrap();
    let angle = fit.transform.a21.atan2(fit.transform.a11).to_degrees();
    assert!((angle - 10.0).abs() <= 1.0, "angle {angle}");
}

#[test]
fn single_recurrence_is_selected() {
    let f = working_nissl(4);
    let r = recurrent_register(&f, &f, 1, &RegistrationConfig::default()).unwrap();
    assert_eq!(r.records.len(), 1);
    assert_eq!(r.selected, 1);
}

#[test]
fn identical_images_keep_the_first_metric() {
    let f = working_nissl(5);
    let r = recurrent_register(&f, &f, 4, &RegistrationConfig::default()).unwrap();
    assert_eq!(r.records.len(), 4);
    assert_abs_diff_eq!(r.metric(), r.records[0].metric, epsilon = 1e-3);
}

#[test]
fn recurrent_trace_descends_to_its_minimum() {
    let f = working_nissl(6);
    let (cx, cy) = ((f.width as f64 - 1.0) / 2.0, (f.height as f64 - 1.0) / 2.0);
    let truth = AffineTransform::similarity(-7.0, 1.06, cx, cy, 5.0, 3.0);
    let m = warped_copy(&f, &truth);
    let r = recurrent_register(&f, &m, 20, &RegistrationConfig::default()).unwrap();
    assert_eq!(r.records.len(), 20);
    let min = r.trace().into_iter().fold(f64::INFINITY, f64::min);
    assert_eq!(r.metric(), min);
    assert!(r.descends_to_selection(), "{:?}", r.trace());
    assert!(r.transform().corner_displacement(&truth, f.width as u32, f.height as u32) <= 2.0);
}

#[test]
fn zero_recurrences_rejected() {
    let f = working_nissl(7);
    assert!(recurrent_register(&f, &f, 0, &RegistrationConfig::default()).is_err());
}

#[test]
fn atlas_identity_and_integer_shift() {
    let brain = generate_brain(&SyntheticBrainSpec::default()).unwrap();
    let (w, h) = brain.atlas.dimensions();
    let same = apply_to_atlas(&brain.atlas, &AffineTransform::IDENTITY, w, h).unwrap();
    assert_eq!(same.labels(), brain.atlas.labels());

    let shifted = apply_to_atlas(&brain.atlas, &AffineTransform::translation(7.0, -3.0), w, h).unwrap();
    for y in 0..h - 3 {
        for x in 7..w {
            assert_eq!(shifted.labels().get_pixel(x, y), brain.atlas.labels().get_pixel(x - 7, y + 3));
        }
    }
}

#[test]
fn rotated_atlas_keeps_its_palette() {
    let brain = generate_brain(&SyntheticBrainSpec::default()).unwrap();
    let (w, h) = brain.atlas.dimensions();
    let t = AffineTransform::similarity(10.0, 1.0, w as f64 / 2.0, h as f64 / 2.0, 0.0, 0.0);
    let out = apply_to_atlas(&brain.atlas, &t, w, h).unwrap();
    let input: HashSet<[u8; 3]> = brain.atlas.labels().pixels().map(|p| p.0).collect();
    for p in out.labels().pixels() {
        assert!(input.contains(&p.0) || p.0 == [0, 0, 0]);
    }
}

proptest! {
    #[test]
    fn composition_matches_sequential_application(
        a in -20.0f64..20.0, s in 0.8f64..1.2, dx in -10.0f64..10.0,
        b in -20.0f64..20.0, t in 0.8f64..1.2, dy in -10.0f64..10.0,
    ) {
        let t1 = AffineTransform::similarity(a, s, 50.0, 40.0, dx, dy);
        let t2 = AffineTransform::similarity(b, t, 30.0, 60.0, dy, dx);
        let both = t2.compose(&t1);
        for (x, y) in [(0.0, 0.0), (99.0, 0.0), (0.0, 79.0), (99.0, 79.0)] {
            let (x1, y1) = t1.apply(x, y);
            let (x2, y2) = t2.apply(x1, y1);
            let (x3, y3) = both.apply(x, y);
            prop_assert!((x2 - x3).hypot(y2 - y3) <= 0.5);
        }
    }
}

#[test]
fn self_similarity_is_the_floor() {
    let f = working_nissl(8);
    let base = similarity(&f, &f, &AffineTransform::IDENTITY).unwrap();
    for t in [AffineTransform::translation(1.0, 1.0), AffineTransform::similarity(5.0, 0.95, 80.0, 60.0, 2.0, 0.0)] {
        assert!(base <= similarity(&f, &f, &t).unwrap());
    }
}
