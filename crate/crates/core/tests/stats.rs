use denerd_core::stats::{classify_cluster, ranksum, ranksum_with, relation, ClusterGenerator, Method, MethodChoice, Pattern, Relation};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-sided p by listing every assignment of pooled mid-ranks to the
/// first sample.
fn brute_force_p(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks: Vec<f64> = pooled
        .iter()
        .map(|v| {
            let below = pooled.iter().filter(|w| *w < v).count() as f64;
            let equal = pooled.iter().filter(|w| *w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let (small, m) = if x.len() <= y.len() { (0..x.len(), x.len()) } else { (x.len()..pooled.len(), y.len()) };
    let observed: f64 = small.map(|i| ranks[i]).sum();
    let n_total = pooled.len();
    let (mut below, mut above, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n_total) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let s: f64 = (0..n_total).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        total += 1;
        if s <= observed + 1e-9 {
            below += 1;
        }
        if s >= observed - 1e-9 {
            above += 1;
        }
    }
    (2.0 * below.min(above) as f64 / total as f64).min(1.0)
}

#[test]
fn separated_triples_give_a_tenth() {
    let r = ranksum(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert_eq!(r.method, Method::Exact);
    assert_eq!(r.statistic, 6.0);
    assert_eq!(r.p_two_sided, 0.10);
}

#[test]
fn single_tied_pair_is_indistinguishable() {
    assert_eq!(ranksum(&[5.0], &[5.0]).unwrap().p_two_sided, 1.0);
}

#[test]
fn empty_sample_rejected() {
    assert!(ranksum(&[], &[1.0]).is_err());
    assert!(ranksum(&[1.0], &[]).is_err());
}

#[test]
fn exact_matches_enumeration_for_small_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for m in 1..=8 {
        for n in 1..=8 {
            for trial in 0..3 {
                // Integer draws from a narrow range produce ties.
                let hi = if trial == 0 { 1000 } else { 6 };
                let x: Vec<f64> = (0..m).map(|_| rng.gen_range(0..hi) as f64).collect();
                let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..hi) as f64).collect();
                let got = ranksum(&x, &y).unwrap();
                let want = brute_force_p(&x, &y);
                assert!((got.p_two_sided - want).abs() < 1e-12, "m={m} n={n} {x:?} {y:?}: {} vs {want}", got.p_two_sided);
            }
        }
    }
}

#[test]
fn normal_approximation_tracks_exact_at_twelve() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let shift = rng.gen_range(0.0..1.5);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0) + shift).collect();
        let e = ranksum_with(&x, &y, MethodChoice::Exact).unwrap().p_two_sided;
        let a = ranksum_with(&x, &y, MethodChoice::Normal).unwrap().p_two_sided;
        assert!((e - a).abs() <= 0.01, "exact {e} normal {a}");
    }
}

#[test]
fn large_samples_use_the_approximation() {
    let x: Vec<f64> = (0..13).map(f64::from).collect();
    let y: Vec<f64> = (0..12).map(|v| v as f64 + 0.5).collect();
    assert_eq!(ranksum(&x, &y).unwrap().method, Method::NormalApproximation);
}

#[test]
fn separated_eights_are_less() {
    let x: Vec<f64> = (0..8).map(f64::from).collect();
    let y: Vec<f64> = (10..18).map(f64::from).collect();
    let (rel, p) = relation(&x, &y, 0.05).unwrap();
    assert_eq!(rel, Relation::Less);
    assert!((p - 2.0 / 12870.0).abs() < 1e-15);
}

#[test]
fn identical_samples_are_similar() {
    let x = [0.1, 0.2, 0.3, 0.4];
    assert_eq!(relation(&x, &x, 0.05).unwrap().0, Relation::Similar);
}

#[test]
fn alpha_one_only_tolerates_p_one() {
    let x = [1.0, 2.0, 3.0];
    assert_eq!(relation(&x, &x, 1.0).unwrap().0, Relation::Similar);
    assert_eq!(relation(&x, &[4.0, 5.0, 6.0], 1.0).unwrap().0, Relation::Less);
    assert!(relation(&x, &x, 0.0).is_err());
}

#[test]
fn constructed_patterns_are_recovered() {
    let g = ClusterGenerator::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in [Pattern::OBSERVED[0], Pattern::OBSERVED[1], Pattern::OBSERVED[5]] {
        let s = g.sample(p, &mut rng).unwrap();
        let fit = classify_cluster([&s[0], &s[1], &s[2]], 0.05).unwrap();
        assert_eq!(fit.pattern, p);
    }
    assert_eq!(Pattern::OBSERVED[0].to_string(), "P4 ≅ P14 > P56");
    assert_eq!(Pattern::OBSERVED[1].to_string(), "P4 < P14 > P56");
}

#[test]
fn identical_ages_are_cluster_six() {
    let s = [0.01, 0.012, 0.015, 0.011];
    let fit = classify_cluster([&s, &s, &s], 0.05).unwrap();
    assert_eq!(fit.pattern.to_string(), "P4 ≅ P14 ≅ P56");
    assert_eq!(fit.pattern.cluster(), Some(6));
}

proptest! {
    #[test]
    fn p_is_symmetric(x in prop::collection::vec(0u8..20, 1..10), y in prop::collection::vec(0u8..20, 1..10)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        prop_assert_eq!(ranksum(&x, &y).unwrap().p_two_sided, ranksum(&y, &x).unwrap().p_two_sided);
    }

    #[test]
    fn p_is_rank_invariant(x in prop::collection::vec(-5.0f64..5.0, 1..12), y in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let f = |v: &f64| v.exp() * 3.0 + 1.0;
        let tx: Vec<f64> = x.iter().map(f).collect();
        let ty: Vec<f64> = y.iter().map(f).collect();
        prop_assert_eq!(ranksum(&x, &y).unwrap().p_two_sided, ranksum(&tx, &ty).unwrap().p_two_sided);
    }

    #[test]
    fn reversing_time_mirrors_the_pattern(a in prop::collection::vec(0.0f64..1.0, 2..8), b in prop::collection::vec(0.0f64..1.0, 2..8), c in prop::collection::vec(0.0f64..1.0, 2..8)) {
        let fwd = classify_cluster([&a, &b, &c], 0.05).unwrap();
        let back = classify_cluster([&c, &b, &a], 0.05).unwrap();
        prop_assert_eq!(back.pattern, fwd.pattern.reversed());
    }

    #[test]
    fn p_lies_in_unit_interval(x in prop::collection::vec(0.0f64..1.0, 1..30), y in prop::collection::vec(0.0f64..1.0, 1..30)) {
        let p = ranksum(&x, &y).unwrap().p_two_sided;
        prop_assert!(p > 0.0 && p <= 1.0);
    }
}
