//! Wilcoxon rank-sum tests between ages and developmental pattern
//! classification.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};
use crate::quantify::DensityGroup;
use crate::section::{Age, Marker};

/// Largest pooled sample size handled by exact enumeration.
pub const EXACT_LIMIT: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Rank sum of the smaller sample (the first when sizes are equal).
    pub statistic: f64,
    pub p_two_sided: f64,
    pub method: Method,
    pub m: usize,
    pub n: usize,
}

/// Mid-ranks (1-based) of the pooled sample.
fn mid_ranks(pooled: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn ranksum(x: &[f64], y: &[f64]) -> Result<RankSumResult> {
    ranksum_with(x, y, MethodChoice::Auto)
}

pub fn ranksum_with(x: &[f64], y: &[f64], choice: MethodChoice) -> Result<RankSumResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySample);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "rank-sum sample".into(),
        });
    }
    let (small, large) = if x.len() <= y.len() { (x, y) } else { (y, x) };
    let pooled: Vec<f64> = small.iter().chain(large).copied().collect();
    let ranks = mid_ranks(&pooled);
    let (m, n) = (small.len(), large.len());
    let w: f64 = ranks[..m].iter().sum();
    let exact = match choice {
        MethodChoice::Auto => m + n <= EXACT_LIMIT,
        MethodChoice::Exact => true,
        MethodChoice::Normal => false,
    };
    let (p, method) = if exact {
        (exact_p(&ranks, m, w), Method::Exact)
    } else {
        (normal_p(&ranks, m, n, w), Method::NormalApproximation)
    };
    Ok(RankSumResult {
        statistic: w,
        p_two_sided: p,
        method,
        m,
        n,
    })
}

/// Null distribution of the doubled rank sum over all `C(N, m)` subsets,
/// then twice the smaller tail.
fn exact_p(ranks: &[f64], m: usize, w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled sum s.
    let mut ways = vec![vec![0.0f64; max_sum + 1]; m + 1];
    ways[0][0] = 1.0;
    for &r in &doubled {
        for k in (1..=m).rev() {
            let (lo, hi) = ways.split_at_mut(k);
            for s in (r..=max_sum).rev() {
                hi[0][s] += lo[k - 1][s - r];
            }
        }
    }
    let target = (2.0 * w).round() as usize;
    let total: f64 = ways[m].iter().sum();
    let below: f64 = ways[m][..=target].iter().sum();
    let above: f64 = ways[m][target..].iter().sum();
    (2.0 * below.min(above) / total).min(1.0)
}

fn normal_p(ranks: &[f64], m: usize, n: usize, w: f64) -> f64 {
    let big_n = (m + n) as f64;
    let mean = m as f64 * (big_n + 1.0) / 2.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        ties += t * t * t - t;
        i += j;
    }
    let var = m as f64 * n as f64 / 12.0 * ((big_n + 1.0) - ties / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = StdNormal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "≅")]
    Similar,
    #[serde(rename = "<")]
    Less,
    #[serde(rename = ">")]
    Greater,
}

impl Relation {
    pub fn mirrored(self) -> Relation {
        match self {
            Relation::Less => Relation::Greater,
            Relation::Greater => Relation::Less,
            Relation::Similar => Relation::Similar,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Relation::Similar => "≅",
            Relation::Less => "<",
            Relation::Greater => ">",
        }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        (s[k / 2 - 1] + s[k / 2]) / 2.0
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Relation of `x` to `y` and the test's p-value.
pub fn relation(x: &[f64], y: &[f64], alpha: f64) -> Result<(Relation, f64)> {
    check_alpha(alpha)?;
    let p = ranksum(x, y)?.p_two_sided;
    if p >= alpha {
        return Ok((Relation::Similar, p));
    }
    let (mx, my) = (median(x), median(y));
    let rel = if mx < my {
        Relation::Less
    } else if mx > my {
        Relation::Greater
    } else {
        log::warn!("significant difference (p = {p}) with equal medians; reporting as similar");
        Relation::Similar
    };
    Ok((rel, p))
}

/// Pair of relations between consecutive ages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pattern {
    pub early: Relation,
    pub late: Relation,
}

impl Pattern {
    /// The six shapes reported for regional development, in cluster order.
    pub const OBSERVED: [Pattern; 6] = [
        Pattern::new(Relation::Similar, Relation::Greater),
        Pattern::new(Relation::Less, Relation::Greater),
        Pattern::new(Relation::Greater, Relation::Similar),
        Pattern::new(Relation::Greater, Relation::Less),
        Pattern::new(Relation::Similar, Relation::Less),
        Pattern::new(Relation::Similar, Relation::Similar),
    ];

    pub const fn new(early: Relation, late: Relation) -> Self {
        Pattern { early, late }
    }

    /// 1-based cluster number for observed shapes.
    pub fn cluster(&self) -> Option<usize> {
        Pattern::OBSERVED.iter().position(|p| p == self).map(|i| i + 1)
    }

    pub fn reversed(&self) -> Pattern {
        Pattern::new(self.late.mirrored(), self.early.mirrored())
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P4 {} P14 {} P56", self.early.symbol(), self.late.symbol())
    }
}

/// Significance tier marker for a p-value.
pub fn tier(p: f64) -> &'static str {
    if p <= 0.001 {
        "***"
    } else if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        "ns"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternFit {
    pub pattern: Pattern,
    pub p_early: f64,
    pub p_late: f64,
}

/// Classifies samples ordered by age (P4, P14, P56).
pub fn classify_cluster(samples: [&[f64]; 3], alpha: f64) -> Result<PatternFit> {
    let (early, p_early) = relation(samples[0], samples[1], alpha)?;
    let (late, p_late) = relation(samples[1], samples[2], alpha)?;
    Ok(PatternFit {
        pattern: Pattern::new(early, late),
        p_early,
        p_late,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub region: u32,
    pub marker: Marker,
    pub pattern: Pattern,
    pub p_early: f64,
    pub p_late: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    pub alpha: f64,
    /// Divide alpha by the number of tests performed.
    pub bonferroni: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { alpha: 0.05, bonferroni: false }
    }
}

/// Classifies every (region, marker) with samples at all three ages;
/// incomplete ones are skipped.
pub fn classify_groups(groups: &[DensityGroup], cfg: &StatsConfig) -> Result<Vec<ClusterAssignment>> {
    use std::collections::BTreeMap;
    let mut by_key: BTreeMap<(u32, Marker), [Option<&[f64]>; 3]> = BTreeMap::new();
    for g in groups {
        let slot = Age::ALL.iter().position(|a| *a == g.age).expect("known age");
        by_key.entry((g.region, g.marker)).or_default()[slot] = Some(&g.densities);
    }
    let complete: Vec<_> = by_key
        .into_iter()
        .filter_map(|(k, v)| match v {
            [Some(a), Some(b), Some(c)] => Some((k, [a, b, c])),
            _ => {
                log::info!("region {} {} lacks an age; not classified", k.0, k.1);
                None
            }
        })
        .collect();
    let alpha = if cfg.bonferroni && !complete.is_empty() {
        cfg.alpha / (2 * complete.len()) as f64
    } else {
        cfg.alpha
    };
    complete
        .into_iter()
        .map(|((region, marker), s)| {
            let fit = classify_cluster(s, alpha)?;
            Ok(ClusterAssignment {
                region,
                marker,
                pattern: fit.pattern,
                p_early: fit.p_early,
                p_late: fit.p_late,
            })
        })
        .collect()
}

pub fn write_cluster_tsv(rows: &[ClusterAssignment], path: &Path) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    wr.write_record(["region", "marker", "pattern", "cluster", "p_early", "p_late", "tier_early", "tier_late"])?;
    for r in rows {
        wr.write_record([
            r.region.to_string(),
            r.marker.to_string(),
            r.pattern.to_string(),
            r.pattern.cluster().map(|c| c.to_string()).unwrap_or_else(|| "-".into()),
            format!("{:.6e}", r.p_early),
            format!("{:.6e}", r.p_late),
            tier(r.p_early).to_string(),
            tier(r.p_late).to_string(),
        ])?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

/// Per-section densities for three ages. Sections sit at matched
/// medio-lateral positions, so all ages share one density profile across
/// sections; an age's level scales that profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterGenerator {
    pub sections: usize,
    pub base_density: f64,
    /// Relative amplitude of the shared medio-lateral profile.
    pub profile: f64,
    /// Relative per-section noise.
    pub noise: f64,
    /// Factor separating unequal ages.
    pub effect: f64,
}

impl Default for ClusterGenerator {
    fn default() -> Self {
        ClusterGenerator {
            sections: 10,
            base_density: 0.002,
            profile: 0.15,
            noise: 0.03,
            effect: 1.6,
        }
    }
}

impl ClusterGenerator {
    /// Relative level of each age under `pattern`.
    pub fn levels(&self, pattern: Pattern) -> [f64; 3] {
        let step = |r: Relation| match r {
            Relation::Similar => 1.0,
            Relation::Less => self.effect,
            Relation::Greater => 1.0 / self.effect,
        };
        let l14 = step(pattern.early);
        [1.0, l14, l14 * step(pattern.late)]
    }

    pub fn sample<R: Rng>(&self, pattern: Pattern, rng: &mut R) -> Result<[Vec<f64>; 3]> {
        if self.sections == 0 || !(self.effect > 0.0) || self.noise < 0.0 {
            return Err(Error::InvalidArgument("generator needs sections > 0, effect > 0, noise >= 0".into()));
        }
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let shape: Vec<f64> = (0..self.sections)
            .map(|i| 1.0 + self.profile * (phase + std::f64::consts::PI * i as f64 / self.sections as f64).sin())
            .collect();
        let levels = self.levels(pattern);
        let mut out: [Vec<f64>; 3] = Default::default();
        for (slot, level) in out.iter_mut().zip(levels) {
            *slot = shape
                .iter()
                .map(|s| (self.base_density * level * s * (1.0 + noise.sample(rng))).clamp(0.0, 1.0))
                .collect();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn tiers() {
        assert_eq!(tier(0.0005), "***");
        assert_eq!(tier(0.01), "**");
        assert_eq!(tier(0.05), "*");
        assert_eq!(tier(0.2), "ns");
    }

    #[test]
    fn pattern_labels() {
        assert_eq!(Pattern::OBSERVED[0].to_string(), "P4 ≅ P14 > P56");
        assert_eq!(Pattern::OBSERVED[5].cluster(), Some(6));
        assert_eq!(Pattern::new(Relation::Less, Relation::Less).cluster(), None);
    }
}
