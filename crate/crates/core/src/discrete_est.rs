//! Estimators whose outputs are restricted to a finite admissible set
//! `theta_0 < ... < theta_N`. The posterior is a union of rectangles, one per
//! admissible value, over the zones of `p` closest to that value.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coverage::IntervalTable;
use crate::error::{Error, Result};
use crate::proportions::{Interval, PointEstimate};

pub const FIXED_POINT_TOL: f64 = 1e-9;
pub const MAX_FIXED_POINT_ITERS: usize = 500;
/// Rectangles more than this many e-folds below the tallest one are dropped.
const LOG_HEIGHT_WINDOW: f64 = 40.0;
const DAMPING_TRIGGER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscretePrior {
    /// Prior mass of each zone proportional to its width.
    UniformWidth,
    /// Width times the probability that one bin of a b-bin histogram holds j counts.
    Combinatorial,
}

impl DiscretePrior {
    pub fn name(&self) -> &'static str {
        match self {
            DiscretePrior::UniformWidth => "uniform_width",
            DiscretePrior::Combinatorial => "combinatorial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform_width" => Ok(DiscretePrior::UniformWidth),
            "combinatorial" => Ok(DiscretePrior::Combinatorial),
            other => Err(Error::arg(format!("unknown discrete prior '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleSet {
    pub total: u64,
    pub bins: u32,
    pub xi: f64,
    pub prior: DiscretePrior,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub width: Vec<f64>,
    /// Normalized prior mass of each zone.
    pub pi: Vec<f64>,
    /// Log of the per-value prior factor (zero for the uniform-width prior).
    ln_factor: Vec<f64>,
}

impl AdmissibleSet {
    /// Builds zones and prior weights around the given admissible values.
    pub fn from_thetas(total: u64, bins: u32, xi: f64, prior: DiscretePrior, theta: Vec<f64>) -> Result<Self> {
        if bins < 2 {
            return Err(Error::arg(format!("need at least 2 bins, got {bins}")));
        }
        check_xi(xi)?;
        if theta.len() as u64 != total + 1 {
            return Err(Error::arg(format!("expected {} admissible values, got {}", total + 1, theta.len())));
        }
        if theta.iter().any(|t| !(*t > 0.0 && *t < 1.0)) || theta.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Numeric {
                routine: "discrete_est",
                detail: "admissible values must be strictly increasing inside (0,1)".into(),
            });
        }
        let k = theta.len();
        let mut phi = Vec::with_capacity(k + 1);
        phi.push(0.0);
        for w in theta.windows(2) {
            phi.push(0.5 * (w[0] + w[1]));
        }
        phi.push(1.0);
        let width: Vec<f64> = phi.windows(2).map(|w| w[1] - w[0]).collect();
        let ln_factor = match prior {
            DiscretePrior::UniformWidth => vec![0.0; k],
            DiscretePrior::Combinatorial => ln_p_stat_table(total, bins),
        };
        let top = ln_factor.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = width.iter().zip(&ln_factor).map(|(w, l)| w * (l - top).exp()).collect();
        let s: f64 = raw.iter().sum();
        let pi = raw.iter().map(|r| r / s).collect();
        Ok(Self { total, bins, xi, prior, theta, phi, width, pi, ln_factor })
    }
}

fn check_xi(xi: f64) -> Result<()> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::arg(format!("confidence must lie in (0,1), got {xi}")));
    }
    Ok(())
}

/// Probability that one bin of a `b`-bin histogram holds exactly `j` of `N`
/// counts, all compositions equally likely.
pub fn p_stat(j: u64, total: u64, bins: u32) -> f64 {
    assert!(j <= total && bins >= 2);
    ln_p_stat_table(total, bins)[j as usize].exp()
}

/// `ln p_stat(j)` for `j = 0..=N` by the downward recursion.
pub fn ln_p_stat_table(total: u64, bins: u32) -> Vec<f64> {
    let b = bins as f64;
    let n = total as f64;
    let mut out = Vec::with_capacity(total as usize + 1);
    let mut l = (b - 1.0).ln() - (n + b - 1.0).ln();
    out.push(l);
    for j in 0..total {
        let r = (total - j) as f64;
        l += r.ln() - (r + b - 2.0).ln();
        out.push(l);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub left: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePosterior {
    pub n: u64,
    /// Index of the admissible value owning `rects[0]`.
    pub first: usize,
    pub rects: Vec<Rect>,
}

impl DiscretePosterior {
    /// Wraps adjacent rectangles, rescaling heights to unit total area.
    pub fn from_rects(n: u64, first: usize, mut rects: Vec<Rect>) -> Result<Self> {
        let area: f64 = rects.iter().map(Rect::area).sum();
        if rects.is_empty() || !(area > 0.0 && area.is_finite()) {
            return Err(Error::Degenerate("posterior has no positive area".into()));
        }
        for r in &mut rects {
            r.height /= area;
        }
        Ok(Self { n, first, rects })
    }

    pub fn area(&self) -> f64 {
        self.rects.iter().map(Rect::area).sum()
    }

    /// Second moment of the rectangle density about `c`.
    pub fn second_moment_about(&self, c: f64) -> f64 {
        self.rects
            .iter()
            .map(|r| {
                let a = r.left - c;
                let b = r.left + r.width - c;
                r.height * (b * b * b - a * a * a) / 3.0
            })
            .sum()
    }
}

/// Posterior for outcome `n`: rectangle `j` has width `W_j` and height
/// proportional to the zone's prior mass times `theta_j^n (1 - theta_j)^(N - n)`.
pub fn build_posterior(n: u64, set: &AdmissibleSet) -> Result<DiscretePosterior> {
    if n > set.total {
        return Err(Error::arg(format!("outcome {n} exceeds N={}", set.total)));
    }
    let big_n = set.total as f64;
    let nf = n as f64;
    let ln_h = |j: usize| {
        let t = set.theta[j];
        set.width[j].ln() + set.ln_factor[j] + nf * t.ln() + (big_n - nf) * (-t).ln_1p()
    };
    let k = set.theta.len();
    let start = n as usize;
    let mut top = ln_h(start);
    let mut lo = start;
    while lo > 0 {
        let v = ln_h(lo - 1);
        if v < top - LOG_HEIGHT_WINDOW {
            break;
        }
        top = top.max(v);
        lo -= 1;
    }
    let mut hi = start;
    while hi + 1 < k {
        let v = ln_h(hi + 1);
        if v < top - LOG_HEIGHT_WINDOW {
            break;
        }
        top = top.max(v);
        hi += 1;
    }
    let rects = (lo..=hi)
        .map(|j| Rect { left: set.phi[j], width: set.width[j], height: (ln_h(j) - top).exp() })
        .collect();
    DiscretePosterior::from_rects(n, lo, rects)
}

/// Equal-tailed interval: each bound is where the accumulated area from its
/// edge reaches `(1 - xi)/2`, interpolating inside the straddling rectangle.
pub fn discrete_interval(post: &DiscretePosterior, xi: f64) -> Result<Interval> {
    check_xi(xi)?;
    let tail = 0.5 * (1.0 - xi);
    let mut acc = 0.0;
    let mut lo = post.rects.last().map(|r| r.left + r.width).unwrap_or(1.0);
    for r in &post.rects {
        let a = r.area();
        if acc + a >= tail {
            lo = r.left + (tail - acc) / r.height;
            break;
        }
        acc += a;
    }
    acc = 0.0;
    let mut hi = post.rects.first().map(|r| r.left).unwrap_or(0.0);
    for r in post.rects.iter().rev() {
        let a = r.area();
        if acc + a >= tail {
            hi = r.left + r.width - (tail - acc) / r.height;
            break;
        }
        acc += a;
    }
    let lo = lo.clamp(0.0, 1.0);
    let hi = hi.clamp(0.0, 1.0);
    Ok(Interval::new(lo.min(hi), hi.max(lo)))
}

/// Medians of the current intervals, one per outcome.
fn fixed_point_map(set: &AdmissibleSet) -> Result<Vec<f64>> {
    (0..=set.total)
        .map(|n| {
            let iv = discrete_interval(&build_posterior(n, set)?, set.xi)?;
            Ok(0.5 * (iv.lo + iv.hi))
        })
        .collect()
}

/// Admissible values that are reproduced as the midpoints of their own
/// equal-tailed intervals.
pub fn self_consistent_thetas(total: u64, bins: u32, xi: f64, prior: DiscretePrior) -> Result<AdmissibleSet> {
    if total == 0 {
        return Err(Error::arg("self-consistent set needs N >= 1"));
    }
    let nf = total as f64;
    let edge = 1.0 / (2.0 * (nf + 1.0));
    let mut theta: Vec<f64> = (0..=total).map(|j| j as f64 / nf).collect();
    theta[0] = edge;
    theta[total as usize] = 1.0 - edge;

    let mut set = AdmissibleSet::from_thetas(total, bins, xi, prior, theta)?;
    let mut last_res = f64::INFINITY;
    let mut rises = 0usize;
    let mut res = f64::INFINITY;
    for _ in 0..MAX_FIXED_POINT_ITERS {
        let target = fixed_point_map(&set)?;
        res = target.iter().zip(&set.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if res < FIXED_POINT_TOL {
            return AdmissibleSet::from_thetas(total, bins, xi, prior, target);
        }
        if res > last_res {
            rises += 1;
        }
        last_res = res;
        let step = if rises > DAMPING_TRIGGER { 0.5 } else { 1.0 };
        let next: Vec<f64> = set.theta.iter().zip(&target).map(|(t, m)| t + step * (m - t)).collect();
        set = AdmissibleSet::from_thetas(total, bins, xi, prior, next).map_err(|_| Error::NonConvergence {
            routine: "self_consistent_thetas",
            iterations: 0,
            residual: res,
            last: target.clone(),
        })?;
    }
    Err(Error::NonConvergence {
        routine: "self_consistent_thetas",
        iterations: MAX_FIXED_POINT_ITERS,
        residual: res,
        last: set.theta,
    })
}

/// Largest movement of any admissible value under one more update.
pub fn fixed_point_residual(set: &AdmissibleSet) -> Result<f64> {
    let target = fixed_point_map(set)?;
    Ok(target.iter().zip(&set.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Intervals for every outcome `n = 0..=N`.
pub fn interval_table(set: &AdmissibleSet) -> Result<IntervalTable> {
    let ivs = (0..=set.total)
        .map(|n| discrete_interval(&build_posterior(n, set)?, set.xi))
        .collect::<Result<Vec<_>>>()?;
    IntervalTable::new(set.total, set.xi, ivs)
}

/// `p_hat = theta_n`, with sigma from the posterior second moment about it.
pub fn discrete_point_estimate(n: u64, set: &AdmissibleSet) -> Result<PointEstimate> {
    let post = build_posterior(n, set)?;
    let p_hat = set.theta[n as usize];
    Ok(PointEstimate { p_hat, sigma_hat: post.second_moment_about(p_hat).max(0.0).sqrt(), n, total: set.total })
}

/// Expected number of bins (rounded) holding exactly `c` counts, for each
/// `c` in `counts`.
pub fn expected_bins_table(total: u64, bins: u32, counts: &[u64]) -> Result<Vec<u64>> {
    if bins < 2 {
        return Err(Error::arg(format!("need at least 2 bins, got {bins}")));
    }
    let table = ln_p_stat_table(total, bins);
    Ok(counts
        .iter()
        .map(|&c| if c > total { 0 } else { (bins as f64 * table[c as usize].exp()).round() as u64 })
        .collect())
}

pub fn cache_file_name(total: u64, bins: u32, xi: f64, prior: DiscretePrior) -> String {
    format!("theta_N{total}_b{bins}_xi{xi}_{}.csv", prior.name())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRow {
    #[serde(rename = "N")]
    total: u64,
    b: u32,
    xi: f64,
    prior: String,
    j: u64,
    theta_j: f64,
    pi_j: f64,
}

pub fn write_cache(set: &AdmissibleSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (j, (t, p)) in set.theta.iter().zip(&set.pi).enumerate() {
        w.serialize(CacheRow {
            total: set.total,
            b: set.bins,
            xi: set.xi,
            prior: set.prior.name().into(),
            j: j as u64,
            theta_j: *t,
            pi_j: *p,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a cached set and rejects it unless it still satisfies the fixed
/// point to within tolerance.
pub fn read_cache(path: &Path) -> Result<AdmissibleSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<CacheRow>().enumerate() {
        rows.push(rec.map_err(|e| Error::Parse { path: path.into(), line: i as u64 + 2, detail: e.to_string() })?);
    }
    let first = rows.first().ok_or_else(|| Error::Parse { path: path.into(), line: 1, detail: "empty cache".into() })?;
    let (total, bins, xi, prior) = (first.total, first.b, first.xi, DiscretePrior::parse(&first.prior)?);
    for (i, row) in rows.iter().enumerate() {
        if row.j != i as u64 || row.total != total || row.b != bins || row.xi != xi {
            return Err(Error::Parse { path: path.into(), line: i as u64 + 2, detail: "inconsistent cache row".into() });
        }
    }
    let set = AdmissibleSet::from_thetas(total, bins, xi, prior, rows.iter().map(|r| r.theta_j).collect())?;
    let res = fixed_point_residual(&set)?;
    if res >= 10.0 * FIXED_POINT_TOL {
        return Err(Error::Parse { path: path.into(), line: 0, detail: format!("cached set is not a fixed point (moves {res:e})") });
    }
    Ok(set)
}

/// Loads the set from `dir` if present and valid, otherwise computes and stores it.
pub fn cached_thetas(dir: &Path, total: u64, bins: u32, xi: f64, prior: DiscretePrior) -> Result<AdmissibleSet> {
    let path: PathBuf = dir.join(cache_file_name(total, bins, xi, prior));
    if path.exists() {
        if let Ok(set) = read_cache(&path) {
            return Ok(set);
        }
    }
    let set = self_consistent_thetas(total, bins, xi, prior)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_cache(&set, &path)?;
    Ok(set)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.into(), line: 0, detail: format!("{other:?}") },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn choose(n: u64, k: u64) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn p_stat_examples() {
        assert!((p_stat(0, 5, 3) - 6.0 / 21.0).abs() < 1e-15);
        for j in 0..=9 {
            assert!((p_stat(j, 9, 2) - 0.1).abs() < 1e-15);
        }
        let s: f64 = (0..=10).map(|j| p_stat(j, 10, 4)).sum();
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn p_stat_recursion_matches_binomial_ratio() {
        for total in [1u64, 7, 40, 123, 200] {
            for bins in [2u32, 3, 10, 100] {
                let tab = ln_p_stat_table(total, bins);
                let b = bins as u64;
                let den = choose(total + b - 1, b - 1);
                for j in 0..=total {
                    let want = choose(total - j + b - 2, b - 2) / den;
                    let got = tab[j as usize].exp();
                    assert!(((got - want) / want).abs() < 1e-12, "N={total} b={bins} j={j}");
                }
            }
        }
    }

    #[test]
    fn expected_bins_for_forty_counts() {
        let got = expected_bins_table(40, 100, &(0..12).collect::<Vec<_>>()).unwrap();
        assert_eq!(&got[..5], &[71, 21, 6, 2, 0]);
        let tab = ln_p_stat_table(40, 100);
        let total: f64 = tab.iter().map(|l| 100.0 * l.exp()).sum();
        assert!((total - 100.0).abs() < 1e-10);
    }

    #[test]
    fn simple_intervals() {
        let one = DiscretePosterior::from_rects(0, 0, vec![Rect { left: 0.0, width: 1.0, height: 3.0 }]).unwrap();
        let iv = discrete_interval(&one, 0.95).unwrap();
        assert!((iv.lo - 0.025).abs() < 1e-15 && (iv.hi - 0.975).abs() < 1e-15);
        let two = DiscretePosterior::from_rects(
            0,
            0,
            vec![Rect { left: 0.0, width: 0.5, height: 1.0 }, Rect { left: 0.5, width: 0.5, height: 1.0 }],
        )
        .unwrap();
        let iv = discrete_interval(&two, 0.5).unwrap();
        assert!((iv.lo - 0.25).abs() < 1e-15 && (iv.hi - 0.75).abs() < 1e-15);
        assert!(discrete_interval(&two, 1.0).is_err());
    }

    #[test]
    fn five_observation_fixed_point() {
        let set = self_consistent_thetas(5, 2, 0.95, DiscretePrior::UniformWidth).unwrap();
        let want = [0.21196, 0.32965, 0.48010, 0.51990, 0.67035, 0.78804];
        for (g, w) in set.theta.iter().zip(want) {
            assert!((g - w).abs() < 5e-5, "{:?}", set.theta);
        }
        for j in 0..=5 {
            assert!((set.theta[j] + set.theta[5 - j] - 1.0).abs() < 1e-9);
        }
        assert!(fixed_point_residual(&set).unwrap() < FIXED_POINT_TOL);
        let comb = self_consistent_thetas(5, 2, 0.95, DiscretePrior::Combinatorial).unwrap();
        for (a, b) in set.theta.iter().zip(&comb.theta) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((discrete_point_estimate(0, &set).unwrap().p_hat - 0.21196).abs() < 5e-5);
        assert!((discrete_point_estimate(5, &set).unwrap().p_hat - 0.78804).abs() < 5e-5);
        assert!(discrete_point_estimate(6, &set).is_err());
    }

    #[test]
    fn interval_matches_fine_accumulation() {
        let set = self_consistent_thetas(5, 2, 0.95, DiscretePrior::UniformWidth).unwrap();
        let post = build_posterior(0, &set).unwrap();
        let iv = discrete_interval(&post, 0.95).unwrap();
        // Oracle: walk [0,1] in 1e-7 steps accumulating density.
        let density = |p: f64| {
            post.rects.iter().find(|r| p >= r.left && p < r.left + r.width).map(|r| r.height).unwrap_or(0.0)
        };
        let h = 1e-7;
        let (mut acc, mut k) = (0.0, 0u64);
        while acc + density((k as f64 + 0.5) * h) * h < 0.025 {
            acc += density((k as f64 + 0.5) * h) * h;
            k += 1;
        }
        assert!((iv.lo - k as f64 * h).abs() < 2e-7, "{} vs {}", iv.lo, k as f64 * h);
        let (mut acc, mut k) = (0.0, 0u64);
        while acc + density(1.0 - (k as f64 + 0.5) * h) * h < 0.025 {
            acc += density(1.0 - (k as f64 + 0.5) * h) * h;
            k += 1;
        }
        assert!((iv.hi - (1.0 - k as f64 * h)).abs() < 2e-7);
    }

    #[test]
    fn posterior_mirror_symmetry() {
        let set = self_consistent_thetas(8, 2, 0.9, DiscretePrior::UniformWidth).unwrap();
        let a = build_posterior(2, &set).unwrap();
        let b = build_posterior(6, &set).unwrap();
        assert_eq!(a.rects.len(), b.rects.len());
        for (ra, rb) in a.rects.iter().zip(b.rects.iter().rev()) {
            assert!((ra.height - rb.height).abs() < 1e-9 && (ra.width - rb.width).abs() < 1e-9);
        }
    }

    #[test]
    fn single_value_set_is_one_rectangle() {
        let set = AdmissibleSet::from_thetas(0, 2, 0.95, DiscretePrior::UniformWidth, vec![0.5]).unwrap();
        let post = build_posterior(0, &set).unwrap();
        assert_eq!(post.rects.len(), 1);
        assert!((post.area() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn discrete_coverage_near_nominal() {
        let grid = crate::coverage::interior_grid(0.0, 1.0, 1000);
        for total in [10u64, 25, 50] {
            let set = self_consistent_thetas(total, 2, 0.95, DiscretePrior::UniformWidth).unwrap();
            let t = interval_table(&set).unwrap();
            let c = crate::coverage::coverage_on_grid(&t, &grid);
            let mean_abs = c.iter().map(|c| (c - 0.95).abs()).sum::<f64>() / c.len() as f64;
            assert!(mean_abs <= 0.05, "N={total}: {mean_abs}");
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = cached_thetas(dir.path(), 12, 10, 0.9, DiscretePrior::Combinatorial).unwrap();
        let path = dir.path().join(cache_file_name(12, 10, 0.9, DiscretePrior::Combinatorial));
        assert!(path.exists());
        let b = read_cache(&path).unwrap();
        assert_eq!(a.theta, b.theta);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("N,b,xi,prior,j,theta_j,pi_j"));
        fs::write(&path, text.replacen(",0,", ",0,0.4", 1).replace(",1,0.", ",1,0.0")).unwrap();
        assert!(read_cache(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn set_and_posterior_invariants(
            mut raw in proptest::collection::vec(0.001f64..0.999, 1..40),
            bins in 2u32..120,
            comb in any::<bool>(),
            pick in 0usize..1000,
        ) {
            raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
            raw.dedup();
            let total = raw.len() as u64 - 1;
            let prior = if comb { DiscretePrior::Combinatorial } else { DiscretePrior::UniformWidth };
            let set = AdmissibleSet::from_thetas(total, bins, 0.9, prior, raw).unwrap();
            prop_assert!((set.width.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            prop_assert!((set.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let n = (pick as u64) % (total + 1);
            let post = build_posterior(n, &set).unwrap();
            prop_assert!((post.area() - 1.0).abs() < 1e-12);
            let est = discrete_point_estimate(n, &set).unwrap();
            prop_assert!(est.sigma_hat.is_finite());
        }
    }
}
