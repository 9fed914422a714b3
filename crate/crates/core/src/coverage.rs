//! Coverage of interval rules: exact summation over all outcomes, Monte
//! Carlo estimates, and the squared mismatch between nominal confidence and
//! coverage over a grid of true proportions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proportions::{Estimator, Interval};
use crate::special::BinomialPmf;

/// One interval per outcome `n = 0..=N` at fixed `N` and confidence `xi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalTable {
    pub total: u64,
    pub xi: f64,
    pub intervals: Vec<Interval>,
}

impl IntervalTable {
    pub fn new(total: u64, xi: f64, intervals: Vec<Interval>) -> Result<Self> {
        if intervals.len() as u64 != total + 1 {
            return Err(Error::arg(format!(
                "interval table for N={total} needs {} entries, got {}",
                total + 1,
                intervals.len()
            )));
        }
        if let Some(bad) = intervals.iter().find(|iv| !(0.0 <= iv.lo && iv.lo <= iv.hi && iv.hi <= 1.0)) {
            return Err(Error::arg(format!("interval {bad:?} is not inside [0,1]")));
        }
        Ok(Self { total, xi, intervals })
    }

    /// Outcomes whose interval contains `p`.
    pub fn covering_outcomes(&self, p: f64) -> Vec<usize> {
        self.intervals
            .iter()
            .enumerate()
            .filter(|(_, iv)| iv.contains(p))
            .map(|(n, _)| n)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveAxis {
    OverN,
    OverP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub axis: CurveAxis,
    pub points: Vec<(f64, f64)>,
}

/// Exact coverage `C(p)`: total binomial probability of the outcomes whose
/// (closed) interval contains `p`.
pub fn exact_coverage(p: f64, table: &IntervalTable) -> f64 {
    exact_coverage_with(&BinomialPmf::new(table.total), p, table)
}

/// As [`exact_coverage`], reusing a prebuilt pmf for the table's `N`.
pub fn exact_coverage_with(pmf: &BinomialPmf, p: f64, table: &IntervalTable) -> f64 {
    debug_assert_eq!(pmf.n(), table.total);
    let mut c = 0.0;
    for (n, iv) in table.intervals.iter().enumerate() {
        if iv.contains(p) {
            c += pmf.pmf(n, p);
        }
    }
    c.clamp(0.0, 1.0)
}

/// Exact coverage at every point of `grid`.
pub fn coverage_on_grid(table: &IntervalTable, grid: &[f64]) -> Vec<f64> {
    let pmf = BinomialPmf::new(table.total);
    grid.iter().map(|&p| exact_coverage_with(&pmf, p, table)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McCoverage {
    pub c_hat: f64,
    pub stderr: f64,
    pub trials: u64,
}

/// Coverage estimated from `trials` binomial(N, p) draws.
pub fn mc_coverage(p: f64, total: u64, estimator: &Estimator, trials: u64, seed: u64) -> Result<McCoverage> {
    if trials == 0 {
        return Err(Error::arg("Monte Carlo coverage needs at least one trial"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("true proportion must lie in [0,1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Binomial::new(total, p).map_err(|e| Error::arg(e.to_string()))?;
    let table = match estimator.posterior.kind {
        crate::proportions::PosteriorKind::DiscreteRect => Some(estimator.interval_table(total)?),
        _ => None,
    };
    let mut memo: Vec<Option<Interval>> = vec![None; total as usize + 1];
    let mut hits = 0u64;
    for _ in 0..trials {
        let n = dist.sample(&mut rng);
        let iv = match memo[n as usize] {
            Some(iv) => iv,
            None => {
                let iv = match &table {
                    Some(t) => t.intervals[n as usize],
                    None => estimator.interval(n, total)?,
                };
                memo[n as usize] = Some(iv);
                iv
            }
        };
        if iv.contains(p) {
            hits += 1;
        }
    }
    let c_hat = hits as f64 / trials as f64;
    Ok(McCoverage {
        c_hat,
        stderr: (c_hat * (1.0 - c_hat) / trials as f64).sqrt(),
        trials,
    })
}

/// Mean of `(xi - C(p))^2` over `p_grid`, for the table built at `alpha0`.
pub fn mismatch_objective<F>(xi: f64, table_builder: F, alpha0: f64, p_grid: &[f64]) -> Result<f64>
where
    F: Fn(f64) -> Result<IntervalTable>,
{
    check_grid(p_grid)?;
    let table = table_builder(alpha0)?;
    Ok(mismatch_of(xi, &coverage_on_grid(&table, p_grid)))
}

pub fn mismatch_of(xi: f64, coverages: &[f64]) -> f64 {
    coverages.iter().map(|c| (xi - c) * (xi - c)).sum::<f64>() / coverages.len() as f64
}

fn check_grid(p_grid: &[f64]) -> Result<()> {
    if p_grid.is_empty() {
        return Err(Error::arg("empty grid of true proportions"));
    }
    if let Some(p) = p_grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::arg(format!("grid point {p} outside (0,1)")));
    }
    Ok(())
}

/// `m` evenly spaced points strictly inside `(lo, hi)`.
pub fn interior_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    (1..=m).map(|k| lo + (hi - lo) * k as f64 / (m + 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// `C(N)` at fixed true proportion.
    OverN { p: f64, ns: Vec<u64> },
    /// `C(p)` at fixed sample size.
    OverP { total: u64, ps: Vec<f64> },
}

/// Exact coverage across a grid of `N` or `p` values.
pub fn coverage_sweep(sweep: &Sweep, estimator: &Estimator) -> Result<CoverageCurve> {
    match sweep {
        Sweep::OverN { p, ns } => {
            if ns.is_empty() {
                return Err(Error::arg("empty sweep grid"));
            }
            let points = ns
                .par_iter()
                .map(|&n| estimator.interval_table(n).map(|t| (n as f64, exact_coverage(*p, &t))))
                .collect::<Result<Vec<_>>>()?;
            Ok(CoverageCurve { axis: CurveAxis::OverN, points })
        }
        Sweep::OverP { total, ps } => {
            if ps.is_empty() {
                return Err(Error::arg("empty sweep grid"));
            }
            let table = estimator.interval_table(*total)?;
            let pmf = BinomialPmf::new(*total);
            let points = ps.par_iter().map(|&p| (p, exact_coverage_with(&pmf, p, &table))).collect();
            Ok(CoverageCurve { axis: CurveAxis::OverP, points })
        }
    }
}
