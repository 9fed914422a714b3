//! Single-histogram estimation: start estimator, de-noising, baseline and
//! scale adjustment, parametric sigma, and the S/N and N_eq metrics.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::discrete_est::{build_posterior, discrete_interval, discrete_point_estimate, AdmissibleSet};
use crate::error::{Error, Result};
use crate::goofy_loess::{smooth, smooth_cycles_for_n, SmoothConfig};
use crate::prior_opt::{AlphaTable, ExpFit};
use crate::proportions::{interval_normal_z, point_estimate, Interval, PriorSpec};
use crate::special::z_for_confidence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub edges: Vec<f64>,
    /// Set when observations outside the edges were folded into the end bins.
    pub overflow: bool,
}

impl Histogram {
    pub fn new(counts: Vec<u64>, edges: Vec<f64>, overflow: bool) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::arg(format!("histogram needs at least 2 bins, got {}", counts.len())));
        }
        if edges.len() != counts.len() + 1 {
            return Err(Error::arg(format!("{} bins need {} edges, got {}", counts.len(), counts.len() + 1, edges.len())));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("histogram edges must be finite and strictly increasing"));
        }
        Ok(Self { counts, edges, overflow })
    }

    /// Unit-width bins `[i, i+1)`.
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let edges = (0..=counts.len()).map(|i| i as f64).collect();
        Self::new(counts, edges, false)
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            bin_lo: f64,
            bin_hi: f64,
            count: u64,
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut counts = Vec::new();
        let mut edges = Vec::new();
        for (i, rec) in r.deserialize::<Row>().enumerate() {
            let line = i as u64 + 2;
            let row = rec.map_err(|e| Error::Parse { path: path.into(), line, detail: e.to_string() })?;
            match edges.last() {
                None => edges.push(row.bin_lo),
                Some(&prev) if prev == row.bin_lo => {}
                Some(_) => {
                    return Err(Error::Parse { path: path.into(), line, detail: "bin_lo does not continue the previous bin_hi".into() })
                }
            }
            if !(row.bin_hi > row.bin_lo) {
                return Err(Error::Parse { path: path.into(), line, detail: "bin_hi must exceed bin_lo".into() });
            }
            edges.push(row.bin_hi);
            counts.push(row.count);
        }
        Self::new(counts, edges, false).map_err(|e| Error::Parse { path: path.into(), line: 0, detail: e.to_string() })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:.8e},{:.8e},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Smoothed,
    Scaled,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Smoothed => "smoothed",
            Stage::Scaled => "scaled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartKind {
    MultinomialRos,
    OptimizedB2,
    Discrete,
}

impl StartKind {
    pub fn name(&self) -> &'static str {
        match self {
            StartKind::MultinomialRos => "multinomial_ros",
            StartKind::OptimizedB2 => "optimized_b2",
            StartKind::Discrete => "discrete",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multinomial_ros" | "uniform" => Ok(StartKind::MultinomialRos),
            "optimized_b2" => Ok(StartKind::OptimizedB2),
            "discrete" => Ok(StartKind::Discrete),
            other => Err(Error::arg(format!("unknown start estimator '{other}'"))),
        }
    }
}

/// Where the optimized pseudocount comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaSource {
    Fit(ExpFit),
    /// Full-range table; N between tabulated values is interpolated linearly.
    Table(AlphaTable),
}

/// Exponential fit for the Normal posterior at 0.95 used when no table is given.
pub const DEFAULT_ALPHA_FIT: ExpFit = ExpFit { k: 0.991, b0: 5.863, rms_residual: 0.0 };

impl AlphaSource {
    pub fn alpha0(&self, total: u64) -> Result<f64> {
        match self {
            AlphaSource::Fit(f) => Ok(f.eval(total as f64)),
            AlphaSource::Table(t) => {
                if t.zones.len() != 2 {
                    return Err(Error::Config("optimized_b2 needs a single-zone (full-range) alpha table".into()));
                }
                let mut pts: Vec<(u64, f64)> = t.entries.iter().filter(|e| e.zone == 0).map(|e| (e.total, e.alpha0)).collect();
                pts.sort_by_key(|p| p.0);
                if pts.is_empty() {
                    return Err(Error::Config("alpha table is empty".into()));
                }
                if total <= pts[0].0 {
                    return Ok(pts[0].1);
                }
                let last = pts[pts.len() - 1];
                if total >= last.0 {
                    return Ok(last.1);
                }
                let k = pts.partition_point(|p| p.0 <= total);
                let (a, b) = (pts[k - 1], pts[k]);
                let t = (total - a.0) as f64 / (b.0 - a.0) as f64;
                Ok(a.1 + t * (b.1 - a.1))
            }
        }
    }
}

/// A start estimator with its prerequisites resolved for one `N`.
#[derive(Debug, Clone)]
pub enum InitialEstimator {
    MultinomialRos,
    OptimizedB2 { alpha0: f64 },
    /// Per-outcome estimates and intervals precomputed from the admissible set.
    Discrete { set: Arc<AdmissibleSet>, table: Arc<Vec<(f64, f64, Interval)>> },
}

impl InitialEstimator {
    /// Resolves `kind` for sample size `total`. `alpha` is required for
    /// `optimized_b2` and `discrete` for the discrete start.
    pub fn resolve(
        kind: StartKind,
        total: u64,
        alpha: Option<&AlphaSource>,
        discrete: Option<&AdmissibleSet>,
    ) -> Result<Self> {
        match kind {
            StartKind::MultinomialRos => Ok(InitialEstimator::MultinomialRos),
            StartKind::OptimizedB2 => {
                let src = alpha.ok_or_else(|| Error::Config("optimized_b2 needs an alpha table or fit".into()))?;
                let alpha0 = src.alpha0(total)?;
                if !(alpha0 > 0.0 && alpha0.is_finite()) {
                    return Err(Error::Config(format!("alpha0 {alpha0} at N={total} is not positive")));
                }
                Ok(InitialEstimator::OptimizedB2 { alpha0 })
            }
            StartKind::Discrete => {
                let set = discrete.ok_or_else(|| Error::Config("discrete start needs an admissible set".into()))?;
                if set.total != total {
                    return Err(Error::Config(format!("admissible set is for N={}, histogram has N={total}", set.total)));
                }
                let table = (0..=total)
                    .map(|n| {
                        let est = discrete_point_estimate(n, set)?;
                        let iv = discrete_interval(&build_posterior(n, set)?, set.xi)?;
                        Ok((est.p_hat, est.sigma_hat, iv))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(InitialEstimator::Discrete { set: Arc::new(set.clone()), table: Arc::new(table) })
            }
        }
    }

    pub fn kind(&self) -> StartKind {
        match self {
            InitialEstimator::MultinomialRos => StartKind::MultinomialRos,
            InitialEstimator::OptimizedB2 { .. } => StartKind::OptimizedB2,
            InitialEstimator::Discrete { .. } => StartKind::Discrete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateCurve {
    pub estimator: String,
    pub stage: Stage,
    pub total: u64,
    pub xi: f64,
    pub p_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub intervals: Vec<Interval>,
}

impl EstimateCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin,p_hat,sigma,lo,hi,stage\n");
        for i in 0..self.p_hat.len() {
            out.push_str(&format!(
                "{},{:.8e},{:.8e},{:.8e},{:.8e},{}\n",
                i,
                self.p_hat[i],
                self.sigma_hat[i],
                self.intervals[i].lo,
                self.intervals[i].hi,
                self.stage.name()
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Per-bin estimates from the start estimator; stage is `Raw`.
pub fn initial_curve(h: &Histogram, est: &InitialEstimator, xi: f64) -> Result<EstimateCurve> {
    let total = h.total();
    let b = h.bins() as u32;
    let z = z_for_confidence(xi)?;
    let mut p_hat = Vec::with_capacity(h.bins());
    let mut sigma_hat = Vec::with_capacity(h.bins());
    let mut intervals = Vec::with_capacity(h.bins());
    match est {
        InitialEstimator::MultinomialRos | InitialEstimator::OptimizedB2 { .. } => {
            let prior = match est {
                InitialEstimator::OptimizedB2 { alpha0 } => PriorSpec::dirichlet(*alpha0, 2),
                _ => PriorSpec::uniform(b),
            };
            for &n in &h.counts {
                let pe = point_estimate(n, total, &prior)?;
                p_hat.push(pe.p_hat);
                sigma_hat.push(pe.sigma_hat);
                intervals.push(interval_normal_z(pe.p_hat, pe.sigma_hat, z));
            }
        }
        InitialEstimator::Discrete { set, table } => {
            if set.total != total {
                return Err(Error::Config(format!("admissible set is for N={}, histogram has N={total}", set.total)));
            }
            for &n in &h.counts {
                let (p, s, iv) = table[n as usize];
                p_hat.push(p);
                sigma_hat.push(s);
                intervals.push(iv);
            }
        }
    }
    Ok(EstimateCurve { estimator: est.kind().name().into(), stage: Stage::Raw, total, xi, p_hat, sigma_hat, intervals })
}

/// Coefficients of `Psi(N) = c0 + c1 exp(-c2 N) (1 - exp(-c3 N))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiParams {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

pub const DEFAULT_PSI: PsiParams = PsiParams { c0: 0.45371, c1: 0.43287, c2: 1.6000e-4, c3: 1.2296e-2 };

impl PsiParams {
    pub fn eval(&self, total: f64) -> f64 {
        self.c0 + self.c1 * (-self.c2 * total).exp() * (1.0 - (-self.c3 * total).exp())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.c0, self.c1, self.c2, self.c3]
    }

    pub fn from_array(c: [f64; 4]) -> Self {
        Self { c0: c[0], c1: c[1], c2: c[2], c3: c[3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaModel {
    pub a0: f64,
    pub b0: f64,
    pub psi: PsiParams,
}

impl Default for SigmaModel {
    /// Constants pooled over the discrete and optimized starts.
    fn default() -> Self {
        Self { a0: 10.51, b0: 633.5, psi: DEFAULT_PSI }
    }
}

impl SigmaModel {
    pub fn new(a0: f64, b0: f64, psi: PsiParams) -> Result<Self> {
        if !(a0 > 0.0 && b0 > 0.0 && a0.is_finite() && b0.is_finite()) {
            return Err(Error::arg(format!("A0 and B0 must be positive, got ({a0}, {b0})")));
        }
        Ok(Self { a0, b0, psi })
    }
}

pub fn sigma_est(p: f64, total: u64, model: &SigmaModel) -> f64 {
    let p = p.clamp(0.0, 1.0);
    (p * (1.0 - p) / (model.a0 * total as f64 + model.b0)).sqrt()
}

pub fn psi(total: u64, model: &SigmaModel) -> f64 {
    model.psi.eval(total as f64)
}

/// `sigma_est / Psi(N)`.
pub fn sigma_corrected(p: f64, total: u64, model: &SigmaModel) -> f64 {
    sigma_est(p, total, model) / psi(total, model)
}

/// Smooths, subtracts the curve minimum, clips, renormalizes and attaches
/// corrected sigmas with Normal intervals. The number of smoothing cycles
/// follows [`smooth_cycles_for_n`].
pub fn denoise_scale(curve: &EstimateCurve, cfg: &SmoothConfig, model: &SigmaModel) -> Result<EstimateCurve> {
    if curve.stage != Stage::Raw {
        return Err(Error::arg(format!("denoise_scale expects a raw curve, got {}", curve.stage.name())));
    }
    let cfg = cfg.with_cycles(smooth_cycles_for_n(curve.total));
    let smoothed = smooth(&curve.p_hat, &cfg)?;
    let base = smoothed.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = smoothed.iter().map(|v| (v - base).max(0.0)).collect();
    let s: f64 = p.iter().sum();
    let scale: f64 = smoothed.iter().map(|v| v.abs()).sum();
    if !(s > 1e-9 * scale) {
        return Err(Error::Degenerate("smoothed curve is flat after baseline removal".into()));
    }
    p.iter_mut().for_each(|v| *v /= s);
    let z = z_for_confidence(curve.xi)?;
    let sigma_hat: Vec<f64> = p.iter().map(|&v| sigma_corrected(v, curve.total, model)).collect();
    let intervals = p.iter().zip(&sigma_hat).map(|(&v, &sg)| interval_normal_z(v, sg, z)).collect();
    Ok(EstimateCurve {
        estimator: curve.estimator.clone(),
        stage: Stage::Scaled,
        total: curve.total,
        xi: curve.xi,
        p_hat: p,
        sigma_hat,
        intervals,
    })
}

/// Spread of the truth over the RMS error of the estimate.
pub fn snr(p_hat: &[f64], p_true: &[f64]) -> Result<f64> {
    if p_hat.len() != p_true.len() || p_hat.is_empty() {
        return Err(Error::arg("snr needs equal, non-empty lengths"));
    }
    let n = p_true.len() as f64;
    let mean = p_true.iter().sum::<f64>() / n;
    let var = p_true.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::Degenerate("true proportions are constant".into()));
    }
    let mse = p_hat.iter().zip(p_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((var / mse).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NEquivalent {
    pub n: f64,
    pub extrapolated: bool,
}

/// Sample size at which `curve` (pairs of N and S/N) reaches `target`,
/// linear in `sqrt(N)`.
pub fn n_equivalent(target: f64, curve: &[(f64, f64)]) -> Result<NEquivalent> {
    if curve.len() < 2 {
        return Err(Error::arg("n_equivalent needs at least 2 points"));
    }
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|&(n, s)| (n.sqrt(), s)).collect();
    if pts.iter().any(|(r, s)| !r.is_finite() || !s.is_finite()) {
        return Err(Error::arg("n_equivalent needs finite points"));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| !(w[1].0 > w[0].0 && w[1].1 > w[0].1)) {
        return Err(Error::Numeric { routine: "n_equivalent", detail: "S/N curve is not strictly increasing in N".into() });
    }
    let last = pts.len() - 1;
    let k = pts.partition_point(|p| p.1 < target);
    let (i, extrapolated) = if target < pts[0].1 {
        (0, true)
    } else if target > pts[last].1 {
        (last - 1, true)
    } else if k == 0 {
        return Ok(NEquivalent { n: pts[0].0 * pts[0].0, extrapolated: false });
    } else {
        (k - 1, false)
    };
    let (a, b) = (pts[i], pts[i + 1]);
    let r = a.0 + (target - a.1) * (b.0 - a.0) / (b.1 - a.1);
    let r = r.max(0.0);
    Ok(NEquivalent { n: r * r, extrapolated })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.into(), line, detail: format!("{other:?}") },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete_est::{self_consistent_thetas, DiscretePrior};
    use proptest::prelude::*;

    fn raw(counts: Vec<u64>) -> EstimateCurve {
        let h = Histogram::from_counts(counts).unwrap();
        initial_curve(&h, &InitialEstimator::MultinomialRos, 0.95).unwrap()
    }

    #[test]
    fn empty_histogram_is_flat() {
        let c = raw(vec![0; 100]);
        assert!(c.p_hat.iter().all(|p| (p - 0.01).abs() < 1e-15));
        assert_eq!(c.stage, Stage::Raw);
    }

    #[test]
    fn two_bin_rule_of_succession() {
        let c = raw(vec![3, 7]);
        assert!((c.p_hat[0] - 4.0 / 12.0).abs() < 1e-15);
        assert!((c.p_hat[1] - 8.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn optimized_b2_does_not_sum_to_one() {
        let h = Histogram::from_counts(vec![0, 1, 5, 9, 3, 2, 0, 0, 0, 0]).unwrap();
        let est = InitialEstimator::resolve(StartKind::OptimizedB2, h.total(), Some(&AlphaSource::Fit(DEFAULT_ALPHA_FIT)), None).unwrap();
        let c = initial_curve(&h, &est, 0.95).unwrap();
        let s: f64 = c.p_hat.iter().sum();
        assert!((s - 1.0).abs() > 0.05, "sum {s}");
    }

    #[test]
    fn missing_prerequisites_are_config_errors() {
        assert!(matches!(InitialEstimator::resolve(StartKind::OptimizedB2, 10, None, None), Err(Error::Config(_))));
        assert!(matches!(InitialEstimator::resolve(StartKind::Discrete, 10, None, None), Err(Error::Config(_))));
    }

    #[test]
    fn discrete_start_draws_from_theta() {
        let set = self_consistent_thetas(5, 2, 0.95, DiscretePrior::Combinatorial).unwrap();
        let est = InitialEstimator::resolve(StartKind::Discrete, 5, None, Some(&set)).unwrap();
        let h = Histogram::from_counts(vec![2, 3]).unwrap();
        let c = initial_curve(&h, &est, 0.95).unwrap();
        assert!((c.p_hat[0] - 0.48010).abs() < 5e-5);
        assert!((c.p_hat[1] - 0.51990).abs() < 5e-5);
        assert!(c.intervals[0].contains(c.p_hat[0]));
    }

    #[test]
    fn alpha_table_interpolates() {
        use crate::prior_opt::{AlphaEntry, OptFlags};
        use crate::proportions::PosteriorKind;
        let mut t = AlphaTable::new(0.95, PosteriorKind::NormalApprox, 2, vec![0.0, 1.0]).unwrap();
        for (n, a) in [(10u64, 1.5), (20, 2.0)] {
            t.entries.push(AlphaEntry { total: n, zone: 0, alpha0: a, objective: 0.0, c_mean: 0.95, c_var: 0.0, flags: OptFlags::default() });
        }
        let src = AlphaSource::Table(t);
        assert_eq!(src.alpha0(15).unwrap(), 1.75);
        assert_eq!(src.alpha0(5).unwrap(), 1.5);
        assert_eq!(src.alpha0(99).unwrap(), 2.0);
    }

    #[test]
    fn ramp_touching_zero_is_fixed() {
        let b = 50;
        let s: f64 = (0..b).map(|i| i as f64).sum();
        let ramp: Vec<f64> = (0..b).map(|i| i as f64 / s).collect();
        let curve = EstimateCurve {
            estimator: "test".into(),
            stage: Stage::Raw,
            total: 40,
            xi: 0.95,
            p_hat: ramp.clone(),
            sigma_hat: vec![0.0; b],
            intervals: vec![Interval::UNIT; b],
        };
        let out = denoise_scale(&curve, &SmoothConfig::default(), &SigmaModel::default()).unwrap();
        for (a, r) in out.p_hat.iter().zip(&ramp) {
            assert!((a - r).abs() < 1e-6);
        }
        assert_eq!(out.stage, Stage::Scaled);
    }

    #[test]
    fn flat_curve_is_degenerate() {
        let c = raw(vec![4; 30]);
        assert!(matches!(denoise_scale(&c, &SmoothConfig::default(), &SigmaModel::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn scaled_curve_rejects_rescaling() {
        let c = raw((0..30).map(|i| i % 7).collect());
        let s = denoise_scale(&c, &SmoothConfig::default(), &SigmaModel::default()).unwrap();
        assert!(denoise_scale(&s, &SmoothConfig::default(), &SigmaModel::default()).is_err());
    }

    #[test]
    fn sigma_examples() {
        let m = SigmaModel { a0: 10.0, b0: 561.3, psi: DEFAULT_PSI };
        assert!((sigma_est(0.5, 100, &m) - (0.25f64 / 1561.3).sqrt()).abs() < 1e-15);
        assert!((sigma_est(0.5, 100, &m) - 0.012654).abs() < 5e-7);
        assert_eq!(sigma_est(0.0, 100, &m), 0.0);
        assert_eq!(sigma_est(1.0, 100, &m), 0.0);
        let d = SigmaModel::default();
        assert!((psi(180, &d) - 0.8283).abs() < 5e-5);
        let direct = 0.45371 + 0.43287 * (-1.6e-4f64 * 180.0).exp() * (1.0 - (-1.2296e-2f64 * 180.0).exp());
        assert_eq!(psi(180, &d), direct);
        assert!((psi(10_000_000, &d) - 0.45371).abs() < 1e-9);
        assert!((sigma_corrected(0.5, 180, &d) - sigma_est(0.5, 180, &d) / psi(180, &d)).abs() < 1e-18);
    }

    #[test]
    fn psi_peak_and_correction_band() {
        let d = SigmaModel::default();
        let best = (1..20_000u64).max_by(|a, b| psi(*a, &d).total_cmp(&psi(*b, &d))).unwrap();
        let (c2, c3) = (DEFAULT_PSI.c2, DEFAULT_PSI.c3);
        let stationary = (1.0 + c3 / c2).ln() / c3;
        assert!((best as f64 - stationary).abs() <= 1.0, "argmax {best} vs {stationary}");
        assert!(psi(180, &d) > 0.96 * psi(best, &d));
        for n in [40u64, 60, 100, 180, 400, 800, 1600, 3600, 6400, 9600, 12800] {
            let r = sigma_corrected(0.3, n, &d) / sigma_est(0.3, n, &d);
            assert!((1.15..=2.0).contains(&r), "N={n} ratio {r}");
        }
    }

    #[test]
    fn snr_examples() {
        let t = [0.1, 0.2, 0.3, 0.4];
        assert!((snr(&[0.25; 4], &t).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(snr(&t, &t).unwrap(), f64::INFINITY);
        assert!(matches!(snr(&[0.1, 0.2], &[0.5, 0.5]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn n_equivalent_examples() {
        let curve: Vec<(f64, f64)> = [16.0, 64.0, 144.0, 400.0].iter().map(|&n: &f64| (n, 0.5 * n.sqrt())).collect();
        let r = n_equivalent(5.0, &curve).unwrap();
        assert!((r.n - 100.0).abs() < 1e-9 && !r.extrapolated);
        assert_eq!(n_equivalent(6.0, &curve).unwrap().n, 144.0);
        let far = n_equivalent(20.0, &curve).unwrap();
        assert!((far.n - 1600.0).abs() < 1e-9 && far.extrapolated);
        let low = n_equivalent(1.0, &curve).unwrap();
        assert!((low.n - 4.0).abs() < 1e-9 && low.extrapolated);
        assert!(n_equivalent(1.0, &[(10.0, 2.0), (20.0, 1.0)]).is_err());
        assert!(n_equivalent(1.0, &[(10.0, 2.0)]).is_err());
    }

    #[test]
    fn histogram_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let h = Histogram::new(vec![3, 0, 7], vec![-1.0, 0.0, 0.5, 2.0], false).unwrap();
        let p = dir.path().join("h.csv");
        h.write_csv(&p).unwrap();
        assert_eq!(Histogram::read_csv(&p).unwrap(), h);
        std::fs::write(&p, "bin_lo,bin_hi,count\n0,1,3\n1,2,x\n").unwrap();
        match Histogram::read_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "bin_lo,bin_hi,count\n0,1,3\n1.5,2,1\n").unwrap();
        assert!(matches!(Histogram::read_csv(&p), Err(Error::Parse { line: 3, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn scaled_curves_are_normalized(counts in prop::collection::vec(0u64..20, 30..80)) {
            let c = raw(counts);
            if let Ok(s) = denoise_scale(&c, &SmoothConfig::default(), &SigmaModel::default()) {
                let sum: f64 = s.p_hat.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(s.p_hat.iter().all(|p| *p >= 0.0));
                for (p, sg) in s.p_hat.iter().zip(&s.sigma_hat) {
                    let e = sigma_est(*p, s.total, &SigmaModel::default());
                    if e > 0.0 {
                        prop_assert!((sg / e - 1.0 / psi(s.total, &SigmaModel::default())).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn pipeline_is_deterministic(counts in prop::collection::vec(0u64..20, 30..60)) {
            let c = raw(counts);
            let a = denoise_scale(&c, &SmoothConfig::default(), &SigmaModel::default());
            let b = denoise_scale(&c, &SmoothConfig::default(), &SigmaModel::default());
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }
    }
}
