//! Calibration of the parametric sigma model against Monte Carlo ensembles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc_lab::{run_ensemble, EnsembleConfig, EnsembleResult, TrialPdf};
use crate::smooth_pipeline::{InitialEstimator, PsiParams, SigmaModel, DEFAULT_PSI};

/// Sample sizes of the calibration grid.
pub const CALIBRATION_GRID: [u64; 16] = [40, 60, 80, 100, 120, 140, 160, 180, 200, 400, 800, 1600, 3600, 6400, 9600, 12800];

/// Quantile factor for the lower 1% tolerance limit.
pub const Z_99: f64 = 2.576;

const FIT_TOL: f64 = 1e-4;
const FIT_MAX_ITERS: usize = 50;

/// Per-bin quantities of one (pdf, N) ensemble that do not depend on A0, B0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibPoint {
    pub pdf: TrialPdf,
    pub total: u64,
    /// `<sqrt(p (1 - p))>_MC / sigma_MC` for the retained bins.
    pub ratios: Vec<f64>,
    /// Bins left out: zero MC spread, or zero true probability (outside the
    /// support, never occupied by data).
    pub excluded: usize,
}

impl CalibPoint {
    pub fn new(pdf: TrialPdf, total: u64, p_true: &[f64], mean_sqrt_pq: &[f64], sigma_mc: &[f64]) -> Result<Self> {
        if mean_sqrt_pq.len() != sigma_mc.len() || p_true.len() != sigma_mc.len() {
            return Err(Error::arg("per-bin vectors differ in length"));
        }
        let ratios: Vec<f64> = (0..sigma_mc.len())
            .filter(|&i| sigma_mc[i] > 0.0 && p_true[i] > 0.0)
            .map(|i| mean_sqrt_pq[i] / sigma_mc[i])
            .collect();
        let excluded = sigma_mc.len() - ratios.len();
        if ratios.is_empty() {
            return Err(Error::Degenerate(format!("{pdf} at N={total}: every bin has zero MC spread")));
        }
        Ok(Self { pdf, total, ratios, excluded })
    }

    /// Uses the de-noised stage of the ensemble.
    pub fn from_ensemble(res: &EnsembleResult) -> Result<Self> {
        let st = res.scaled.as_ref().ok_or_else(|| Error::arg("ensemble was run without the smoothing stage"))?;
        Self::new(res.pdf, res.total, &res.p_true, &st.mean_sqrt_pq, &st.sigma_mc)
    }

    pub fn median_ratio(&self) -> f64 {
        median(&self.ratios)
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibFit {
    pub a0: f64,
    pub b0: f64,
    pub iterations: usize,
    /// Mean residual over the low-N and high-N halves at the solution.
    pub residual: [f64; 2],
    pub excluded_bins: usize,
}

/// Splits the distinct sample sizes into a lower and an upper half.
fn halves(points: &[CalibPoint]) -> Result<(Vec<u64>, Vec<u64>)> {
    let mut ns: Vec<u64> = points.iter().map(|p| p.total).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 2 {
        return Err(Error::arg("calibration needs at least two sample sizes"));
    }
    let hi = ns.split_off(ns.len() / 2);
    Ok((ns, hi))
}

/// Solves for (A0, B0) such that the mean over each half of the grid of
/// `median_i(sigma_est / sigma_MC) - 1` vanishes.
pub fn fit_a0_b0(points: &[CalibPoint], start: (f64, f64)) -> Result<CalibFit> {
    let (lo, _) = halves(points)?;
    let med: Vec<(f64, f64, bool)> =
        points.iter().map(|p| (p.total as f64, p.median_ratio(), lo.binary_search(&p.total).is_ok())).collect();
    let n_min = med.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
    let eval = |a: f64, b: f64| {
        let mut g = [0.0; 2];
        let mut j = [[0.0; 2]; 2];
        let mut cnt = [0usize; 2];
        for &(n, m, low) in &med {
            let k = if low { 0 } else { 1 };
            let d = a * n + b;
            g[k] += m / d.sqrt() - 1.0;
            let c = -0.5 * m * d.powf(-1.5);
            j[k][0] += c * n;
            j[k][1] += c;
            cnt[k] += 1;
        }
        for k in 0..2 {
            let c = cnt[k] as f64;
            g[k] /= c;
            j[k][0] /= c;
            j[k][1] /= c;
        }
        (g, j)
    };
    let (mut a, mut b) = start;
    if !(a > 0.0 && a * n_min + b > 0.0) {
        return Err(Error::arg(format!("start ({a}, {b}) gives a non-positive denominator")));
    }
    for it in 1..=FIT_MAX_ITERS {
        let (g, j) = eval(a, b);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(Error::Numeric { routine: "fit_a0_b0", detail: format!("singular Jacobian at ({a}, {b})") });
        }
        let da = -(j[1][1] * g[0] - j[0][1] * g[1]) / det;
        let db = -(-j[1][0] * g[0] + j[0][0] * g[1]) / det;
        let mut t = 1.0;
        while !(a + t * da > 0.0 && (a + t * da) * n_min + b + t * db > 0.0) {
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::Numeric { routine: "fit_a0_b0", detail: "step leaves the admissible region".into() });
            }
        }
        let (na, nb) = (a + t * da, b + t * db);
        let done = (na - a).abs() <= FIT_TOL * na.abs() && (nb - b).abs() <= FIT_TOL * nb.abs().max(1e-12);
        a = na;
        b = nb;
        if done {
            if !(b > 0.0) {
                return Err(Error::Numeric { routine: "fit_a0_b0", detail: format!("root has B0 = {b:.4e} <= 0 (A0 = {a:.4e})") });
            }
            let (g, _) = eval(a, b);
            let excluded_bins = points.iter().map(|p| p.excluded).sum();
            return Ok(CalibFit { a0: a, b0: b, iterations: it, residual: g, excluded_bins });
        }
    }
    let (g, _) = eval(a, b);
    Err(Error::NonConvergence { routine: "fit_a0_b0", iterations: FIT_MAX_ITERS, residual: g[0].abs().max(g[1].abs()), last: vec![a, b] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoPoint {
    pub pdf: TrialPdf,
    pub total: u64,
    pub median: f64,
    pub std_dev: f64,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoAtN {
    pub total: u64,
    pub mu: f64,
    pub sigma: f64,
    pub rho99: f64,
    pub median: f64,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoStats {
    pub points: Vec<RhoPoint>,
    pub per_n: Vec<RhoAtN>,
    pub excluded_bins: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// `rho_i = <sigma_est>_MC / sigma_MC,i`, summarized per (pdf, N) and pooled
/// over all bins of all pdfs at each N, every bin weighted equally.
pub fn rho_stats(points: &[CalibPoint], model: &SigmaModel) -> RhoStats {
    let rho = |p: &CalibPoint| -> Vec<f64> {
        let s = (model.a0 * p.total as f64 + model.b0).sqrt();
        p.ratios.iter().map(|r| r / s).collect()
    };
    let mut out_points = Vec::with_capacity(points.len());
    for p in points {
        let r = rho(p);
        let (_, sd) = mean_std(&r);
        out_points.push(RhoPoint { pdf: p.pdf, total: p.total, median: median(&r), std_dev: sd, excluded: p.excluded });
    }
    let mut ns: Vec<u64> = points.iter().map(|p| p.total).collect();
    ns.sort_unstable();
    ns.dedup();
    let per_n = ns
        .iter()
        .map(|&n| {
            let pooled: Vec<f64> = points.iter().filter(|p| p.total == n).flat_map(rho).collect();
            let (mu, sigma) = mean_std(&pooled);
            RhoAtN { total: n, mu, sigma, rho99: mu - Z_99 * sigma, median: median(&pooled), bins: pooled.len() }
        })
        .collect();
    RhoStats { points: out_points, per_n, excluded_bins: points.iter().map(|p| p.excluded).sum() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiFit {
    pub params: PsiParams,
    pub rms_residual: f64,
    pub iterations: usize,
}

/// Least-squares fit of `Psi(N)` started from the default constants.
pub fn fit_psi(curve: &[(f64, f64)]) -> Result<PsiFit> {
    fit_psi_from(curve, DEFAULT_PSI)
}

/// Levenberg-Marquardt fit of `Psi(N)` from an arbitrary start.
pub fn fit_psi_from(curve: &[(f64, f64)], start: PsiParams) -> Result<PsiFit> {
    if curve.len() < 4 {
        return Err(Error::arg(format!("Psi fit needs at least 4 points, got {}", curve.len())));
    }
    if curve.iter().any(|(n, r)| !(n.is_finite() && r.is_finite())) {
        return Err(Error::arg("Psi fit needs finite points"));
    }
    let resid = |c: &[f64; 4]| -> Vec<f64> { curve.iter().map(|&(n, r)| PsiParams::from_array(*c).eval(n) - r).collect() };
    let sse = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let jac = |c: &[f64; 4]| -> Vec<[f64; 4]> {
        curve
            .iter()
            .map(|&(n, _)| {
                let e2 = (-c[2] * n).exp();
                let e3 = (-c[3] * n).exp();
                [1.0, e2 * (1.0 - e3), -c[1] * n * e2 * (1.0 - e3), c[1] * e2 * n * e3]
            })
            .collect()
    };
    let mut c = start.as_array();
    let mut r = resid(&c);
    let mut f = sse(&r);
    let mut lambda = 1e-3;
    let mut trace = Vec::new();
    for it in 0..500 {
        trace.push(f);
        let jm = jac(&c);
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (row, ri) in jm.iter().zip(&r) {
            for a in 0..4 {
                jtr[a] += row[a] * ri;
                for b in 0..4 {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        let gmax = (0..4).map(|a| (jtr[a] * c[a].abs().max(1e-300)).abs()).fold(0.0, f64::max);
        if f == 0.0 || gmax < 1e-30 {
            return Ok(PsiFit { params: PsiParams::from_array(c), rms_residual: (f / curve.len() as f64).sqrt(), iterations: it });
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut m = jtj;
            for a in 0..4 {
                m[a][a] += lambda * jtj[a][a].max(1e-300);
            }
            let neg: [f64; 4] = jtr.map(|v| -v);
            let Some(step) = solve4(m, neg) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [c[0] + step[0], c[1] + step[1], c[2] + step[2], c[3] + step[3]];
            let rt = resid(&trial);
            let ft = sse(&rt);
            if ft.is_finite() && ft <= f {
                let small = (0..4).all(|a| step[a].abs() <= 1e-13 * trial[a].abs().max(1e-300));
                c = trial;
                r = rt;
                let stalled = f - ft <= 1e-15 * f;
                f = ft;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if small || stalled {
                    return Ok(PsiFit { params: PsiParams::from_array(c), rms_residual: (f / curve.len() as f64).sqrt(), iterations: it + 1 });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            return Ok(PsiFit { params: PsiParams::from_array(c), rms_residual: (f / curve.len() as f64).sqrt(), iterations: it + 1 });
        }
    }
    Err(Error::NonConvergence { routine: "fit_psi", iterations: 500, residual: f, last: trace })
}

fn solve4(mut m: [[f64; 4]; 4], mut v: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-300 || !m[piv][col].is_finite() {
            return None;
        }
        m.swap(col, piv);
        v.swap(col, piv);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
            v[row] -= f * v[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| m[row][k] * x[k]).sum();
        x[row] = (v[row] - s) / m[row][row];
    }
    Some(x)
}

/// Fitted constants with the data that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub version: u32,
    pub estimator_id: String,
    #[serde(rename = "A0")]
    pub a0: f64,
    #[serde(rename = "B0")]
    pub b0: f64,
    pub psi_params: PsiParams,
    pub grid: Vec<u64>,
    pub seeds: Vec<u64>,
    pub ensemble_size: u64,
    pub pdfs: Vec<TrialPdf>,
    pub iterations: usize,
    pub excluded_bins: usize,
    pub rho: Vec<RhoAtN>,
    /// Set when the Psi fit failed and the default constants were kept.
    pub psi_fallback: bool,
}

pub const ARTIFACT_VERSION: u32 = 1;

impl CalibrationArtifact {
    pub fn model(&self) -> Result<SigmaModel> {
        SigmaModel::new(self.a0, self.b0, self.psi_params)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Numeric { routine: "json", detail: e.to_string() })?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let a: Self = serde_json::from_str(&s).map_err(|e| Error::Parse { path: path.into(), line: e.line() as u64, detail: e.to_string() })?;
        if a.version != ARTIFACT_VERSION {
            return Err(Error::Config(format!("calibration artifact version {} is not supported", a.version)));
        }
        a.model()?;
        Ok(a)
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub pdfs: Vec<TrialPdf>,
    pub grid: Vec<u64>,
    pub ensemble: EnsembleConfig,
    pub start: (f64, f64),
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            pdfs: crate::mc_lab::standard_suite(),
            grid: CALIBRATION_GRID.to_vec(),
            ensemble: EnsembleConfig::default(),
            start: (10.51, 633.5),
        }
    }
}

/// Ensembles for every (pdf, N) as calibration points; `resolve` supplies
/// the start estimator for each N.
pub fn calibration_points<F>(cfg: &CalibrationConfig, resolve: F) -> Result<Vec<CalibPoint>>
where
    F: Fn(u64) -> Result<InitialEstimator>,
{
    let ens = EnsembleConfig { smooth: true, ..cfg.ensemble.clone() };
    let mut out = Vec::with_capacity(cfg.pdfs.len() * cfg.grid.len());
    for &n in &cfg.grid {
        let est = resolve(n)?;
        for pdf in &cfg.pdfs {
            out.push(CalibPoint::from_ensemble(&run_ensemble(pdf, n, &est, &ens)?)?);
        }
    }
    Ok(out)
}

/// Fits (A0, B0), the rho statistics and Psi from precomputed points.
pub fn calibrate_points(points: &[CalibPoint], cfg: &CalibrationConfig, estimator_id: &str) -> Result<CalibrationArtifact> {
    let fit = fit_a0_b0(points, cfg.start)?;
    let model = SigmaModel::new(fit.a0, fit.b0, DEFAULT_PSI)?;
    let rho = rho_stats(points, &model);
    let curve: Vec<(f64, f64)> = rho.per_n.iter().map(|r| (r.total as f64, r.rho99)).collect();
    let (psi_params, psi_fallback) = match fit_psi(&curve) {
        Ok(p) if (1..=20_000).all(|n| {
            let v = p.params.eval(n as f64);
            v > 0.0 && v < 1.0
        }) =>
        {
            (p.params, false)
        }
        _ => (DEFAULT_PSI, true),
    };
    Ok(CalibrationArtifact {
        version: ARTIFACT_VERSION,
        estimator_id: estimator_id.into(),
        a0: fit.a0,
        b0: fit.b0,
        psi_params,
        grid: cfg.grid.clone(),
        seeds: vec![cfg.ensemble.seed],
        ensemble_size: cfg.ensemble.trials,
        pdfs: cfg.pdfs.clone(),
        iterations: fit.iterations,
        excluded_bins: fit.excluded_bins,
        rho: rho.per_n,
        psi_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic(a: f64, b: f64, grid: &[u64]) -> Vec<CalibPoint> {
        let ps: Vec<f64> = (1..60).map(|i| i as f64 / 61.0).collect();
        grid.iter()
            .map(|&n| {
                let spq: Vec<f64> = ps.iter().map(|p| (p * (1.0 - p)).sqrt()).collect();
                let sig: Vec<f64> = spq.iter().map(|s| s / (a * n as f64 + b).sqrt()).collect();
                CalibPoint::new(TrialPdf::StdNormal, n, &ps, &spq, &sig).unwrap()
            })
            .collect()
    }

    #[test]
    fn negative_offset_root_is_an_error() {
        let pts = synthetic(10.0, -100.0, &CALIBRATION_GRID);
        assert!(matches!(fit_a0_b0(&pts, (10.51, 633.5)), Err(Error::Numeric { .. })));
    }

    #[test]
    fn recovers_synthetic_constants() {
        let pts = synthetic(10.0, 600.0, &CALIBRATION_GRID);
        let fit = fit_a0_b0(&pts, (10.51, 633.5)).unwrap();
        assert!((fit.a0 / 10.0 - 1.0).abs() < 0.01, "{fit:?}");
        assert!((fit.b0 / 600.0 - 1.0).abs() < 0.01, "{fit:?}");
        assert!(fit.residual.iter().all(|r| r.abs() < 1e-6));
        let far = fit_a0_b0(&pts, (3.0, 100.0)).unwrap();
        assert!((far.a0 / 10.0 - 1.0).abs() < 0.01 && (far.b0 / 600.0 - 1.0).abs() < 0.01, "{far:?}");
    }

    #[test]
    fn zero_spread_bins_are_excluded() {
        let p = CalibPoint::new(TrialPdf::Sawtooth, 40, &[0.1, 0.1, 0.0, 0.2], &[0.1, 0.2, 0.1, 0.4], &[0.01, 0.0, 0.02, 0.01]).unwrap();
        assert_eq!(p.ratios, vec![10.0, 40.0]);
        assert_eq!(p.excluded, 2);
        assert!(CalibPoint::new(TrialPdf::Sawtooth, 40, &[0.5], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn singular_system_is_reported() {
        let pts = synthetic(10.0, 600.0, &[100]);
        assert!(fit_a0_b0(&pts, (10.0, 600.0)).is_err());
        let mut two = synthetic(10.0, 600.0, &[100]);
        two.extend(synthetic(10.0, 600.0, &[100]));
        assert!(fit_a0_b0(&two, (10.0, 600.0)).is_err());
    }

    #[test]
    fn exact_model_gives_unit_rho() {
        let pts = synthetic(10.0, 600.0, &CALIBRATION_GRID);
        let model = SigmaModel::new(10.0, 600.0, DEFAULT_PSI).unwrap();
        let st = rho_stats(&pts, &model);
        for r in &st.per_n {
            assert!((r.mu - 1.0).abs() < 1e-12 && r.sigma < 1e-12 && (r.rho99 - 1.0).abs() < 1e-10);
        }
        assert_eq!(st.points.len(), 16);
    }

    #[test]
    fn rho99_below_mean_with_spread() {
        let mut pts = synthetic(10.0, 600.0, &[40, 80]);
        pts[0].ratios[3] *= 1.3;
        let st = rho_stats(&pts, &SigmaModel::new(10.0, 600.0, DEFAULT_PSI).unwrap());
        assert!(st.per_n[0].rho99 < st.per_n[0].mu);
        assert!(st.per_n[1].sigma < 1e-12);
    }

    fn psi_points(p: PsiParams) -> Vec<(f64, f64)> {
        let mut ns: Vec<f64> = CALIBRATION_GRID.iter().map(|&n| n as f64).collect();
        ns.extend([1.0, 5.0, 10.0, 20.0, 300.0, 600.0, 2400.0, 20000.0]);
        ns.iter().map(|&n| (n, p.eval(n))).collect()
    }

    #[test]
    fn psi_fit_recovers_constants() {
        let fit = fit_psi(&psi_points(DEFAULT_PSI)).unwrap();
        for (a, b) in fit.params.as_array().iter().zip(DEFAULT_PSI.as_array()) {
            assert!((a - b).abs() <= 1e-6 * b.abs(), "{a} vs {b}");
        }
        let start = PsiParams { c0: 0.5, c1: 0.4, c2: 2e-4, c3: 1e-2 };
        let fit = fit_psi_from(&psi_points(DEFAULT_PSI), start).unwrap();
        for (a, b) in fit.params.as_array().iter().zip(DEFAULT_PSI.as_array()) {
            assert!((a - b).abs() <= 1e-6 * b.abs(), "{a} vs {b} after {} iterations", fit.iterations);
        }
        assert!(fit_psi(&psi_points(DEFAULT_PSI)[..3]).is_err());
    }

    #[test]
    fn default_psi_stays_in_unit_interval() {
        for n in 1..=20_000 {
            let v = DEFAULT_PSI.eval(n as f64);
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn artifact_round_trip() {
        let pts = synthetic(10.0, 600.0, &CALIBRATION_GRID);
        let cfg = CalibrationConfig::default();
        let art = calibrate_points(&pts, &cfg, "multinomial_ros").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.json");
        art.write_json(&path).unwrap();
        let back = CalibrationArtifact::read_json(&path).unwrap();
        assert_eq!(back, art);
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["\"estimator_id\"", "\"A0\"", "\"B0\"", "\"psi_params\"", "\"grid\"", "\"seeds\"", "\"ensemble_size\""] {
            assert!(text.contains(key), "{key}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn synthetic_recovery_over_constants(a in 2.0f64..20.0, b in 50.0f64..2000.0) {
            let pts = synthetic(a, b, &CALIBRATION_GRID);
            let fit = fit_a0_b0(&pts, (10.51, 633.5)).unwrap();
            prop_assert!((fit.a0 / a - 1.0).abs() < 0.01);
            prop_assert!((fit.b0 / b - 1.0).abs() < 0.01);
        }
    }
}
