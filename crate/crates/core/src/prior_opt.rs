//! Choice of the Dirichlet pseudocount `alpha0` so that coverage tracks the
//! nominal confidence, over the full range of `p` or per zone of `p`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::{coverage_on_grid, interior_grid, mismatch_of};
use crate::error::{Error, Result};
use crate::goofy_loess::{smooth_xy, SmoothConfig};
use crate::proportions::{Estimator, PosteriorKind, PosteriorSpec, PriorSpec};

pub const DEFAULT_GRID_POINTS: usize = 1000;
pub const DEFAULT_ZONES: usize = 38;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    /// Lower bound on `alpha0`.
    pub floor: f64,
    pub max_iter: usize,
    /// Relative step of the central difference.
    pub fd_rel_step: f64,
    pub deriv_min: f64,
    pub deriv_max: f64,
    /// Relative distance under which two iterates count as the same point.
    pub cycle_tol: f64,
    pub ring_len: usize,
    /// Fractional widening of the cycling range before golden-section search.
    pub bracket_expand: f64,
    /// Times the difference step is widened (x4 each) before a flat objective
    /// is reported as a plateau.
    pub plateau_probes: u32,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            floor: 1e-4,
            max_iter: 60,
            fd_rel_step: 1e-2,
            deriv_min: 1e-8,
            deriv_max: 1e4,
            cycle_tol: 1e-6,
            ring_len: 8,
            bracket_expand: 0.25,
            plateau_probes: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptFlags {
    pub plateau: bool,
    pub stalled: bool,
    pub direct_search: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptOutcome {
    pub alpha0: f64,
    pub objective: f64,
    pub iterations: usize,
    pub flags: OptFlags,
}

/// Default starting pseudocount per posterior kind.
pub fn default_start(kind: PosteriorKind) -> f64 {
    match kind {
        PosteriorKind::NormalApprox => 1.7,
        _ => 1.0,
    }
}

/// Coverage over `grid` for the Dirichlet(`alpha0`) estimator at `N`.
pub fn coverage_at(total: u64, xi: f64, kind: PosteriorKind, bins: u32, grid: &[f64], alpha0: f64) -> Result<Vec<f64>> {
    let est = Estimator::new(PriorSpec::dirichlet(alpha0, bins), PosteriorSpec::new(kind, xi)?)?;
    Ok(coverage_on_grid(&est.interval_table(total)?, grid))
}

/// Minimizes `<(xi - C)^2>` over `grid` starting from `start`.
pub fn optimize_alpha0(
    total: u64,
    xi: f64,
    kind: PosteriorKind,
    bins: u32,
    grid: &[f64],
    start: f64,
    cfg: &OptimizeConfig,
) -> Result<OptOutcome> {
    if matches!(kind, PosteriorKind::DiscreteRect) {
        return Err(Error::arg("alpha0 optimization needs a Normal or Beta posterior"));
    }
    optimize_generic(|a| coverage_at(total, xi, kind, bins, grid, a), xi, start, cfg)
}

struct Tracker<F> {
    cov: F,
    xi: f64,
    best: (f64, f64),
}

impl<F: Fn(f64) -> Result<Vec<f64>>> Tracker<F> {
    fn eval(&mut self, a: f64) -> Result<(f64, Vec<f64>)> {
        let c = (self.cov)(a)?;
        let f = mismatch_of(self.xi, &c);
        if f < self.best.1 {
            self.best = (a, f);
        }
        Ok((f, c))
    }
}

/// Newton-Raphson on `f(alpha0) = <(xi - C)^2>` with central-difference
/// first and second derivatives. Iterates that revisit a stored point, or
/// stop improving for half the ring length, trigger golden-section search
/// over the range of recent iterates.
///
/// `cov` maps `alpha0` to the coverage at every grid point.
pub fn optimize_generic<F>(cov: F, xi: f64, start: f64, cfg: &OptimizeConfig) -> Result<OptOutcome>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    if !(start > 0.0 && start.is_finite()) {
        return Err(Error::arg(format!("starting alpha0 must be positive, got {start}")));
    }
    let mut t = Tracker { cov, xi, best: (f64::NAN, f64::INFINITY) };
    let mut a = start.max(cfg.floor);
    let mut f = t.eval(a)?.0;
    let mut ring: Vec<(f64, f64)> = vec![(a, f)];
    let mut flags = OptFlags::default();
    let mut idle = 0usize;

    for it in 0..cfg.max_iter {
        let mut h = cfg.fd_rel_step * a;
        let mut d = fd_derivatives(&mut t, a, f, h, cfg.floor)?;
        let mut probes = 0;
        while d.0 == 0.0 && d.1 == 0.0 && probes < cfg.plateau_probes {
            h *= 4.0;
            probes += 1;
            d = fd_derivatives(&mut t, a, f, h, cfg.floor)?;
        }
        let (g, curv) = d;
        if g == 0.0 && curv == 0.0 {
            if t.best.1 < f {
                flags.stalled = true;
            } else {
                flags.plateau = true;
            }
            return Ok(finish(&t, it, flags));
        }
        let g = if g == 0.0 { 0.0 } else { g.signum() * g.abs().clamp(cfg.deriv_min, cfg.deriv_max) };
        let step = if curv > 0.0 { -g / curv } else { -g.signum() * 0.25 * a };
        let next = (a + step).clamp((0.25 * a).max(cfg.floor), 4.0 * a);
        if (next - a).abs() <= cfg.cycle_tol * a {
            return Ok(finish(&t, it + 1, flags));
        }
        let before = t.best.1;
        let fn_ = t.eval(next)?.0;
        idle = if fn_ < before { 0 } else { idle + 1 };
        let revisit = ring.iter().any(|(r, _)| (r - next).abs() <= cfg.cycle_tol * r.abs().max(cfg.floor));
        if (revisit && fn_ >= before) || idle >= (cfg.ring_len / 2).max(1) {
            flags.direct_search = true;
            let lo = ring.iter().map(|r| r.0).fold(next, f64::min);
            let hi = ring.iter().map(|r| r.0).fold(next, f64::max);
            let pad = cfg.bracket_expand * (hi - lo);
            golden_section(&mut t, (lo - pad).max(cfg.floor), hi + pad, cfg)?;
            return Ok(finish(&t, it + 1, flags));
        }
        ring.push((next, fn_));
        if ring.len() > cfg.ring_len {
            ring.remove(0);
        }
        a = next;
        f = fn_;
    }
    flags.stalled = true;
    Ok(finish(&t, cfg.max_iter, flags))
}

fn finish<F>(t: &Tracker<F>, iterations: usize, flags: OptFlags) -> OptOutcome {
    OptOutcome { alpha0: t.best.0, objective: t.best.1, iterations, flags }
}

/// First and second central differences of the objective around `a`.
fn fd_derivatives<F: Fn(f64) -> Result<Vec<f64>>>(t: &mut Tracker<F>, a: f64, fa: f64, h: f64, floor: f64) -> Result<(f64, f64)> {
    if a - h >= floor {
        let fm = t.eval(a - h)?.0;
        let fp = t.eval(a + h)?.0;
        return Ok(((fp - fm) / (2.0 * h), (fp - 2.0 * fa + fm) / (h * h)));
    }
    // Stencil shifted up so that no point falls below the floor.
    let f0 = t.eval(floor)?.0;
    let f1 = t.eval(floor + h)?.0;
    let f2 = t.eval(floor + 2.0 * h)?.0;
    Ok(((f2 - f0) / (2.0 * h), (f2 - 2.0 * f1 + f0) / (h * h)))
}

fn golden_section<F: Fn(f64) -> Result<Vec<f64>>>(t: &mut Tracker<F>, mut lo: f64, mut hi: f64, cfg: &OptimizeConfig) -> Result<()> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    t.eval(lo)?;
    t.eval(hi)?;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = t.eval(x1)?.0;
    let mut f2 = t.eval(x2)?.0;
    for _ in 0..80 {
        if hi - lo <= cfg.cycle_tol * 0.5 * (hi + lo) {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = t.eval(x1)?.0;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = t.eval(x2)?.0;
        }
    }
    Ok(())
}

/// `k` equal-width zones covering (0,1).
pub fn equal_zones(k: usize) -> Vec<f64> {
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEntry {
    pub total: u64,
    pub zone: usize,
    pub alpha0: f64,
    pub objective: f64,
    /// Mean and variance of C over the zone's grid at the optimum.
    pub c_mean: f64,
    pub c_var: f64,
    pub flags: OptFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaTable {
    pub xi: f64,
    pub kind: PosteriorKind,
    pub bins: u32,
    pub zones: Vec<f64>,
    pub entries: Vec<AlphaEntry>,
}

impl AlphaTable {
    pub fn new(xi: f64, kind: PosteriorKind, bins: u32, zones: Vec<f64>) -> Result<Self> {
        check_zones(&zones)?;
        Ok(Self { xi, kind, bins, zones, entries: Vec::new() })
    }

    pub fn get(&self, total: u64, zone: usize) -> Option<&AlphaEntry> {
        self.entries.iter().find(|e| e.total == total && e.zone == zone)
    }

    /// Writes `N,k,psi_lo,psi_hi,alpha0,objective` rows with shortest
    /// round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("N,k,psi_lo,psi_hi,alpha0,objective\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e}\n",
                e.total,
                e.zone,
                self.zones[e.zone],
                self.zones[e.zone + 1],
                e.alpha0,
                e.objective
            ));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Reads a table written by [`AlphaTable::write_csv`].
    pub fn read_csv(path: &Path, xi: f64, kind: PosteriorKind, bins: u32) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, detail: String| Error::Parse { path: path.into(), line: line as u64, detail };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "N,k,psi_lo,psi_hi,alpha0,objective" => {}
            _ => return Err(perr(1, "missing or wrong header".into())),
        }
        let mut bounds: Vec<(usize, f64, f64)> = Vec::new();
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(perr(i + 1, format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| perr(i + 1, format!("{s}: {e}")));
            let total = f[0].trim().parse::<u64>().map_err(|e| perr(i + 1, e.to_string()))?;
            let zone = f[1].trim().parse::<usize>().map_err(|e| perr(i + 1, e.to_string()))?;
            bounds.push((zone, num(f[2])?, num(f[3])?));
            entries.push(AlphaEntry {
                total,
                zone,
                alpha0: num(f[4])?,
                objective: num(f[5])?,
                c_mean: f64::NAN,
                c_var: f64::NAN,
                flags: OptFlags::default(),
            });
        }
        let k = bounds.iter().map(|b| b.0 + 1).max().unwrap_or(0);
        let mut zones = vec![f64::NAN; k + 1];
        for (z, lo, hi) in bounds {
            zones[z] = lo;
            zones[z + 1] = hi;
        }
        if zones.iter().any(|z| z.is_nan()) {
            return Err(perr(0, "zones are not all present".into()));
        }
        check_zones(&zones).map_err(|e| perr(0, e.to_string()))?;
        Ok(Self { xi, kind, bins, zones, entries })
    }
}

fn check_zones(z: &[f64]) -> Result<()> {
    if z.len() < 2 || z[0].abs() > 1e-12 || (z[z.len() - 1] - 1.0).abs() > 1e-12 || z.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::arg("zone boundaries must increase strictly from 0 to 1"));
    }
    Ok(())
}

/// One optimization per zone at fixed `N`, each over `per_zone` interior points.
pub fn optimize_alpha0_zones(
    total: u64,
    xi: f64,
    kind: PosteriorKind,
    bins: u32,
    zones: &[f64],
    per_zone: usize,
    start: f64,
    cfg: &OptimizeConfig,
) -> Result<Vec<AlphaEntry>> {
    check_zones(zones)?;
    (0..zones.len() - 1)
        .into_par_iter()
        .map(|k| {
            let grid = interior_grid(zones[k], zones[k + 1], per_zone);
            let out = optimize_alpha0(total, xi, kind, bins, &grid, start, cfg)?;
            let c = coverage_at(total, xi, kind, bins, &grid, out.alpha0)?;
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64;
            Ok(AlphaEntry { total, zone: k, alpha0: out.alpha0, objective: out.objective, c_mean: mean, c_var: var, flags: out.flags })
        })
        .collect()
}

/// Parameters of `alpha0(N) = exp(k N / (N + B0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub k: f64,
    pub b0: f64,
    pub rms_residual: f64,
}

impl ExpFit {
    pub fn eval(&self, total: f64) -> f64 {
        (self.k * total / (total + self.b0)).exp()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Numeric { routine: "json", detail: e.to_string() })?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Parse { path: path.into(), line: e.line() as u64, detail: e.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpFitMode {
    /// `k` fixed at 1.
    OneParam,
    TwoParam,
}

/// Levenberg-Marquardt least squares for [`ExpFit`].
pub fn fit_exponential(points: &[(f64, f64)], mode: ExpFitMode) -> Result<ExpFit> {
    if points.len() < 3 {
        return Err(Error::arg(format!("exponential fit needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|(n, a)| !(*n > 0.0 && *a > 0.0 && n.is_finite() && a.is_finite())) {
        return Err(Error::arg("exponential fit needs positive N and alpha0"));
    }
    let mut b0 = {
        let mut g: Vec<f64> = points
            .iter()
            .filter(|(_, a)| *a > 1.0 + 1e-9)
            .map(|(n, a)| n / a.ln() - n)
            .filter(|b| *b > 0.0 && b.is_finite())
            .collect();
        g.sort_by(|a, b| a.partial_cmp(b).unwrap());
        g.get(g.len() / 2).copied().unwrap_or(5.0)
    };
    let mut k = 1.0;
    let two = mode == ExpFitMode::TwoParam;

    let sse = |k: f64, b0: f64| -> f64 {
        points.iter().map(|(n, a)| (a - (k * n / (n + b0)).exp()).powi(2)).sum()
    };
    let mut cur = sse(k, b0);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        // J^T J and J^T r for residuals r = a - model.
        let (mut jkk, mut jkb, mut jbb, mut gk, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (n, a) in points {
            let m = (k * n / (n + b0)).exp();
            let dk = m * n / (n + b0);
            let db = -m * k * n / ((n + b0) * (n + b0));
            let r = a - m;
            jkk += dk * dk;
            jkb += dk * db;
            jbb += db * db;
            gk += dk * r;
            gb += db * r;
        }
        let det = jkk * jbb - jkb * jkb;
        let singular = if two { !(det.abs() > 1e-14 * jkk * jbb) } else { !(jbb > 0.0) };
        if singular {
            return Err(Error::Numeric { routine: "fit_exponential", detail: "singular Jacobian".into() });
        }
        let mut accepted = false;
        for _ in 0..40 {
            let (dk_, db_) = if two {
                let a11 = jkk * (1.0 + lambda);
                let a22 = jbb * (1.0 + lambda);
                let d = a11 * a22 - jkb * jkb;
                ((a22 * gk - jkb * gb) / d, (a11 * gb - jkb * gk) / d)
            } else {
                (0.0, gb / (jbb * (1.0 + lambda)))
            };
            let (nk, nb) = (k + dk_, b0 + db_);
            let trial = if nb > -points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) { sse(nk, nb) } else { f64::INFINITY };
            if trial <= cur {
                let rel = (cur - trial) / cur.max(f64::MIN_POSITIVE);
                k = nk;
                b0 = nb;
                cur = trial;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel < 1e-15 || (dk_.abs() < 1e-13 * k.abs().max(1.0) && db_.abs() < 1e-13 * b0.abs().max(1.0)) {
                    return finish_fit(k, b0, cur, points.len());
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            return finish_fit(k, b0, cur, points.len());
        }
    }
    finish_fit(k, b0, cur, points.len())
}

fn finish_fit(k: f64, b0: f64, sse: f64, n: usize) -> Result<ExpFit> {
    if !(b0 > 0.0) {
        return Err(Error::Numeric { routine: "fit_exponential", detail: format!("fitted B0 = {b0} is not positive") });
    }
    Ok(ExpFit { k, b0, rms_residual: (sse / n as f64).sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RoundSmoother {
    Exponential(ExpFitMode),
    Goofy(SmoothConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    /// Smoothed curve of the previous round; the starting points of this one.
    pub ideal: Vec<f64>,
    pub alpha0: Vec<f64>,
    /// RMS of `alpha0 - ideal`.
    pub scatter: f64,
    pub fit: Option<ExpFit>,
}

/// Repeatedly smooths the `alpha0(N)` curve and re-optimizes each `N` from
/// the smoothed value. `optimize(N, start)` returns the new optimum.
pub fn reoptimize_rounds<O>(ns: &[u64], initial: &[f64], rounds: usize, smoother: &RoundSmoother, optimize: O) -> Result<Vec<Round>>
where
    O: Fn(u64, f64) -> Result<OptOutcome> + Sync,
{
    if rounds == 0 {
        return Err(Error::arg("at least one round is required"));
    }
    if ns.len() != initial.len() || ns.is_empty() {
        return Err(Error::arg("N list and alpha0 list must be non-empty and the same length"));
    }
    let xs: Vec<f64> = ns.iter().map(|n| *n as f64).collect();
    let mut prev = initial.to_vec();
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let (ideal, fit) = match smoother {
            RoundSmoother::Exponential(mode) => {
                let pts: Vec<(f64, f64)> = xs.iter().copied().zip(prev.iter().copied()).collect();
                let fit = fit_exponential(&pts, *mode)?;
                (xs.iter().map(|n| fit.eval(*n)).collect::<Vec<_>>(), Some(fit))
            }
            RoundSmoother::Goofy(cfg) => (smooth_xy(Some(&xs), &prev, cfg)?, None),
        };
        let alpha0 = ns
            .par_iter()
            .zip(ideal.par_iter())
            .map(|(n, s)| optimize(*n, s.max(1e-12)).map(|o| o.alpha0))
            .collect::<Result<Vec<_>>>()?;
        let scatter = (alpha0.iter().zip(&ideal).map(|(a, s)| (a - s).powi(2)).sum::<f64>() / alpha0.len() as f64).sqrt();
        prev = alpha0.clone();
        out.push(Round { ideal, alpha0, scatter, fit });
    }
    Ok(out)
}
