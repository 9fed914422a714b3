//! Point and variance estimators for a bin proportion, with equal-tailed
//! intervals from Normal or Beta posteriors.

use serde::{Deserialize, Serialize};

use crate::coverage::IntervalTable;
use crate::discrete_est::{self, DiscretePrior};
use crate::error::{Error, Result};
use crate::special::{beta_quantile, z_for_confidence};

pub use crate::special::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PriorFamily {
    Uniform,
    Jeffreys,
    GeneralizedDirichlet { alpha0: f64 },
    Wald,
    /// Wilson score interval; `xi` fixes the z used for the center shift.
    Wilson { xi: f64 },
    /// Agresti–Coull; adds z²/2 pseudo-successes at confidence `xi`.
    AgrestiCoull { xi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub family: PriorFamily,
    pub bins: u32,
}

impl PriorSpec {
    pub fn new(family: PriorFamily, bins: u32) -> Result<Self> {
        let p = Self { family, bins };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(bins: u32) -> Self {
        Self { family: PriorFamily::Uniform, bins }
    }

    pub fn jeffreys(bins: u32) -> Self {
        Self { family: PriorFamily::Jeffreys, bins }
    }

    pub fn dirichlet(alpha0: f64, bins: u32) -> Self {
        Self { family: PriorFamily::GeneralizedDirichlet { alpha0 }, bins }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::arg(format!("need at least 2 bins, got {}", self.bins)));
        }
        match self.family {
            PriorFamily::GeneralizedDirichlet { alpha0 } if !(alpha0 > 0.0 && alpha0.is_finite()) => {
                Err(Error::arg(format!("alpha0 must be positive, got {alpha0}")))
            }
            PriorFamily::Wilson { xi } | PriorFamily::AgrestiCoull { xi } if !(xi > 0.0 && xi < 1.0) => {
                Err(Error::arg(format!("confidence must lie in (0,1), got {xi}")))
            }
            _ => Ok(()),
        }
    }

    /// Per-bin pseudocount for the Bayes families.
    pub fn alpha0(&self) -> Option<f64> {
        match self.family {
            PriorFamily::Uniform => Some(1.0),
            PriorFamily::Jeffreys => Some(0.5),
            PriorFamily::GeneralizedDirichlet { alpha0 } => Some(alpha0),
            _ => None,
        }
    }

    /// Marginal Beta prior parameters `(alpha0, (b - 1) alpha0)` for one bin.
    pub fn beta_params(&self) -> Option<(f64, f64)> {
        self.alpha0().map(|a| (a, (self.bins - 1) as f64 * a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    NormalApprox,
    BetaExact,
    DiscreteRect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSpec {
    pub kind: PosteriorKind,
    pub xi: f64,
}

impl PosteriorSpec {
    pub fn new(kind: PosteriorKind, xi: f64) -> Result<Self> {
        if !(xi > 0.0 && xi < 1.0) {
            return Err(Error::arg(format!("confidence must lie strictly in (0,1), got {xi}")));
        }
        Ok(Self { kind, xi })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub p_hat: f64,
    pub sigma_hat: f64,
    pub n: u64,
    pub total: u64,
}

/// Closed interval `[lo, hi]` within `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    #[inline]
    pub fn contains(&self, p: f64) -> bool {
        self.lo <= p && p <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

pub fn point_estimate(n: u64, total: u64, prior: &PriorSpec) -> Result<PointEstimate> {
    prior.validate()?;
    if n > total {
        return Err(Error::arg(format!("count {n} exceeds total {total}")));
    }
    let nf = n as f64;
    let tf = total as f64;
    let b = prior.bins as f64;
    let (p_hat, var) = match prior.family {
        PriorFamily::Uniform => {
            let p = (nf + 1.0) / (tf + b);
            (p, p * (1.0 - p) / (tf + 1.0 + b))
        }
        PriorFamily::Jeffreys => {
            let p = (nf + 0.5) / (tf + 0.5 * b);
            (p, p * (1.0 - p) / (tf + 1.0 + 0.5 * b))
        }
        PriorFamily::GeneralizedDirichlet { alpha0 } => {
            let p = (nf + alpha0) / (tf + b * alpha0);
            (p, p * (1.0 - p) / (tf + 1.0 + b * alpha0))
        }
        PriorFamily::Wald => {
            if total == 0 {
                return Err(Error::Degenerate("Wald estimator undefined for zero observations".into()));
            }
            let p = nf / tf;
            (p, p * (1.0 - p) / tf)
        }
        PriorFamily::Wilson { xi } => {
            let z = z_for_confidence(xi)?;
            let z2 = z * z;
            let denom = tf + z2;
            let center = (nf + 0.5 * z2) / denom;
            let spread = if total == 0 { 0.0 } else { nf * (tf - nf) / tf };
            let half = z / denom * (spread + 0.25 * z2).sqrt();
            let s = half / z;
            (center, s * s)
        }
        PriorFamily::AgrestiCoull { xi } => {
            let z = z_for_confidence(xi)?;
            let z2 = z * z;
            let nt = tf + z2;
            let p = (nf + 0.5 * z2) / nt;
            (p, p * (1.0 - p) / nt)
        }
    };
    Ok(PointEstimate {
        p_hat,
        sigma_hat: var.max(0.0).sqrt(),
        n,
        total,
    })
}

/// Equal-tailed interval from a Normal posterior, clipped to `[0, 1]`.
pub fn interval_normal(est: &PointEstimate, xi: f64) -> Result<Interval> {
    let z = z_for_confidence(xi)?;
    Ok(interval_normal_z(est.p_hat, est.sigma_hat, z))
}

#[inline]
pub fn interval_normal_z(p_hat: f64, sigma: f64, z: f64) -> Interval {
    Interval {
        lo: (p_hat - z * sigma).max(0.0),
        hi: (p_hat + z * sigma).min(1.0),
    }
}

/// Equal-tailed interval from the Beta(n + alpha0, N - n + beta0) posterior.
pub fn interval_beta(n: u64, total: u64, alpha0: f64, beta0: f64, xi: f64) -> Result<Interval> {
    if n > total {
        return Err(Error::arg(format!("count {n} exceeds total {total}")));
    }
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::arg(format!("confidence must lie in (0,1), got {xi}")));
    }
    let a = n as f64 + alpha0;
    let b = (total - n) as f64 + beta0;
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::arg(format!("posterior parameters must be positive (a={a}, b={b})")));
    }
    let tail = 0.5 * (1.0 - xi);
    let lo = beta_quantile(a, b, tail)?;
    let hi = beta_quantile(a, b, 1.0 - tail)?;
    Ok(Interval { lo, hi: hi.max(lo) })
}

/// A prior paired with a posterior rule: everything needed to map an
/// outcome `(n, N)` to a confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub prior: PriorSpec,
    pub posterior: PosteriorSpec,
}

impl Estimator {
    pub fn new(prior: PriorSpec, posterior: PosteriorSpec) -> Result<Self> {
        prior.validate()?;
        if !matches!(posterior.kind, PosteriorKind::NormalApprox) && prior.alpha0().is_none() {
            return Err(Error::arg(format!(
                "{:?} posterior requires a Bayes prior, got {:?}",
                posterior.kind, prior.family
            )));
        }
        Ok(Self { prior, posterior })
    }

    pub fn xi(&self) -> f64 {
        self.posterior.xi
    }

    /// Interval for a single outcome. Discrete posteriors build their
    /// admissible set on every call; prefer [`Estimator::interval_table`].
    pub fn interval(&self, n: u64, total: u64) -> Result<Interval> {
        match self.posterior.kind {
            PosteriorKind::NormalApprox => {
                let est = point_estimate(n, total, &self.prior)?;
                interval_normal(&est, self.posterior.xi)
            }
            PosteriorKind::BetaExact => {
                let (a0, b0) = self.prior.beta_params().expect("validated Bayes prior");
                interval_beta(n, total, a0, b0, self.posterior.xi)
            }
            PosteriorKind::DiscreteRect => Ok(self.interval_table(total)?.intervals[n as usize]),
        }
    }

    /// Intervals for every outcome `n = 0..=N`.
    pub fn interval_table(&self, total: u64) -> Result<IntervalTable> {
        let xi = self.posterior.xi;
        let intervals = match self.posterior.kind {
            PosteriorKind::NormalApprox => {
                let z = z_for_confidence(xi)?;
                (0..=total)
                    .map(|n| point_estimate(n, total, &self.prior).map(|e| interval_normal_z(e.p_hat, e.sigma_hat, z)))
                    .collect::<Result<Vec<_>>>()?
            }
            PosteriorKind::BetaExact => {
                let (a0, b0) = self.prior.beta_params().expect("validated Bayes prior");
                (0..=total)
                    .map(|n| interval_beta(n, total, a0, b0, xi))
                    .collect::<Result<Vec<_>>>()?
            }
            PosteriorKind::DiscreteRect => {
                if total == 0 {
                    return Err(Error::arg("discrete posterior needs N >= 1"));
                }
                let prior = if self.prior.bins == 2 {
                    DiscretePrior::UniformWidth
                } else {
                    DiscretePrior::Combinatorial
                };
                let set = discrete_est::self_consistent_thetas(total, self.prior.bins, xi, prior)?;
                discrete_est::interval_table(&set)?.intervals
            }
        };
        IntervalTable::new(total, xi, intervals)
    }
}
