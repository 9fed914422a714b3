//! Special functions shared by the estimators: normal and Student-t
//! distribution functions, the regularized incomplete beta function and its
//! inverse, and log-binomial coefficients.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::{erfc, lgamma as ln_gamma};

use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)`, accurate in the far tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// `ln(1 - Φ(x))` without underflow for large positive `x`.
pub fn ln_normal_sf(x: f64) -> f64 {
    let sf = normal_sf(x);
    if sf > 1e-280 {
        return sf.ln();
    }
    // Asymptotic (Mills ratio) expansion; only reached for x > 35.
    let x2 = x * x;
    -0.5 * x2 - (x * SQRT_2PI).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
}

/// Inverse of the standard normal CDF.
///
/// Rational approximation (Acklam) refined by one Halley step, which brings
/// `|Φ(x) - q|` to the level of double rounding.
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::arg(format!("normal quantile needs q in (0,1), got {q}")));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let mut x = if q < P_LOW {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    } else if q <= 1.0 - P_LOW {
        let s = q - 0.5;
        let r = s * s;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * s
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let r = (-2.0 * (1.0 - q).ln()).sqrt();
        -(((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };

    // Halley refinement, using whichever tail keeps the residual precise.
    let e = if x <= 0.0 {
        normal_cdf(x) - q
    } else {
        (1.0 - q) - normal_sf(x)
    };
    let u = e * SQRT_2PI * (0.5 * x * x).exp();
    x -= u / (1.0 + 0.5 * x * u);
    Ok(x)
}

/// Two-sided standard-normal multiplier for central confidence `xi`.
pub fn z_for_confidence(xi: f64) -> Result<f64> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::arg(format!("confidence must lie in (0,1), got {xi}")));
    }
    normal_quantile(0.5 * (1.0 + xi))
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// `ln C(n, k)`.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Binomial pmf for a fixed number of trials, evaluated with Loader's
/// saddle-point form so that terms stay accurate to a few ulps for large `n`.
#[derive(Debug, Clone)]
pub struct BinomialPmf {
    n: u64,
    stirl: Vec<f64>,
}

impl BinomialPmf {
    pub fn new(n: u64) -> Self {
        let stirl = (0..=n).map(stirlerr).collect();
        Self { n, stirl }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// Probability of `k` successes with success probability `p`.
    pub fn pmf(&self, k: usize, p: f64) -> f64 {
        let n = self.n as usize;
        if k > n {
            return 0.0;
        }
        if p <= 0.0 {
            return if k == 0 { 1.0 } else { 0.0 };
        }
        if p >= 1.0 {
            return if k == n { 1.0 } else { 0.0 };
        }
        let q = 1.0 - p;
        let nf = n as f64;
        if k == 0 {
            return (nf * if p < 0.1 { (-p).ln_1p() } else { q.ln() }).exp();
        }
        if k == n {
            return (nf * if q < 0.1 { (-q).ln_1p() } else { p.ln() }).exp();
        }
        let kf = k as f64;
        let lc = self.stirl[n] - self.stirl[k] - self.stirl[n - k] - bd0(kf, nf * p) - bd0(nf - kf, nf * q);
        let lf = LN_2PI + kf.ln() + (-kf / nf).ln_1p();
        (lc - 0.5 * lf).exp()
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln n! - [(n + 1/2) ln n - n + ln sqrt(2 pi)]`.
fn stirlerr(n: u64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n == 0 {
        return 0.0;
    }
    let x = n as f64;
    if n <= 15 {
        return ln_gamma(x + 1.0) - (x + 0.5) * x.ln() + x - 0.5 * LN_2PI;
    }
    let nn = x * x;
    if n > 500 {
        (S0 - S1 / nn) / x
    } else if n > 80 {
        (S0 - (S1 - S2 / nn) / nn) / x
    } else if n > 35 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / x
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / x
    }
}

/// Deviance term `x ln(x/np) + np - x`, computed without cancellation.
fn bd0(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / np).ln() + np - x
    }
}

const BETACF_EPS: f64 = 1e-15;
const BETACF_TINY: f64 = 1e-300;
const BETACF_MAX_ITER: usize = 20_000;

fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < BETACF_TINY {
        d = BETACF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETACF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < BETACF_TINY {
            d = BETACF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < BETACF_TINY {
            c = BETACF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < BETACF_TINY {
            d = BETACF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < BETACF_TINY {
            c = BETACF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < BETACF_EPS {
            return Ok(h);
        }
    }
    Err(Error::NonConvergence {
        routine: "incomplete beta continued fraction",
        iterations: BETACF_MAX_ITER,
        residual: f64::NAN,
        last: vec![a, b, x],
    })
}

/// Regularized incomplete beta `I_x(a, b)`, evaluated by continued fraction.
pub fn try_reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::arg(format!("incomplete beta needs a,b > 0 (a={a}, b={b})")));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x >= 1.0 {
        return Ok(1.0);
    }
    let ln_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok((ln_front.exp() * beta_cf(a, b, x)? / a).clamp(0.0, 1.0))
    } else {
        Ok((1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x)? / b).clamp(0.0, 1.0))
    }
}

/// Panicking convenience wrapper around [`try_reg_inc_beta`] for callers
/// whose arguments are validated upstream.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    try_reg_inc_beta(a, b, x).expect("incomplete beta")
}

pub fn beta_pdf(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    ((a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)).exp()
}

/// Absolute tolerance on the returned abscissa.
pub const BETA_QUANTILE_TOL: f64 = 1e-10;
const BETA_QUANTILE_MAX_ITER: usize = 3000;

/// Quantile of Beta(a, b): safeguarded Newton iteration with a bisection
/// fallback, kept inside a shrinking bracket. Bisection switches to geometric
/// steps near zero so that very steep lower tails converge in relative terms.
pub fn beta_quantile(a: f64, b: f64, q: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::arg(format!("beta quantile needs a,b > 0 (a={a}, b={b})")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::arg(format!("beta quantile needs q in [0,1], got {q}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut x = initial_beta_guess(a, b, q);
    let mut prev_abs_f = f64::INFINITY;
    let mut bisect_next = false;
    for _ in 0..BETA_QUANTILE_MAX_ITER {
        let f = try_reg_inc_beta(a, b, x)? - q;
        if f == 0.0 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi || hi <= f64::MIN_POSITIVE {
            return Ok(0.5 * (lo + hi));
        }
        let mut next = if lo > 0.0 && hi > 2.0 * lo {
            lo.sqrt() * hi.sqrt()
        } else if lo == 0.0 && hi < 1e-3 {
            hi * 1e-3
        } else {
            0.5 * (lo + hi)
        };
        if !bisect_next {
            let d = beta_pdf(a, b, x);
            if d.is_finite() && d > 0.0 {
                let cand = x - f / d;
                if cand > lo && cand < hi {
                    next = cand;
                }
            }
        }
        // Fall back to bisection whenever Newton fails to halve the residual.
        bisect_next = f.abs() > 0.5 * prev_abs_f;
        prev_abs_f = f.abs();
        if (next - x).abs() <= 1e-15 * x || next == x {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::NonConvergence {
        routine: "beta quantile",
        iterations: BETA_QUANTILE_MAX_ITER,
        residual: hi - lo,
        last: vec![a, b, q, lo, hi],
    })
}

fn initial_beta_guess(a: f64, b: f64, q: f64) -> f64 {
    let mean = a / (a + b);
    let sd = (a * b / ((a + b) * (a + b) * (a + b + 1.0))).sqrt();
    let z = normal_quantile(q).unwrap_or(0.0);
    let x = mean + z * sd;
    x.clamp(1e-3 * mean, 1.0 - 1e-3 * (1.0 - mean))
}

/// Density of Student's t with `nu` degrees of freedom.
pub fn student_t_pdf(t: f64, nu: f64) -> f64 {
    (student_t_ln_norm(nu) - 0.5 * (nu + 1.0) * (t * t / nu).ln_1p()).exp()
}

/// Log of the Student-t density normalizing constant.
pub fn student_t_ln_norm(nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln()
}

/// Upper tail `P(T > t)` of Student's t.
///
/// Integer `nu` uses the finite trigonometric series; other values go
/// through the incomplete beta function.
pub fn student_t_sf(t: f64, nu: f64) -> f64 {
    if nu.fract() == 0.0 && (1.0..=200.0).contains(&nu) {
        let a = student_t_central(t.abs(), nu as u32);
        let tail = 0.5 * (1.0 - a);
        return if t >= 0.0 { tail } else { 1.0 - tail };
    }
    let x = nu / (nu + t * t);
    let tail = 0.5 * reg_inc_beta(0.5 * nu, 0.5, x);
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// `P(|T| < t)` for integer degrees of freedom, `t >= 0`.
fn student_t_central(t: f64, nu: u32) -> f64 {
    let theta = (t / (nu as f64).sqrt()).atan();
    let (s, c) = theta.sin_cos();
    let c2 = c * c;
    if nu % 2 == 1 {
        if nu == 1 {
            return 2.0 * theta / PI;
        }
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 2u32;
        while k <= nu - 3 {
            term *= c2 * k as f64 / (k + 1) as f64;
            sum += term;
            k += 2;
        }
        2.0 / PI * (theta + s * c * sum)
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1u32;
        while k + 1 < nu {
            term *= c2 * k as f64 / (k + 1) as f64;
            sum += term;
            k += 2;
        }
        s * sum
    }
}
