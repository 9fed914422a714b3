//! Goodness-of-fit weighted local-linear de-noiser.
//!
//! Every full-length least-squares line segment of each length in
//! `[l_min, l_max]` that covers a point contributes its fitted value there.
//! Contributions are weighted by how well the point sits on the line, how the
//! segment's residual scatter compares with all other segments, and where the
//! point falls inside the segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_normal_sf, student_t_ln_norm, student_t_sf};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailModel {
    Gaussian,
    /// Student t with `L - 2` degrees of freedom in place of the normal law.
    StudentEquivalent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthAdjust {
    None,
    InverseSqrtL,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothConfig {
    pub l_min: usize,
    pub l_max: usize,
    /// Exponent of the positional weight `1 / (x (1 - x))^w_t`.
    pub w_t: f64,
    pub tail: TailModel,
    pub length_adjust: LengthAdjust,
    pub cycles: u32,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            l_min: 7,
            l_max: 21,
            w_t: 1.0,
            tail: TailModel::StudentEquivalent,
            length_adjust: LengthAdjust::InverseSqrtL,
            cycles: 1,
        }
    }
}

impl SmoothConfig {
    /// Segment range used for 100-bin histogram curves.
    pub fn histogram() -> Self {
        Self { l_min: 10, l_max: 30, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_min < 3 {
            return Err(Error::arg(format!("l_min must be at least 3, got {}", self.l_min)));
        }
        if self.l_max < self.l_min {
            return Err(Error::arg(format!("l_max {} is below l_min {}", self.l_max, self.l_min)));
        }
        if !(0.0..=3.0).contains(&self.w_t) {
            return Err(Error::arg(format!("w_t must lie in [0,3], got {}", self.w_t)));
        }
        if self.cycles == 0 {
            return Err(Error::arg("at least one smoothing cycle is required"));
        }
        Ok(())
    }

    pub fn with_cycles(mut self, cycles: u32) -> Self {
        self.cycles = cycles;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentFit {
    pub start: usize,
    pub len: usize,
    pub slope: f64,
    pub intercept: f64,
    /// RMS residual of the fit.
    pub sigma_d: f64,
}

impl SegmentFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Cycles by sample size: 3 up to N < 400, 2 below 4000, then 1.
pub fn smooth_cycles_for_n(total: u64) -> u32 {
    if total < 400 {
        3
    } else if total < 4000 {
        2
    } else {
        1
    }
}

/// Smooths an evenly spaced series.
pub fn smooth(series: &[f64], config: &SmoothConfig) -> Result<Vec<f64>> {
    smooth_xy(None, series, config)
}

/// Smooths `y` sampled at abscissae `x` (strictly increasing), or at the
/// indices when `x` is `None`.
pub fn smooth_xy(x: Option<&[f64]>, y: &[f64], config: &SmoothConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if y.len() < config.l_min {
        return Err(Error::arg(format!("series of length {} is shorter than l_min {}", y.len(), config.l_min)));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("series contains non-finite values"));
    }
    let owned_x: Vec<f64>;
    let x = match x {
        Some(x) => {
            if x.len() != y.len() {
                return Err(Error::arg("abscissa and series lengths differ"));
            }
            if x.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::arg("abscissae must be strictly increasing"));
            }
            x
        }
        None => {
            owned_x = (0..y.len()).map(|i| i as f64).collect();
            &owned_x
        }
    };
    let mut cur = y.to_vec();
    for _ in 0..config.cycles {
        cur = one_pass(x, &cur, config);
    }
    Ok(cur)
}

/// All full-length segment fits for lengths `l_min..=l_max` (clipped to the
/// series length).
pub fn fit_segments(x: &[f64], y: &[f64], l_min: usize, l_max: usize) -> Vec<SegmentFit> {
    let n = y.len();
    let mut out = Vec::new();
    for len in l_min..=l_max.min(n) {
        for start in 0..=n - len {
            out.push(fit_line(x, y, start, len));
        }
    }
    out
}

fn fit_line(x: &[f64], y: &[f64], start: usize, len: usize) -> SegmentFit {
    let xs = &x[start..start + len];
    let ys = &y[start..start + len];
    let l = len as f64;
    let xm = xs.iter().sum::<f64>() / l;
    let ym = ys.iter().sum::<f64>() / l;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (xi, yi) in xs.iter().zip(ys) {
        let dx = xi - xm;
        sxx += dx * dx;
        sxy += dx * (yi - ym);
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(xi, yi)| {
            let r = yi - (ym + slope * (xi - xm));
            r * r
        })
        .sum();
    SegmentFit { start, len, slope, intercept, sigma_d: (rss / l).sqrt() }
}

fn one_pass(x: &[f64], y: &[f64], cfg: &SmoothConfig) -> Vec<f64> {
    let n = y.len();
    let segs = fit_segments(x, y, cfg.l_min, cfg.l_max);

    let m = segs.len() as f64;
    let sigma_ave = segs.iter().map(|s| s.sigma_d).sum::<f64>() / m;
    let sigma_rms = (segs.iter().map(|s| (s.sigma_d - sigma_ave).powi(2)).sum::<f64>() / m).sqrt();
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let sigma_floor = (1e-12 * (hi - lo)).max(f64::MIN_POSITIVE);
    let flat_scatter = sigma_rms <= 1e-12 * sigma_ave.max(sigma_floor);

    // Per-segment part of the log weight.
    let seg_lw: Vec<f64> = segs
        .iter()
        .map(|s| {
            let l = s.len as f64;
            let ln_seg = if flat_scatter {
                -std::f64::consts::LN_2
            } else {
                let z = (s.sigma_d - sigma_ave) / sigma_rms;
                match cfg.tail {
                    TailModel::Gaussian => ln_normal_sf(z),
                    TailModel::StudentEquivalent => student_t_sf(z, l - 2.0).ln(),
                }
            };
            let ln_adj = match cfg.length_adjust {
                LengthAdjust::None => 0.0,
                LengthAdjust::InverseSqrtL => -0.5 * l.ln(),
            };
            ln_seg + ln_adj - s.sigma_d.max(sigma_floor).ln()
        })
        .collect();

    let l_hi = cfg.l_max.min(n);
    let ln_norm: Vec<f64> = (0..=l_hi)
        .map(|l| if l > 2 { LN_SQRT_2PI + student_t_ln_norm(l as f64 - 2.0) } else { 0.0 })
        .collect();
    // ln_pos[l][k]: positional log weight of the k-th point of a length-l segment.
    let ln_pos: Vec<Vec<f64>> = (0..=l_hi)
        .map(|l| {
            (1..=l)
                .map(|k| {
                    let x = k as f64 / (l as f64 + 1.0);
                    -cfg.w_t * (x * (1.0 - x)).ln()
                })
                .collect()
        })
        .collect();

    let mut lw = Vec::with_capacity(segs.iter().map(|s| s.len).sum());
    let mut pred = Vec::with_capacity(lw.capacity());
    let mut top = vec![f64::NEG_INFINITY; n];
    for (s, &base) in segs.iter().zip(&seg_lw) {
        let sig = s.sigma_d.max(sigma_floor);
        let nu = s.len as f64 - 2.0;
        for (k, i) in (s.start..s.start + s.len).enumerate() {
            let p = s.predict(x[i]);
            let u = (y[i] - p) / sig;
            let ln_density = match cfg.tail {
                TailModel::Gaussian => -0.5 * u * u,
                TailModel::StudentEquivalent => ln_norm[s.len] - 0.5 * (nu + 1.0) * (u * u / nu).ln_1p(),
            };
            let w = base + ln_density + ln_pos[s.len][k];
            if w > top[i] {
                top[i] = w;
            }
            lw.push(w);
            pred.push(p);
        }
    }
    let mut num = vec![0.0; n];
    let mut den = vec![0.0; n];
    let mut plain = vec![(0.0, 0usize); n];
    let mut at = 0;
    for s in &segs {
        for i in s.start..s.start + s.len {
            plain[i].0 += pred[at];
            plain[i].1 += 1;
            if top[i].is_finite() {
                let w = (lw[at] - top[i]).exp();
                num[i] += w * pred[at];
                den[i] += w;
            }
            at += 1;
        }
    }
    (0..n)
        .map(|i| if den[i] > 0.0 { num[i] / den[i] } else { plain[i].0 / plain[i].1 as f64 })
        .collect()
}
