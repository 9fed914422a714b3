//! Trial densities, histogram sampling, Monte Carlo ensembles of the
//! estimation pipeline, and the S/N comparison table.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::goofy_loess::SmoothConfig;
use crate::smooth_pipeline::{denoise_scale, initial_curve, n_equivalent, snr, EstimateCurve, Histogram, InitialEstimator, NEquivalent, SigmaModel, Stage};
use crate::special::{beta_quantile, normal_cdf, normal_quantile, reg_inc_beta};

/// Histogram half-range in standard deviations.
pub const RANGE_SIGMAS: f64 = 3.5;

/// Trials handled per work unit; fixed so that sums do not depend on the pool size.
const CHUNK: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPdf {
    StdNormal,
    /// Density proportional to `frac(4x)` on `[0, 1)`.
    Sawtooth,
    Beta { a: f64, b: f64 },
}

impl fmt::Display for TrialPdf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrialPdf::StdNormal => write!(f, "std_normal"),
            TrialPdf::Sawtooth => write!(f, "sawtooth"),
            TrialPdf::Beta { a, b } => write!(f, "beta({a},{b})"),
        }
    }
}

impl TrialPdf {
    pub fn beta(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::arg(format!("beta parameters must be positive, got ({a}, {b})")));
        }
        Ok(TrialPdf::Beta { a, b })
    }

    /// Accepts `std_normal`, `normal`, `gaussian`, `sawtooth` and `beta(a,b)`.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "std_normal" | "normal" | "gaussian" => return Ok(TrialPdf::StdNormal),
            "sawtooth" => return Ok(TrialPdf::Sawtooth),
            _ => {}
        }
        let inner = t
            .strip_prefix("beta(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::arg(format!("unknown trial pdf '{s}'")))?;
        let mut it = inner.split(',').map(|v| v.trim().parse::<f64>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(a)), Some(Ok(b)), None) => Self::beta(a, b),
            _ => Err(Error::arg(format!("cannot parse beta parameters in '{s}'"))),
        }
    }

    fn stream_id(&self) -> u64 {
        match self {
            TrialPdf::StdNormal => 1,
            TrialPdf::Sawtooth => 2,
            TrialPdf::Beta { a, b } => splitmix(a.to_bits() ^ b.to_bits().rotate_left(29)),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            TrialPdf::StdNormal => normal_cdf(x),
            TrialPdf::Sawtooth => {
                if x <= 0.0 {
                    0.0
                } else if x >= 1.0 {
                    1.0
                } else {
                    let t = 4.0 * x;
                    let k = t.floor();
                    let u = t - k;
                    (k + u * u) / 4.0
                }
            }
            TrialPdf::Beta { a, b } => {
                if x <= 0.0 {
                    0.0
                } else if x >= 1.0 {
                    1.0
                } else {
                    reg_inc_beta(a, b, x)
                }
            }
        }
    }

    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::arg(format!("quantile level must lie in [0,1], got {q}")));
        }
        match *self {
            TrialPdf::StdNormal => {
                if q == 0.0 {
                    Ok(f64::NEG_INFINITY)
                } else if q == 1.0 {
                    Ok(f64::INFINITY)
                } else {
                    normal_quantile(q)
                }
            }
            TrialPdf::Sawtooth => {
                let k = (4.0 * q).floor().min(3.0);
                let u = (4.0 * q - k).max(0.0).sqrt();
                Ok((k + u) / 4.0)
            }
            TrialPdf::Beta { a, b } => beta_quantile(a, b, q),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            TrialPdf::StdNormal => 0.0,
            TrialPdf::Sawtooth => 13.0 / 24.0,
            TrialPdf::Beta { a, b } => a / (a + b),
        }
    }

    pub fn std_dev(&self) -> f64 {
        match *self {
            TrialPdf::StdNormal => 1.0,
            TrialPdf::Sawtooth => 47f64.sqrt() / 24.0,
            TrialPdf::Beta { a, b } => (a * b / ((a + b) * (a + b) * (a + b + 1.0))).sqrt(),
        }
    }
}

/// Standard normal, sawtooth and four beta densities.
pub fn standard_suite() -> Vec<TrialPdf> {
    vec![
        TrialPdf::StdNormal,
        TrialPdf::Sawtooth,
        TrialPdf::Beta { a: 3.0, b: 15.0 },
        TrialPdf::Beta { a: 9.0, b: 11.0 },
        TrialPdf::Beta { a: 6.0, b: 2.0 },
        TrialPdf::Beta { a: 5.0, b: 3.0 },
    ]
}

/// [`standard_suite`] plus two strongly skewed betas.
pub fn extended_suite() -> Vec<TrialPdf> {
    let mut v = standard_suite();
    v.push(TrialPdf::Beta { a: 2.0, b: 21.0 });
    v.push(TrialPdf::Beta { a: 63.0, b: 6.0 });
    v
}

/// `bins + 1` equal-width edges spanning mean ± 3.5 sd.
pub fn geometry(pdf: &TrialPdf, bins: u32) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::arg(format!("need at least 2 bins, got {bins}")));
    }
    let (m, s) = (pdf.mean(), pdf.std_dev());
    let lo = m - RANGE_SIGMAS * s;
    let w = 2.0 * RANGE_SIGMAS * s / bins as f64;
    Ok((0..=bins).map(|i| if i == bins { m + RANGE_SIGMAS * s } else { lo + w * i as f64 }).collect())
}

/// Bin probabilities with the tails folded into the end bins.
pub fn true_bin_probs(pdf: &TrialPdf, edges: &[f64]) -> Vec<f64> {
    let b = edges.len() - 1;
    let cuts: Vec<f64> = edges[1..b].iter().map(|&e| pdf.cdf(e)).collect();
    let mut out = Vec::with_capacity(b);
    let mut prev = 0.0;
    for &c in &cuts {
        out.push((c - prev).max(0.0));
        prev = c;
    }
    out.push((1.0 - prev).max(0.0));
    out
}

/// Interior CDF cut points used to bin uniform draws.
#[derive(Debug, Clone)]
pub struct Binner {
    pub edges: Vec<f64>,
    cuts: Vec<f64>,
    lo_mass: f64,
    hi_mass: f64,
}

impl Binner {
    pub fn new(pdf: &TrialPdf, edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("edges must be strictly increasing with at least 2 bins"));
        }
        let b = edges.len() - 1;
        let cuts = edges[1..b].iter().map(|&e| pdf.cdf(e)).collect();
        let lo_mass = pdf.cdf(edges[0]);
        let hi_mass = pdf.cdf(edges[b]);
        Ok(Self { edges, cuts, lo_mass, hi_mass })
    }

    /// Bin of the draw `x = F^{-1}(u)`, i.e. `F(e_i) <= u < F(e_{i+1})`.
    pub fn bin_of(&self, u: f64) -> usize {
        self.cuts.partition_point(|&c| c <= u)
    }
}

/// `N` draws binned by inverse CDF; out-of-range draws go to the end bins.
pub fn sample_histogram<R: Rng>(binner: &Binner, total: u64, rng: &mut R) -> Histogram {
    let mut counts = vec![0u64; binner.edges.len() - 1];
    let mut overflow = false;
    for _ in 0..total {
        let u: f64 = rng.gen();
        overflow |= u < binner.lo_mass || u >= binner.hi_mass;
        counts[binner.bin_of(u)] += 1;
    }
    Histogram { counts, edges: binner.edges.clone(), overflow }
}

/// `N` draws from `pdf` by inverse CDF.
pub fn sample_values<R: Rng>(pdf: &TrialPdf, total: usize, rng: &mut R) -> Result<Vec<f64>> {
    (0..total)
        .map(|_| {
            let u: f64 = rng.gen();
            pdf.quantile(u)
        })
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one trial: the master seed is mixed with the pdf and `N`,
/// and the trial index selects the stream.
pub fn trial_rng(seed: u64, pdf: &TrialPdf, total: u64, trial: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed) ^ splitmix(pdf.stream_id()) ^ total.rotate_left(32));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(trial);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub bins: u32,
    pub xi: f64,
    pub trials: u64,
    pub seed: u64,
    /// Run the de-noising stage as well as the raw one.
    pub smooth: bool,
    pub smooth_cfg: SmoothConfig,
    pub model: SigmaModel,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            bins: 100,
            xi: 0.95,
            trials: 2000,
            seed: 0,
            smooth: true,
            smooth_cfg: SmoothConfig::histogram(),
            model: SigmaModel::default(),
        }
    }
}

/// Monte Carlo statistics of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: Stage,
    /// NaN when the true probabilities are all equal.
    pub snr_mean: f64,
    pub snr_var: f64,
    /// Trials whose S/N was infinite (exact recovery) and left out of the mean.
    pub snr_infinite: u64,
    pub mean_p_hat: Vec<f64>,
    /// RMS deviation of `p_hat` from the truth.
    pub sigma_mc: Vec<f64>,
    pub mean_sigma_hat: Vec<f64>,
    /// Mean of `sqrt(p_hat (1 - p_hat))`.
    pub mean_sqrt_pq: Vec<f64>,
    /// Fraction of trials whose interval held the true value.
    pub coverage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub pdf: TrialPdf,
    pub total: u64,
    pub estimator: String,
    pub trials: u64,
    pub seed: u64,
    pub p_true: Vec<f64>,
    pub raw: StageStats,
    pub scaled: Option<StageStats>,
}

impl EnsembleResult {
    pub fn stage(&self, stage: Stage) -> Option<&StageStats> {
        match stage {
            Stage::Raw => Some(&self.raw),
            _ => self.scaled.as_ref(),
        }
    }

    /// Per-bin CSV: bin, p_true, mean_p_hat, sigma_mc, mean_sigma, coverage.
    pub fn bins_csv(&self, stage: Stage) -> Result<String> {
        let st = self.stage(stage).ok_or_else(|| Error::arg(format!("stage {} was not run", stage.name())))?;
        let mut out = String::from("bin,p_true,mean_p_hat,sigma_mc,mean_sigma,coverage\n");
        for i in 0..self.p_true.len() {
            out.push_str(&format!(
                "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
                i, self.p_true[i], st.mean_p_hat[i], st.sigma_mc[i], st.mean_sigma_hat[i], st.coverage[i]
            ));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct Acc {
    snr_sum: f64,
    snr_sq: f64,
    snr_n: u64,
    snr_inf: u64,
    p: Vec<f64>,
    err2: Vec<f64>,
    sig: Vec<f64>,
    spq: Vec<f64>,
    cov: Vec<u64>,
}

impl Acc {
    fn new(b: usize) -> Self {
        Self {
            snr_sum: 0.0,
            snr_sq: 0.0,
            snr_n: 0,
            snr_inf: 0,
            p: vec![0.0; b],
            err2: vec![0.0; b],
            sig: vec![0.0; b],
            spq: vec![0.0; b],
            cov: vec![0; b],
        }
    }

    fn add(&mut self, c: &EstimateCurve, truth: &[f64], with_snr: bool) -> Result<()> {
        let s = if with_snr { snr(&c.p_hat, truth)? } else { f64::NAN };
        if s.is_finite() {
            self.snr_sum += s;
            self.snr_sq += s * s;
            self.snr_n += 1;
        } else if s.is_infinite() {
            self.snr_inf += 1;
        }
        for i in 0..truth.len() {
            let p = c.p_hat[i];
            self.p[i] += p;
            self.err2[i] += (p - truth[i]).powi(2);
            self.sig[i] += c.sigma_hat[i];
            self.spq[i] += (p * (1.0 - p)).max(0.0).sqrt();
            self.cov[i] += c.intervals[i].contains(truth[i]) as u64;
        }
        Ok(())
    }

    fn merge(&mut self, o: &Acc) {
        self.snr_sum += o.snr_sum;
        self.snr_sq += o.snr_sq;
        self.snr_n += o.snr_n;
        self.snr_inf += o.snr_inf;
        for i in 0..self.p.len() {
            self.p[i] += o.p[i];
            self.err2[i] += o.err2[i];
            self.sig[i] += o.sig[i];
            self.spq[i] += o.spq[i];
            self.cov[i] += o.cov[i];
        }
    }

    fn finish(&self, stage: Stage, trials: u64) -> StageStats {
        let r = trials as f64;
        let m = if self.snr_n > 0 {
            self.snr_sum / self.snr_n as f64
        } else if self.snr_inf > 0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
        let var = if self.snr_n > 0 { (self.snr_sq / self.snr_n as f64 - m * m).max(0.0) } else { 0.0 };
        StageStats {
            stage,
            snr_mean: m,
            snr_var: var,
            snr_infinite: self.snr_inf,
            mean_p_hat: self.p.iter().map(|v| v / r).collect(),
            sigma_mc: self.err2.iter().map(|v| (v / r).sqrt()).collect(),
            mean_sigma_hat: self.sig.iter().map(|v| v / r).collect(),
            mean_sqrt_pq: self.spq.iter().map(|v| v / r).collect(),
            coverage: self.cov.iter().map(|&v| v as f64 / r).collect(),
        }
    }
}

/// Runs the pipeline on `cfg.trials` independent histograms.
pub fn run_ensemble(pdf: &TrialPdf, total: u64, est: &InitialEstimator, cfg: &EnsembleConfig) -> Result<EnsembleResult> {
    if cfg.trials == 0 {
        return Err(Error::arg("ensemble needs at least one trial"));
    }
    let edges = geometry(pdf, cfg.bins)?;
    let truth = true_bin_probs(pdf, &edges);
    let binner = Binner::new(pdf, edges)?;
    let b = cfg.bins as usize;
    // S/N is undefined when every bin has the same true probability.
    let with_snr = truth.iter().any(|&p| p != truth[0]);
    let chunks: Vec<u64> = (0..cfg.trials.div_ceil(CHUNK)).collect();
    let parts = chunks
        .par_iter()
        .map(|&c| {
            let mut raw = Acc::new(b);
            let mut scaled = Acc::new(b);
            for t in c * CHUNK..((c + 1) * CHUNK).min(cfg.trials) {
                let mut rng = trial_rng(cfg.seed, pdf, total, t);
                let h = sample_histogram(&binner, total, &mut rng);
                let curve = initial_curve(&h, est, cfg.xi)?;
                raw.add(&curve, &truth, with_snr)?;
                if cfg.smooth {
                    let s = denoise_scale(&curve, &cfg.smooth_cfg, &cfg.model)?;
                    scaled.add(&s, &truth, with_snr)?;
                }
            }
            Ok((raw, scaled))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut raw = Acc::new(b);
    let mut scaled = Acc::new(b);
    for (r, s) in &parts {
        raw.merge(r);
        scaled.merge(s);
    }
    Ok(EnsembleResult {
        pdf: *pdf,
        total,
        estimator: est.kind().name().into(),
        trials: cfg.trials,
        seed: cfg.seed,
        p_true: truth,
        raw: raw.finish(Stage::Raw, cfg.trials),
        scaled: cfg.smooth.then(|| scaled.finish(Stage::Scaled, cfg.trials)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S1Cell {
    pub snr: f64,
    /// `None` when the column's S/N curve is not monotone.
    pub n_eq: Option<NEquivalent>,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S1Row {
    pub total: u64,
    pub cells: Vec<S1Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S1Table {
    pub pdf: String,
    pub columns: Vec<String>,
    pub rows: Vec<S1Row>,
}

/// For each `N`, every column's S/N and the sample size at which that
/// column would match the best S/N in the row. `columns` pairs a label with
/// MC-mean S/N values aligned to `grid`.
pub fn table_s1(pdf: &str, grid: &[u64], columns: &[(String, Vec<f64>)]) -> Result<S1Table> {
    if columns.is_empty() || grid.len() < 2 {
        return Err(Error::arg("table needs at least one column and two sample sizes"));
    }
    if columns.iter().any(|(_, v)| v.len() != grid.len()) {
        return Err(Error::arg("every column needs one S/N per sample size"));
    }
    let curves: Vec<Vec<(f64, f64)>> =
        columns.iter().map(|(_, v)| grid.iter().zip(v).map(|(&n, &s)| (n as f64, s)).collect()).collect();
    let rows = grid
        .iter()
        .enumerate()
        .map(|(r, &n)| {
            let best = columns.iter().map(|(_, v)| v[r]).fold(f64::NEG_INFINITY, f64::max);
            let cells = columns
                .iter()
                .zip(&curves)
                .map(|((_, v), curve)| {
                    let n_eq = n_equivalent(best, curve).ok();
                    let ratio = n_eq.map_or(f64::NAN, |e| e.n / n as f64);
                    S1Cell { snr: v[r], n_eq, ratio }
                })
                .collect();
            S1Row { total: n, cells }
        })
        .collect();
    Ok(S1Table { pdf: pdf.into(), columns: columns.iter().map(|(l, _)| l.clone()).collect(), rows })
}

impl S1Table {
    /// Extrapolated N_eq values carry a trailing `*`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pdf,N");
        for c in &self.columns {
            out.push_str(&format!(",{c}_snr,{c}_neq,{c}_ratio"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{}", self.pdf, row.total));
            for cell in &row.cells {
                match cell.n_eq {
                    Some(e) => out.push_str(&format!(
                        ",{:.8e},{:.8e}{},{:.8e}",
                        cell.snr,
                        e.n,
                        if e.extrapolated { "*" } else { "" },
                        cell.ratio
                    )),
                    None => out.push_str(&format!(",{:.8e},NaN,NaN", cell.snr)),
                }
            }
            out.push('\n');
        }
        out
    }
}
