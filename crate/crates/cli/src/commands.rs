use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use propcal::coverage::{coverage_sweep, CurveAxis, Sweep};
use propcal::discrete_est::{self, AdmissibleSet, DiscretePrior};
use propcal::goofy_loess::{smooth_xy, LengthAdjust, SmoothConfig, TailModel};
use propcal::mc_lab::{self, run_ensemble, table_s1, EnsembleConfig, TrialPdf};
use propcal::prior_opt::{
    coverage_at, default_start, equal_zones, fit_exponential, optimize_alpha0, optimize_alpha0_zones, reoptimize_rounds, AlphaEntry,
    AlphaTable, ExpFitMode, OptFlags, OptimizeConfig, RoundSmoother,
};
use propcal::coverage::{interior_grid, mismatch_of};
use propcal::proportions::{Estimator, PosteriorKind, PosteriorSpec, PriorFamily, PriorSpec};
use propcal::sigma_cal::{calibrate_points, calibration_points, CalibrationArtifact, CalibrationConfig, CALIBRATION_GRID};
use propcal::smooth_pipeline::{
    denoise_scale, initial_curve, AlphaSource, Histogram, InitialEstimator, SigmaModel, Stage, StartKind, DEFAULT_ALPHA_FIT,
};
use propcal::ExpFit;

use crate::config::{parse_n_grid, parse_p_grid, Settings};
use crate::manifest::{RunDir, RunManifest, MANIFEST_NAME};
use crate::{Cli, CliError, Command};

type Res<T> = std::result::Result<T, CliError>;

const DESK_TRIALS: u64 = 2_000;
const FULL_SCALE_TRIALS: u64 = 10_000;

pub fn run(cli: Cli) -> Res<()> {
    let g = &cli.global;
    let mut s = Settings::load(g.config.as_deref())?;
    let seed = s.pick("seed", g.seed, 0u64)?;
    if let Some(t) = s.pick_opt("threads", g.threads)? {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Core(propcal::Error::Config(e.to_string())))?;
    }
    let paper = s.switch("paper_scale", g.paper_scale)?;
    let default_trials = if paper { FULL_SCALE_TRIALS } else { DESK_TRIALS };
    let (name, run) = match &cli.command {
        Command::Estimate(a) => ("estimate", estimate(a, &mut s, &g.out)?),
        Command::Coverage(a) => ("coverage", coverage(a, &mut s, &g.out)?),
        Command::Optimize(a) => ("optimize", optimize(a, &mut s, &g.out)?),
        Command::Smooth(a) => ("smooth", smooth(a, &mut s, &g.out)?),
        Command::Calibrate(a) => ("calibrate", calibrate(a, &mut s, &g.out, seed, default_trials)?),
        Command::Mc(a) => ("mc", mc(a, &mut s, &g.out, seed, default_trials)?),
        Command::DiscreteTable(a) => ("discrete-table", discrete_table(a, &mut s, &g.out)?),
    };
    let dir = run.dir.clone();
    let written = run.finish(name, s.echo, seed)?;
    if RunManifest::read(&dir.join(MANIFEST_NAME))? != written {
        return Err(CliError::Core(propcal::Error::Numeric { routine: "manifest", detail: "manifest did not read back unchanged".into() }));
    }
    Ok(())
}

fn sci(x: f64) -> String {
    format!("{x:.8e}")
}

fn path_opt(s: &mut Settings, key: &str, flag: &Option<PathBuf>) -> Res<Option<PathBuf>> {
    Ok(s.pick_opt(key, flag.as_ref().map(|p| p.display().to_string()))?.map(PathBuf::from))
}

fn posterior_kind(s: &str) -> Res<PosteriorKind> {
    match s {
        "normal" => Ok(PosteriorKind::NormalApprox),
        "beta" => Ok(PosteriorKind::BetaExact),
        "discrete" => Ok(PosteriorKind::DiscreteRect),
        o => Err(CliError::Usage(format!("unknown posterior '{o}' (normal, beta, discrete)"))),
    }
}

fn prior_family(s: &str, alpha0: Option<f64>, xi: f64) -> Res<PriorFamily> {
    Ok(match s {
        "uniform" => PriorFamily::Uniform,
        "jeffreys" => PriorFamily::Jeffreys,
        "dirichlet" => PriorFamily::GeneralizedDirichlet {
            alpha0: alpha0.ok_or_else(|| CliError::Usage("--prior dirichlet needs --alpha0".into()))?,
        },
        "wald" => PriorFamily::Wald,
        "wilson" => PriorFamily::Wilson { xi },
        "agresti_coull" => PriorFamily::AgrestiCoull { xi },
        o => Err(CliError::Usage(format!("unknown prior '{o}' (uniform, jeffreys, dirichlet, wald, wilson, agresti_coull)")))?,
    })
}

/// Admissible set for the discrete estimator, read from or stored in
/// `$PROPCAL_CACHE` when that is set.
fn discrete_set(total: u64, bins: u32, xi: f64, prior: Option<DiscretePrior>) -> Res<AdmissibleSet> {
    let prior = prior.unwrap_or(if bins == 2 { DiscretePrior::UniformWidth } else { DiscretePrior::Combinatorial });
    Ok(match std::env::var_os("PROPCAL_CACHE") {
        Some(dir) if !dir.is_empty() => discrete_est::cached_thetas(Path::new(&dir), total, bins, xi, prior)?,
        _ => discrete_est::self_consistent_thetas(total, bins, xi, prior)?,
    })
}

fn alpha_source(s: &mut Settings, table: &Option<PathBuf>, fit: &Option<PathBuf>, xi: f64) -> Res<AlphaSource> {
    let table = path_opt(s, "alpha_table", table)?;
    let fit = path_opt(s, "alpha_fit", fit)?;
    Ok(match (table, fit) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give either --alpha-table or --alpha-fit, not both".into())),
        (Some(t), None) => AlphaSource::Table(AlphaTable::read_csv(&t, xi, PosteriorKind::NormalApprox, 2)?),
        (None, Some(f)) => AlphaSource::Fit(ExpFit::read_json(&f)?),
        (None, None) => AlphaSource::Fit(DEFAULT_ALPHA_FIT),
    })
}

fn histogram_smoother(s: &mut Settings, l_min: Option<usize>, l_max: Option<usize>) -> Res<SmoothConfig> {
    let d = SmoothConfig::histogram();
    let cfg = SmoothConfig { l_min: s.pick("l_min", l_min, d.l_min)?, l_max: s.pick("l_max", l_max, d.l_max)?, ..d };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Histogram CSV with columns bin_lo, bin_hi, count.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// multinomial_ros, optimized_b2 or discrete.
    #[arg(long)]
    pub estimator: Option<String>,
    #[arg(long)]
    pub xi: Option<f64>,
    /// De-noise and rescale; needs --calibration.
    #[arg(long)]
    pub smooth: bool,
    /// Calibration artifact from `propcal calibrate`.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Full-range alpha0 table from `propcal optimize`.
    #[arg(long)]
    pub alpha_table: Option<PathBuf>,
    /// Exponential alpha0(N) fit as JSON.
    #[arg(long)]
    pub alpha_fit: Option<PathBuf>,
    #[arg(long)]
    pub l_min: Option<usize>,
    #[arg(long)]
    pub l_max: Option<usize>,
}

fn estimate(a: &EstimateArgs, s: &mut Settings, out: &Path) -> Res<RunDir> {
    let input = path_opt(s, "input", &a.input)?.ok_or_else(|| CliError::Usage("--input is required".into()))?;
    let kind = StartKind::parse(&s.pick("estimator", a.estimator.clone(), "multinomial_ros".to_string())?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let xi = s.pick("xi", a.xi, 0.95)?;
    let smooth = s.switch("smooth", a.smooth)?;
    let calibration = path_opt(s, "calibration", &a.calibration)?;
    let alpha = alpha_source(s, &a.alpha_table, &a.alpha_fit, xi)?;
    let cfg = histogram_smoother(s, a.l_min, a.l_max)?;
    s.finish()?;

    let model = match (smooth, calibration) {
        (true, None) => {
            return Err(CliError::Core(propcal::Error::Config(
                "--smooth needs a calibration artifact (--calibration calibration.json)".into(),
            )))
        }
        (true, Some(p)) => Some(CalibrationArtifact::read_json(&p)?.model()?),
        (false, _) => None,
    };
    let hist = Histogram::read_csv(&input)?;
    let total = hist.total();
    let set = match kind {
        StartKind::Discrete => Some(discrete_set(total, hist.bins() as u32, xi, None)?),
        _ => None,
    };
    let est = InitialEstimator::resolve(kind, total, Some(&alpha), set.as_ref())?;
    let raw = initial_curve(&hist, &est, xi)?;
    let mut run = RunDir::create(out)?;
    match model {
        Some(m) => {
            raw.write_csv(&run.artifact("raw.csv"))?;
            let scaled = denoise_scale(&raw, &cfg, &m)?;
            scaled.write_csv(&run.artifact("estimate.csv"))?;
        }
        None => raw.write_csv(&run.artifact("estimate.csv"))?,
    }
    Ok(run)
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    /// uniform, jeffreys, dirichlet, wald, wilson or agresti_coull.
    #[arg(long)]
    pub prior: Option<String>,
    /// Pseudocount for --prior dirichlet.
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// normal, beta or discrete.
    #[arg(long)]
    pub posterior: Option<String>,
    #[arg(long)]
    pub bins: Option<u32>,
    #[arg(long)]
    pub xi: Option<f64>,
    /// True proportion for a sweep over N.
    #[arg(long)]
    pub p: Option<f64>,
    /// Sample sizes: `a..b`, `a..b:step` or a comma list.
    #[arg(long)]
    pub n_grid: Option<String>,
    /// Sample size for a sweep over p.
    #[arg(long)]
    pub n: Option<u64>,
    /// Proportions: `lo:hi:m` interior points or a comma list.
    #[arg(long)]
    pub p_grid: Option<String>,
}

fn coverage(a: &CoverageArgs, s: &mut Settings, out: &Path) -> Res<RunDir> {
    let xi = s.pick("xi", a.xi, 0.95)?;
    let alpha0 = s.pick_opt("alpha0", a.alpha0)?;
    let family = prior_family(&s.pick("prior", a.prior.clone(), "uniform".to_string())?, alpha0, xi)?;
    let kind = posterior_kind(&s.pick("posterior", a.posterior.clone(), "normal".to_string())?)?;
    let bins = s.pick("bins", a.bins, 2u32)?;
    let p = s.pick_opt("p", a.p)?;
    let n_grid = s.pick_opt("n_grid", a.n_grid.clone())?;
    let n = s.pick_opt("n", a.n)?;
    let p_grid = s.pick_opt("p_grid", a.p_grid.clone())?;
    s.finish()?;

    let sweep = match (p, n_grid, n, p_grid) {
        (Some(p), Some(g), None, None) => Sweep::OverN { p, ns: parse_n_grid(&g)? },
        (None, None, Some(n), Some(g)) => Sweep::OverP { total: n, ps: parse_p_grid(&g)? },
        _ => return Err(CliError::Usage("give either --p with --n-grid, or --n with --p-grid".into())),
    };
    let est = Estimator::new(PriorSpec::new(family, bins)?, PosteriorSpec::new(kind, xi)?)?;
    let curve = coverage_sweep(&sweep, &est)?;
    let mut csv = String::from(match curve.axis {
        CurveAxis::OverN => "N,coverage\n",
        CurveAxis::OverP => "p,coverage\n",
    });
    for (x, c) in &curve.points {
        match curve.axis {
            CurveAxis::OverN => writeln!(csv, "{},{}", *x as u64, sci(*c)),
            CurveAxis::OverP => writeln!(csv, "{},{}", sci(*x), sci(*c)),
        }
        .expect("write to string");
    }
    let min = curve.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let at_or_above = curve.points.iter().filter(|p| p.1 >= xi).count() as f64 / curve.points.len() as f64;
    println!("points {}  min C {}  fraction C >= xi {}", curve.points.len(), sci(min), sci(at_or_above));
    let mut run = RunDir::create(out)?;
    run.write("coverage.csv", &csv)?;
    Ok(run)
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub n_grid: Option<String>,
    /// normal or beta.
    #[arg(long)]
    pub posterior: Option<String>,
    #[arg(long)]
    pub bins: Option<u32>,
    #[arg(long)]
    pub xi: Option<f64>,
    /// Equal-width zones of p; 1 is the full range.
    #[arg(long)]
    pub zones: Option<usize>,
    /// Grid points per zone.
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub start: Option<f64>,
    /// Exponential-fit re-optimization rounds (full range only).
    #[arg(long)]
    pub rounds: Option<usize>,
}

fn optimize(a: &OptimizeArgs, s: &mut Settings, out: &Path) -> Res<RunDir> {
    let ns = parse_n_grid(&s.pick("n_grid", a.n_grid.clone(), "1..100".to_string())?)?;
    let kind = posterior_kind(&s.pick("posterior", a.posterior.clone(), "normal".to_string())?)?;
    if kind == PosteriorKind::DiscreteRect {
        return Err(CliError::Usage("alpha0 optimization needs --posterior normal or beta".into()));
    }
    let bins = s.pick("bins", a.bins, 2u32)?;
    let xi = s.pick("xi", a.xi, 0.95)?;
    let zones = s.pick("zones", a.zones, 1usize)?;
    let per_zone = s.pick("grid_points", a.grid_points, propcal::prior_opt::DEFAULT_GRID_POINTS)?;
    let start = s.pick("start", a.start, default_start(kind))?;
    let rounds = s.pick("rounds", a.rounds, 0usize)?;
    s.finish()?;
    if zones == 0 || per_zone == 0 {
        return Err(CliError::Usage("--zones and --grid-points must be positive".into()));
    }
    if rounds > 0 && zones != 1 {
        return Err(CliError::Usage("--rounds applies to full-range optimization (--zones 1)".into()));
    }
    let cfg = OptimizeConfig::default();
    let zb = equal_zones(zones);
    let mut table = AlphaTable::new(xi, kind, bins, zb.clone())?;
    let mut run = RunDir::create(out)?;

    if rounds == 0 {
        for &n in &ns {
            table.entries.extend(optimize_alpha0_zones(n, xi, kind, bins, &zb, per_zone, start, &cfg)?);
        }
    } else {
        let grid = interior_grid(0.0, 1.0, per_zone);
        let opt = |n: u64, a0: f64| optimize_alpha0(n, xi, kind, bins, &grid, a0, &cfg);
        let initial = ns.iter().map(|&n| opt(n, start).map(|o| o.alpha0)).collect::<propcal::Result<Vec<_>>>()?;
        let hist = reoptimize_rounds(&ns, &initial, rounds, &RoundSmoother::Exponential(ExpFitMode::TwoParam), opt)?;
        let mut csv = String::from("round,N,ideal,alpha0\n");
        for (r, round) in hist.iter().enumerate() {
            for (i, n) in ns.iter().enumerate() {
                writeln!(csv, "{},{},{},{}", r + 1, n, sci(round.ideal[i]), sci(round.alpha0[i])).expect("write to string");
            }
            println!("round {}  scatter {}", r + 1, sci(round.scatter));
        }
        run.write("rounds.csv", &csv)?;
        let last = hist.last().expect("at least one round");
        for (i, &n) in ns.iter().enumerate() {
            let c = coverage_at(n, xi, kind, bins, &grid, last.alpha0[i])?;
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c.len() as f64;
            table.entries.push(AlphaEntry {
                total: n,
                zone: 0,
                alpha0: last.alpha0[i],
                objective: mismatch_of(xi, &c),
                c_mean: mean,
                c_var: var,
                flags: OptFlags::default(),
            });
        }
    }
    table.write_csv(&run.artifact("alpha_table.csv"))?;
    if zones == 1 && ns.len() >= 3 {
        let pts: Vec<(f64, f64)> = table.entries.iter().map(|e| (e.total as f64, e.alpha0)).collect();
        match fit_exponential(&pts, ExpFitMode::TwoParam) {
            Ok(fit) => {
                println!("exp fit  k {}  B0 {}  rms {}", sci(fit.k), sci(fit.b0), sci(fit.rms_residual));
                fit.write_json(&run.artifact("expfit.json"))?;
            }
            Err(e) => eprintln!("propcal: exponential fit skipped: {e}"),
        }
    }
    Ok(run)
}

#[derive(Debug, Args)]
pub struct SmoothArgs {
    /// CSV with a `y` column and optionally an `x` column.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub l_min: Option<usize>,
    #[arg(long)]
    pub l_max: Option<usize>,
    #[arg(long)]
    pub w_t: Option<f64>,
    /// student or gaussian.
    #[arg(long)]
    pub tail: Option<String>,
    /// Drop the 1/sqrt(L) length weighting.
    #[arg(long)]
    pub no_length_adjust: bool,
    #[arg(long)]
    pub cycles: Option<u32>,
}

fn read_series(path: &Path) -> Res<(Option<Vec<f64>>, Vec<f64>)> {
    let perr = |line: u64, detail: String| CliError::Core(propcal::Error::Parse { path: path.into(), line, detail });
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::Core(propcal::Error::Io { path: path.into(), source: io }),
        k => perr(1, format!("{k:?}")),
    })?;
    let headers = r.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let yi = match (col("y"), headers.len()) {
        (Some(i), _) => i,
        (None, 1) => 0,
        _ => return Err(perr(1, "expected a `y` column".into())),
    };
    let xi = col("x");
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| perr(line, e.to_string()))?;
        let num = |k: usize| -> Res<f64> {
            let f = rec.get(k).ok_or_else(|| perr(line, "missing field".into()))?;
            f.trim().parse::<f64>().map_err(|e| perr(line, format!("'{f}': {e}")))
        };
        ys.push(num(yi)?);
        if let Some(k) = xi {
            xs.push(num(k)?);
        }
    }
    Ok((xi.map(|_| xs), ys))
}

fn smooth(a: &SmoothArgs, s: &mut Settings, out: &Path) -> Res<RunDir> {
    let input = path_opt(s, "input", &a.input)?.ok_or_else(|| CliError::Usage("--input is required".into()))?;
    let d = SmoothConfig::default();
    let tail = match s.pick("tail", a.tail.clone(), "student".to_string())?.as_str() {
        "student" => TailModel::StudentEquivalent,
        "gaussian" => TailModel::Gaussian,
        o => return Err(CliError::Usage(format!("unknown tail model '{o}' (student, gaussian)"))),
    };
    let cfg = SmoothConfig {
        l_min: s.pick("l_min", a.l_min, d.l_min)?,
        l_max: s.pick("l_max", a.l_max, d.l_max)?,
        w_t: s.pick("w_t", a.w_t, d.w_t)?,
        tail,
        length_adjust: if s.switch("no_length_adjust", a.no_length_adjust)? { LengthAdjust::None } else { LengthAdjust::InverseSqrtL },
        cycles: s.pick("cycles", a.cycles, d.cycles)?,
    };
    s.finish()?;
    let (x, y) = read_series(&input)?;
    let sm = smooth_xy(x.as_deref(), &y, &cfg)?;
    let mut csv = String::from("x,y,smoothed\n");
    for i in 0..y.len() {
        let xv = x.as_ref().map_or(i as f64, |x| x[i]);
        writeln!(csv, "{},{},{}", sci(xv), sci(y[i]), sci(sm[i])).expect("write to string");
    }
    let mut run = RunDir::create(out)?;
    run.write("smoothed.csv", &csv)?;
    Ok(run)
}

fn parse_pdfs(list: &str) -> Res<Vec<TrialPdf>> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in list.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(TrialPdf::parse(&cur).map_err(|e| CliError::Usage(e.to_string()))?);
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() {
        out.push(TrialPdf::parse(&cur).map_err(|e| CliError::Usage(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(CliError::Usage("no trial pdfs given".into()));
    }
    Ok(out)
}

fn pdf_list_string(pdfs: &[TrialPdf]) -> String {
    pdfs.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
}

/// Start estimator per N, given its kind and prerequisites.
fn start_resolver(kind: StartKind, alpha: AlphaSource, bins: u32, xi: f64) -> impl Fn(u64) -> propcal::Result<InitialEstimator> {
    move |n| {
        let set = match kind {
            StartKind::Discrete => Some(discrete_set(n, bins, xi, None).map_err(|e| match e {
                CliError::Core(c) => c,
                CliError::Usage(u) => propcal::Error::Config(u),
            })?),
            _ => None,
        };
        InitialEstimator::resolve(kind, n, Some(&alpha), set.as_ref())
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Monte Carlo repetitions per (pdf, N).
    #[arg(long)]
    pub trials: Option<u64>,
    /// Comma list, e.g. `std_normal,sawtooth,beta(3,15)`.
    #[arg(long)]
    pub pdfs: Option<String>,
    #[arg(long)]
    pub n_grid: Option<String>,
    /// Start estimator: multinomial_ros, optimized_b2 or discrete.
    #[arg(long)]
    pub estimator: Option<String>,
    #[arg(long)]
    pub alpha_table: Option<PathBuf>,
    #[arg(long)]
    pub alpha_fit: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<u32>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub l_min: Option<usize>,
    #[arg(long)]
    pub l_max: Option<usize>,
}

fn calibrate(a: &CalibrateArgs, s: &mut Settings, out: &Path, seed: u64, default_trials: u64) -> Res<RunDir> {
    let trials = s.pick("trials", a.trials, default_trials)?;
    let pdfs = parse_pdfs(&s.pick("pdfs", a.pdfs.clone(), pdf_list_string(&mc_lab::standard_suite()))?)?;
    let default_grid = CALIBRATION_GRID.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
    let grid = parse_n_grid(&s.pick("n_grid", a.n_grid.clone(), default_grid)?)?;
    let kind = StartKind::parse(&s.pick("estimator", a.estimator.clone(), "multinomial_ros".to_string())?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let xi = s.pick("xi", a.xi, 0.95)?;
    let bins = s.pick("bins", a.bins, 100u32)?;
    let alpha = alpha_source(s, &a.alpha_table, &a.alpha_fit, xi)?;
    let smooth_cfg = histogram_smoother(s, a.l_min, a.l_max)?;
    s.finish()?;
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let cfg = CalibrationConfig {
        pdfs,
        grid,
        ensemble: EnsembleConfig { bins, xi, trials, seed, smooth: true, smooth_cfg, model: SigmaModel::default() },
        ..CalibrationConfig::default()
    };
    let points = calibration_points(&cfg, start_resolver(kind, alpha, bins, xi))?;
    let art = calibrate_points(&points, &cfg, kind.name())?;
    println!("A0 {}  B0 {}  iterations {}", sci(art.a0), sci(art.b0), art.iterations);
    let p = art.psi_params;
    println!(
        "psi c0 {} c1 {} c2 {} c3 {}{}",
        sci(p.c0),
        sci(p.c1),
        sci(p.c2),
        sci(p.c3),
        if art.psi_fallback { "  (fit rejected, default constants kept)" } else { "" }
    );
    let mut run = RunDir::create(out)?;
    art.write_json(&run.artifact("calibration.json"))?;
    let mut csv = String::from("N,mu,sigma,rho99,median,bins\n");
    for r in &art.rho {
        writeln!(csv, "{},{},{},{},{},{}", r.total, sci(r.mu), sci(r.sigma), sci(r.rho99), sci(r.median), r.bins).expect("write to string");
    }
    run.write("rho.csv", &csv)?;
    let pts = serde_json::to_string(&points).expect("points serialize");
    run.write("calibration_points.json", &pts)?;
    Ok(run)
}

#[derive(Debug, Args)]
pub struct McArgs {
    /// Comma list, e.g. `std_normal,beta(3,15)`.
    #[arg(long)]
    pub pdfs: Option<String>,
    #[arg(long)]
    pub n_grid: Option<String>,
    /// Comma list of start estimators.
    #[arg(long)]
    pub estimators: Option<String>,
    #[arg(long)]
    pub trials: Option<u64>,
    #[arg(long)]
    pub bins: Option<u32>,
    #[arg(long)]
    pub xi: Option<f64>,
    /// Raw stage only.
    #[arg(long)]
    pub no_smooth: bool,
    /// Calibration artifact for the scaled-stage sigmas.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub alpha_table: Option<PathBuf>,
    #[arg(long)]
    pub alpha_fit: Option<PathBuf>,
    #[arg(long)]
    pub l_min: Option<usize>,
    #[arg(long)]
    pub l_max: Option<usize>,
}

fn file_tag(pdf: &TrialPdf) -> String {
    pdf.to_string().chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect::<String>().trim_end_matches('_').to_string()
}

fn mc(a: &McArgs, s: &mut Settings, out: &Path, seed: u64, default_trials: u64) -> Res<RunDir> {
    let pdfs = parse_pdfs(&s.pick("pdfs", a.pdfs.clone(), "std_normal".to_string())?)?;
    let grid = parse_n_grid(&s.pick("n_grid", a.n_grid.clone(), "40".to_string())?)?;
    let kinds = s
        .pick("estimators", a.estimators.clone(), "multinomial_ros".to_string())?
        .split(',')
        .map(|k| StartKind::parse(k.trim()).map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Res<Vec<_>>>()?;
    let trials = s.pick("trials", a.trials, default_trials)?;
    let bins = s.pick("bins", a.bins, 100u32)?;
    let xi = s.pick("xi", a.xi, 0.95)?;
    let smooth = !s.switch("no_smooth", a.no_smooth)?;
    let model = match path_opt(s, "calibration", &a.calibration)? {
        Some(p) => CalibrationArtifact::read_json(&p)?.model()?,
        None => SigmaModel::default(),
    };
    let alpha = alpha_source(s, &a.alpha_table, &a.alpha_fit, xi)?;
    let smooth_cfg = histogram_smoother(s, a.l_min, a.l_max)?;
    s.finish()?;
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let cfg = EnsembleConfig { bins, xi, trials, seed, smooth, smooth_cfg, model };
    let mut run = RunDir::create(out)?;
    let mut summary = String::from("pdf,N,estimator,stage,snr_mean,snr_sd,snr_infinite,mean_coverage\n");
    for pdf in &pdfs {
        let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
        for &kind in &kinds {
            let resolve = start_resolver(kind, alpha.clone(), bins, xi);
            let mut raw_col = Vec::with_capacity(grid.len());
            let mut scaled_col = Vec::with_capacity(grid.len());
            for &n in &grid {
                let res = run_ensemble(pdf, n, &resolve(n)?, &cfg)?;
                for stage in [Stage::Raw, Stage::Scaled] {
                    let Some(st) = res.stage(stage) else { continue };
                    let cov = st.coverage.iter().sum::<f64>() / st.coverage.len() as f64;
                    writeln!(
                        summary,
                        "{},{},{},{},{},{},{},{}",
                        pdf,
                        n,
                        kind.name(),
                        stage.name(),
                        sci(st.snr_mean),
                        sci(st.snr_var.sqrt()),
                        st.snr_infinite,
                        sci(cov)
                    )
                    .expect("write to string");
                    println!("{pdf} N={n} {} {}: S/N {}", kind.name(), stage.name(), sci(st.snr_mean));
                    run.write(&format!("bins_{}_N{}_{}_{}.csv", file_tag(pdf), n, kind.name(), stage.name()), &res.bins_csv(stage)?)?;
                    match stage {
                        Stage::Raw => raw_col.push(st.snr_mean),
                        _ => scaled_col.push(st.snr_mean),
                    }
                }
            }
            columns.push((format!("{}_raw", kind.name()), raw_col));
            if smooth {
                columns.push((format!("{}_scaled", kind.name()), scaled_col));
            }
        }
        if grid.len() >= 2 {
            let table = table_s1(&pdf.to_string(), &grid, &columns)?;
            run.write(&format!("table_s1_{}.csv", file_tag(pdf)), &table.to_csv())?;
        }
    }
    run.write("snr.csv", &summary)?;
    Ok(run)
}

#[derive(Debug, Args)]
pub struct DiscreteArgs {
    /// Sample size N.
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub bins: Option<u32>,
    #[arg(long)]
    pub xi: Option<f64>,
    /// uniform_width or combinatorial (default: uniform_width for 2 bins).
    #[arg(long)]
    pub prior: Option<String>,
}

fn discrete_table(a: &DiscreteArgs, s: &mut Settings, out: &Path) -> Res<RunDir> {
    let n = s.pick_opt("n", a.n)?.ok_or_else(|| CliError::Usage("--n is required".into()))?;
    let bins = s.pick("bins", a.bins, 2u32)?;
    let xi = s.pick("xi", a.xi, 0.95)?;
    let prior = s
        .pick_opt("prior", a.prior.clone())?
        .map(|p| DiscretePrior::parse(&p).map_err(|e| CliError::Usage(e.to_string())))
        .transpose()?;
    s.finish()?;
    let set = discrete_set(n, bins, xi, prior)?;
    let mut csv = String::from("j,theta,phi_lo,phi_hi,pi,sigma,lo,hi\n");
    for j in 0..=n as usize {
        let est = discrete_est::discrete_point_estimate(j as u64, &set)?;
        let iv = discrete_est::discrete_interval(&discrete_est::build_posterior(j as u64, &set)?, xi)?;
        println!("theta[{j}] = {}", sci(set.theta[j]));
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            j,
            sci(set.theta[j]),
            sci(set.phi[j]),
            sci(set.phi[j + 1]),
            sci(set.pi[j]),
            sci(est.sigma_hat),
            sci(iv.lo),
            sci(iv.hi)
        )
        .expect("write to string");
    }
    let mut run = RunDir::create(out)?;
    run.write("discrete_table.csv", &csv)?;
    Ok(run)
}
