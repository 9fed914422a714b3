pub mod coverage;
pub mod discrete_est;
pub mod error;
pub mod goofy_loess;
pub mod mc_lab;
pub mod prior_opt;
pub mod proportions;
pub mod sigma_cal;
pub mod smooth_pipeline;
pub mod special;

pub use error::{Error, Result};

pub use coverage::{exact_coverage, mc_coverage, CoverageCurve, IntervalTable, Sweep};
pub use discrete_est::{AdmissibleSet, DiscretePrior};
pub use goofy_loess::{smooth, SmoothConfig};
pub use mc_lab::{EnsembleConfig, EnsembleResult, TrialPdf};
pub use prior_opt::{AlphaTable, ExpFit};
pub use proportions::{Estimator, Interval, PointEstimate, PosteriorKind, PosteriorSpec, PriorFamily, PriorSpec};
pub use sigma_cal::CalibrationArtifact;
pub use smooth_pipeline::{EstimateCurve, Histogram, InitialEstimator, PsiParams, SigmaModel, Stage, StartKind};
