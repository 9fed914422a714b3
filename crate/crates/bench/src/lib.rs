//! Fixtures shared by the benchmarks.

use propcal::mc_lab::{geometry, sample_histogram, trial_rng, Binner};
use propcal::smooth_pipeline::Histogram;
use propcal::TrialPdf;

/// One reproducible 100-bin histogram of `total` standard-normal draws.
pub fn normal_histogram(total: u64, seed: u64) -> Histogram {
    let pdf = TrialPdf::StdNormal;
    let binner = Binner::new(&pdf, geometry(&pdf, 100).expect("valid geometry")).expect("valid binner");
    let mut rng = trial_rng(seed, &pdf, total, 0);
    sample_histogram(&binner, total, &mut rng)
}

/// Per-bin fractions of [`normal_histogram`].
pub fn normal_fractions(total: u64, seed: u64) -> Vec<f64> {
    let h = normal_histogram(total, seed);
    h.counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_reproducible() {
        assert_eq!(normal_histogram(400, 3), normal_histogram(400, 3));
        let f = normal_fractions(400, 3);
        assert_eq!(f.len(), 100);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
