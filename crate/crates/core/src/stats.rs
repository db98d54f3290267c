//! Summary statistics over `f64` slices, thin wrappers around `statrs`.

use statrs::statistics::{Data, OrderStatistics, Statistics};

pub fn mean(xs: &[f64]) -> f64 {
    xs.mean()
}

/// Population standard deviation (divides by `n`).
pub fn population_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.population_std_dev()
}

/// Empirical quantile, `q` in `[0, 1]`. NaN for empty input.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    Data::new(xs.to_vec()).quantile(q.clamp(0.0, 1.0))
}

pub fn percentile(xs: &[f64], p: f64) -> f64 {
    quantile(xs, p / 100.0)
}

/// Pearson correlation; zero when either side is constant.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() != ys.len() || xs.len() < 2 {
        return 0.0;
    }
    let (sx, sy) = (xs.std_dev(), ys.std_dev());
    if sx == 0.0 || sy == 0.0 || !sx.is_finite() || !sy.is_finite() {
        return 0.0;
    }
    xs.covariance(ys) / (sx * sy)
}

/// Mean and (2.5%, 97.5%) percentile interval.
pub fn mean_ci(xs: &[f64]) -> (f64, f64, f64) {
    (mean(xs), percentile(xs, 2.5), percentile(xs, 97.5))
}
