//! Batch statistics for correlated time series, autocovariance estimation,
//! Green-Kubo time integration with a noise-floor truncation rule, and small
//! least-squares helpers shared by the estimators.

use crate::{Error, Result};

/// Streaming mean/variance accumulator (Welford).
#[derive(Debug, Clone, Default)]
pub struct OnlineStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl OnlineStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero until two samples are seen.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean under independent sampling.
    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Mean and standard error of `values` treated as independent replicates.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let mut acc = OnlineStats::new();
    for &v in values {
        acc.push(v);
    }
    (acc.mean(), acc.stderr())
}

/// Batch-means estimate for a correlated series: the series is cut into
/// `n_batches` contiguous blocks, and the spread of block means estimates the
/// error of the global mean.
pub fn batch_means(series: &[f64], n_batches: usize) -> Result<(f64, f64)> {
    if n_batches < 2 || series.len() < 2 * n_batches {
        return Err(Error::InsufficientData(format!(
            "series of length {} cannot form {} batches",
            series.len(),
            n_batches
        )));
    }
    let per = series.len() / n_batches;
    let mut blocks = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let chunk = &series[b * per..(b + 1) * per];
        blocks.push(chunk.iter().sum::<f64>() / per as f64);
    }
    Ok(mean_stderr(&blocks))
}

/// One point of an autocovariance curve.
#[derive(Debug, Clone, Copy)]
pub struct AutoCovPoint {
    pub lag: usize,
    pub value: f64,
    pub stderr: f64,
}

/// Autocovariance of `series` at the given lags with batch-mean error bars.
///
/// When `known_mean` is provided it is subtracted instead of the empirical
/// mean; for observables with an exactly known stationary mean this avoids the
/// O(1/T) bias of self-centering. Per-lag pairs are restricted to lie inside a
/// batch so the block estimates stay independent.
pub fn autocovariance(
    series: &[f64],
    lags: &[usize],
    n_batches: usize,
    known_mean: Option<f64>,
) -> Result<Vec<AutoCovPoint>> {
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    let per = series.len() / n_batches.max(1);
    if n_batches < 2 || per < 2 * max_lag.max(1) {
        return Err(Error::InsufficientData(format!(
            "series of length {} too short for {} batches at max lag {}",
            series.len(),
            n_batches,
            max_lag
        )));
    }
    let mean = known_mean.unwrap_or_else(|| series.iter().sum::<f64>() / series.len() as f64);
    let mut out = Vec::with_capacity(lags.len());
    let mut block_vals = vec![0.0; n_batches];
    for &lag in lags {
        for (b, bv) in block_vals.iter_mut().enumerate() {
            let chunk = &series[b * per..(b + 1) * per];
            let pairs = chunk.len() - lag;
            let mut s = 0.0;
            for t in 0..pairs {
                s += (chunk[t] - mean) * (chunk[t + lag] - mean);
            }
            *bv = s / pairs as f64;
        }
        let (value, stderr) = mean_stderr(&block_vals);
        out.push(AutoCovPoint { lag, value, stderr });
    }
    Ok(out)
}

/// Result of integrating an autocovariance curve over time.
#[derive(Debug, Clone)]
pub struct GkIntegral {
    /// Trapezoid integral up to the truncation point plus the fitted tail.
    pub value: f64,
    /// Time at which the curve was truncated.
    pub truncation_time: f64,
    /// Contribution of the fitted exponential tail.
    pub tail: f64,
    /// False when the curve never sank below its noise floor.
    pub decayed: bool,
}

/// Integrates a sampled covariance curve `c(tau)` with noise floor `sigma(tau)`.
///
/// Truncation rule: stop at the first lag where three consecutive points fall
/// below one standard error; beyond that the curve is noise. A single
/// exponential fitted to the last positive stretch before the cut estimates
/// the remaining tail mass. `taus` must be increasing and start at 0.
pub fn integrate_autocov(taus: &[f64], c: &[f64], sigma: &[f64]) -> Result<GkIntegral> {
    if taus.len() != c.len() || taus.len() != sigma.len() || taus.len() < 4 {
        return Err(Error::InsufficientData(
            "covariance curve needs at least 4 matching points".into(),
        ));
    }
    let n = taus.len();
    let mut cut = n - 1;
    let mut decayed = false;
    let mut below = 0usize;
    for i in 1..n {
        if c[i].abs() < sigma[i] {
            below += 1;
            if below >= 3 {
                cut = i - 2;
                decayed = true;
                break;
            }
        } else {
            below = 0;
        }
    }
    let mut value = 0.0;
    for i in 1..=cut {
        value += 0.5 * (c[i] + c[i - 1]) * (taus[i] - taus[i - 1]);
    }
    // Tail: fit ln c over the trailing positive stretch before the cut.
    let fit_lo = cut.saturating_sub(cut.max(6) / 3).max(1);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in fit_lo..=cut {
        if c[i] > 0.0 {
            xs.push(taus[i]);
            ys.push(c[i].ln());
        }
    }
    let mut tail = 0.0;
    if xs.len() >= 3 {
        if let Ok(fit) = linear_fit(&xs, &ys, None) {
            let rate = -fit.slope;
            if rate > 0.0 {
                let c_at_cut = (fit.intercept + fit.slope * taus[cut]).exp();
                tail = c_at_cut / rate;
            }
        }
    }
    Ok(GkIntegral {
        value: value + tail,
        truncation_time: taus[cut],
        tail,
        decayed,
    })
}

/// Ordinary or weighted least squares for `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_stderr: f64,
    pub slope_stderr: f64,
    /// Chi-square per degree of freedom when weights were supplied.
    pub chi2_dof: f64,
}

/// Fits a line by (weighted) least squares. `weights`, when given, are
/// 1/sigma_i^2; parameter errors then come from the exact covariance. Without
/// weights the residual variance calibrates the errors.
pub fn linear_fit(x: &[f64], y: &[f64], weights: Option<&[f64]>) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 points for a line".into()));
    }
    let n = x.len();
    let w_of = |i: usize| weights.map_or(1.0, |w| w[i]);
    let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let w = w_of(i);
        sw += w;
        swx += w * x[i];
        swy += w * y[i];
        swxx += w * x[i] * x[i];
        swxy += w * x[i] * y[i];
    }
    let det = sw * swxx - swx * swx;
    if det.abs() < 1e-300 || !det.is_finite() {
        return Err(Error::Numerical("degenerate design in linear fit".into()));
    }
    let slope = (sw * swxy - swx * swy) / det;
    let intercept = (swxx * swy - swx * swxy) / det;
    let mut chi2 = 0.0;
    for i in 0..n {
        let r = y[i] - intercept - slope * x[i];
        chi2 += w_of(i) * r * r;
    }
    let dof = (n as f64 - 2.0).max(1.0);
    let chi2_dof = chi2 / dof;
    // Without supplied weights, scale the covariance by the residual variance.
    let scale = if weights.is_some() { 1.0 } else { chi2_dof };
    let var_slope = scale * sw / det;
    let var_intercept = scale * swxx / det;
    Ok(LinearFit {
        intercept,
        slope,
        intercept_stderr: var_intercept.max(0.0).sqrt(),
        slope_stderr: var_slope.max(0.0).sqrt(),
        chi2_dof,
    })
}

/// Jackknife mean and standard error of a statistic computed on replicas:
/// `f` maps a set of retained replica indices to the statistic.
pub fn jackknife<F: Fn(&[usize]) -> f64>(n_replicas: usize, f: F) -> (f64, f64) {
    let all: Vec<usize> = (0..n_replicas).collect();
    let full = f(&all);
    if n_replicas < 2 {
        return (full, f64::INFINITY);
    }
    let mut loo = Vec::with_capacity(n_replicas);
    for skip in 0..n_replicas {
        let kept: Vec<usize> = (0..n_replicas).filter(|&i| i != skip).collect();
        loo.push(f(&kept));
    }
    let m = loo.iter().sum::<f64>() / n_replicas as f64;
    let var = loo.iter().map(|v| (v - m) * (v - m)).sum::<f64>() * (n_replicas - 1) as f64
        / n_replicas as f64;
    (full, var.sqrt())
}
