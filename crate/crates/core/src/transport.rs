//! Transport-coefficient estimators and the tabulated coefficient itself.
//!
//! Two independent routes to the same number live here. The variational
//! estimator minimizes a quadratic form over a small basis of local functions
//! sampled from the product measure; the time-correlation route integrates
//! covariance curves of window sums along the conservative window dynamics.
//! Their agreement, together with the exact sandwich
//! 1/E[1/a] <= a_hat <= E[a], is the main cross-validation of the whole
//! numerical stack.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::gibbs::{replica_rng, CanonicalSpec, GrandCanonical, McEstimate};
use crate::lattice::ConservedPair;
use crate::local_fn::{
    bond_current, stencil_grad, stencil_grad_sum, LocalFn, Observable, SummedObservable,
    TanhPair, TanhSite, TwiceLocalFn,
};
use crate::mobility::Mobility;
use crate::sim::{box_observable_series, BoxStepper};
use crate::stats::{integrate_autocov, jackknife, linear_fit, LinearFit, OnlineStats};
use crate::{fnv1a64, Error, Result};

const SEED_STRIDE: u64 = 0x9e3779b97f4a7c15;

/// Derives an unrelated seed for the i-th independent subtask.
pub fn subtask_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_add(i.wrapping_mul(SEED_STRIDE))
}

// ---------------------------------------------------------------------------
// Variational estimator
// ---------------------------------------------------------------------------

/// Family of local trial functions for the variational minimization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BasisSpec {
    /// No correction: the estimator degenerates to the plain mean of a.
    Empty,
    /// tanh of single sites at offsets -s..=s plus tanh products on adjacent
    /// pairs starting at -s..=s-1; 4s+1 functions.
    Tanh { s: usize },
}

impl BasisSpec {
    pub fn default_tanh() -> Self {
        BasisSpec::Tanh { s: 2 }
    }

    pub fn id(&self) -> String {
        match self {
            BasisSpec::Empty => "none".into(),
            BasisSpec::Tanh { s } => format!("tanh:s={s}"),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            BasisSpec::Empty => 0,
            BasisSpec::Tanh { s } => 4 * s + 1,
        }
    }

    /// Largest window half-width any member reads.
    pub fn span(&self) -> usize {
        match self {
            BasisSpec::Empty => 0,
            BasisSpec::Tanh { s } => *s,
        }
    }

    pub fn functions(&self) -> Vec<Box<dyn TwiceLocalFn>> {
        match self {
            BasisSpec::Empty => Vec::new(),
            BasisSpec::Tanh { s } => {
                let s = *s as i64;
                let mut out: Vec<Box<dyn TwiceLocalFn>> = Vec::new();
                for j in -s..=s {
                    out.push(Box::new(TanhSite { offset: j }));
                }
                for j in -s..s {
                    out.push(Box::new(TanhPair { offset: j }));
                }
                out
            }
        }
    }
}

/// Output of the variational minimization.
#[derive(Debug, Clone)]
pub struct AHatEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Minimizing coefficients, one per basis function.
    pub coeffs: Vec<f64>,
    /// Condition number of the regularized Gram matrix.
    pub gram_cond: f64,
    pub n_samples: u64,
}

struct MomentBlock {
    n: u64,
    q0: f64,
    b: Vec<f64>,
    m: Vec<f64>,
}

/// Accumulates (a0, a0 xi_k, a0 xi_k xi_m) over `n` product-measure samples.
fn sample_moments(
    mobility: &Mobility,
    alpha: f64,
    funcs: &[Box<dyn TwiceLocalFn>],
    n: u64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<MomentBlock> {
    let k = funcs.len();
    let span = funcs.iter().map(|f| f.span()).max().unwrap_or(0);
    // stencil_grad_sum reads sites up to 2 span + 1 from the center bond.
    let hw = (2 * span + 1).max(2);
    let gc = GrandCanonical { alpha };
    let mut xi = vec![0.0; k];
    let mut blk =
        MomentBlock { n: 0, q0: 0.0, b: vec![0.0; k], m: vec![0.0; k * k] };
    for step in 0..n {
        let cfg = gc.sample_window(rng, hw)?;
        let win = [cfg.get(-1)?, cfg.get(0)?, cfg.get(1)?];
        let a0 = mobility.eval(&win);
        for (j, f) in funcs.iter().enumerate() {
            xi[j] = stencil_grad_sum(f.as_ref(), &cfg, 0)?;
        }
        if !a0.is_finite() {
            return Err(Error::NonFinite { step });
        }
        blk.q0 += a0;
        for j in 0..k {
            blk.b[j] += a0 * xi[j];
            for l in j..k {
                blk.m[j * k + l] += a0 * xi[j] * xi[l];
            }
        }
        blk.n += 1;
    }
    // Mirror the upper triangle.
    for j in 0..k {
        for l in 0..j {
            blk.m[j * k + l] = blk.m[l * k + j];
        }
    }
    Ok(blk)
}

/// Variational transport coefficient at chemical potential `alpha`:
/// minimizes E[a0 (1 + sum_k c_k xi_k)^2] over the coefficient vector, where
/// xi_k is the bond stencil applied to the shift sum of the k-th basis
/// function. The moments are pooled over `n_batches` independent batches; the
/// error bar is the spread of the per-batch quadratic form at the frozen
/// minimizer.
pub fn estimate_a_hat(
    mobility: &Mobility,
    alpha: f64,
    basis: &BasisSpec,
    n_samples: u64,
    n_batches: usize,
    seed: u64,
) -> Result<AHatEstimate> {
    if n_batches < 2 {
        return Err(Error::InvalidParameter("need at least 2 batches".into()));
    }
    let per = n_samples / n_batches as u64;
    if per < 16 {
        return Err(Error::InsufficientData(format!(
            "{n_samples} samples over {n_batches} batches leaves fewer than 16 each"
        )));
    }
    let k = basis.size();
    let blocks: Vec<MomentBlock> = (0..n_batches)
        .into_par_iter()
        .map(|r| {
            let funcs = basis.functions();
            let mut rng = replica_rng(seed, r as u64);
            sample_moments(mobility, alpha, &funcs, per, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let n_total: u64 = blocks.iter().map(|b| b.n).sum();
    let mut b = DVector::zeros(k);
    let mut m = DMatrix::zeros(k, k);
    for blk in &blocks {
        for j in 0..k {
            b[j] += blk.b[j];
            for l in 0..k {
                m[(j, l)] += blk.m[j * k + l];
            }
        }
    }
    b /= n_total as f64;
    m /= n_total as f64;

    let (coeffs, gram_cond) = if k == 0 {
        (DVector::zeros(0), 1.0)
    } else {
        let ridge = 1e-8 * m.trace() / k as f64;
        let reg = &m + DMatrix::identity(k, k) * ridge;
        let eig = reg.clone().symmetric_eigen().eigenvalues;
        let emax = eig.iter().cloned().fold(f64::MIN, f64::max);
        let emin = eig.iter().cloned().fold(f64::MAX, f64::min);
        let cond = emax / emin.max(f64::MIN_POSITIVE);
        let chol = reg.cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "basis Gram matrix not positive definite (cond ~ {cond:.3e})"
            ))
        })?;
        (-chol.solve(&b), cond)
    };

    // Per-batch value of the quadratic form at the frozen minimizer.
    let mut acc = OnlineStats::new();
    for blk in &blocks {
        let nb = blk.n as f64;
        let mut v = blk.q0 / nb;
        for j in 0..k {
            v += 2.0 * coeffs[j] * blk.b[j] / nb;
            for l in 0..k {
                v += coeffs[j] * coeffs[l] * blk.m[j * k + l] / nb;
            }
        }
        acc.push(v);
    }
    Ok(AHatEstimate {
        value: acc.mean(),
        stderr: acc.stderr(),
        coeffs: coeffs.iter().cloned().collect(),
        gram_cond,
        n_samples: n_total,
    })
}

/// Exact two-sided bracket 1/E[1/a] <= a_hat <= E[a], by tensor quadrature.
pub fn a_hat_bounds(mobility: &Mobility, alpha: f64, order: usize) -> Result<(f64, f64)> {
    let (mean, inv_mean) = crate::quadrature::mobility_moments(mobility, alpha, order)?;
    Ok((1.0 / inv_mean, mean))
}

/// The same bracket by Monte Carlo, for cross-checking the quadrature.
pub fn a_hat_bounds_mc(
    mobility: &Mobility,
    alpha: f64,
    n_samples: u64,
    seed: u64,
) -> Result<(McEstimate, McEstimate)> {
    let gc = GrandCanonical { alpha };
    let mut rng = replica_rng(seed, 0);
    let mut mean = OnlineStats::new();
    let mut inv = OnlineStats::new();
    for _ in 0..n_samples {
        let cfg = gc.sample_window(&mut rng, 2)?;
        let a = mobility.eval(&[cfg.get(-1)?, cfg.get(0)?, cfg.get(1)?]);
        mean.push(a);
        inv.push(1.0 / a);
    }
    Ok((
        McEstimate { mean: mean.mean(), stderr: mean.stderr(), n: mean.n() },
        McEstimate { mean: inv.mean(), stderr: inv.stderr(), n: inv.n() },
    ))
}

/// Fresh-sample consistency probe of a variational output.
#[derive(Debug, Clone)]
pub struct FdResidual {
    /// 4 * (fresh quadratic form at the frozen coefficients - fitted value).
    pub value: f64,
    pub stderr: f64,
    /// True when the residual is significantly negative, which would mean the
    /// fit beat its own population minimum: overfitting or a bookkeeping bug.
    pub suspicious: bool,
}

/// Re-evaluates the minimized quadratic form on fresh samples at the frozen
/// coefficients and reports the (scaled) difference to the fitted value. In
/// expectation the residual is nonnegative and tends to 0 as the fit
/// converges; with an empty basis it equals 4 (E[a] - a_hat).
pub fn fd_residual(
    mobility: &Mobility,
    alpha: f64,
    basis: &BasisSpec,
    est: &AHatEstimate,
    n_samples: u64,
    seed: u64,
) -> Result<FdResidual> {
    let funcs = basis.functions();
    if funcs.len() != est.coeffs.len() {
        return Err(Error::InvalidParameter(format!(
            "basis has {} functions but the estimate carries {} coefficients",
            funcs.len(),
            est.coeffs.len()
        )));
    }
    let span = basis.span();
    let hw = (2 * span + 1).max(2);
    let gc = GrandCanonical { alpha };
    let mut rng = replica_rng(seed, 0);
    let mut acc = OnlineStats::new();
    for _ in 0..n_samples {
        let cfg = gc.sample_window(&mut rng, hw)?;
        let a0 = mobility.eval(&[cfg.get(-1)?, cfg.get(0)?, cfg.get(1)?]);
        let mut u = 0.0;
        for (c, f) in est.coeffs.iter().zip(&funcs) {
            u += c * stencil_grad_sum(f.as_ref(), &cfg, 0)?;
        }
        acc.push(a0 * (1.0 + u) * (1.0 + u));
    }
    let value = 4.0 * (acc.mean() - est.value);
    let stderr = 4.0 * acc.stderr().hypot(est.stderr);
    Ok(FdResidual { value, stderr, suspicious: value < -3.0 * stderr })
}

/// Paired probe of the summation-by-parts identity E[w0 f] = E[a0 X0 f] in
/// the product measure: returns the per-sample difference, which should be
/// zero to within its error bar for any local f.
pub fn ibp_gap(
    mobility: &Mobility,
    alpha: f64,
    f: &dyn LocalFn,
    n_samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    let hw = f.span().max(2);
    let gc = GrandCanonical { alpha };
    let mut rng = replica_rng(seed, 0);
    crate::gibbs::mc_expectation(
        n_samples,
        move || gc.sample_window(&mut rng, hw),
        |cfg| {
            let w0 = bond_current(cfg, mobility, 0)?;
            let a0 = mobility.eval(&[cfg.get(-1)?, cfg.get(0)?, cfg.get(1)?]);
            Ok(w0 * f.eval(cfg, 0)? - a0 * stencil_grad(f, cfg, 0, 0)?)
        },
    )
}

// ---------------------------------------------------------------------------
// Time-correlation (semi-norm) estimators
// ---------------------------------------------------------------------------

/// Statistics half-width: the window sums run over shifts |j| <= l1(l), and
/// the remaining sqrt(l) sites per side buffer the boundary.
pub fn l1_of(l: usize) -> usize {
    let lf = l as f64;
    (lf - lf.sqrt()).floor().max(0.0) as usize
}

/// Run plan for one covariance measurement.
#[derive(Debug, Clone)]
pub struct GkRunParams {
    pub n_replicas: usize,
    /// Trajectory length per replica, in intrinsic time units.
    pub horizon: f64,
    /// Sampling interval for the recorded series.
    pub record_dt: f64,
    /// Largest lag at which the covariance is evaluated.
    pub lag_horizon: f64,
    /// Lags up to this horizon keep the full `record_dt` resolution; beyond
    /// it the lag grid thins so the curve stays cheap to pool. Zero or
    /// anything >= `lag_horizon` keeps every lag dense.
    pub dense_lag_horizon: f64,
    /// Step size as a fraction of the explicit-stability limit, in (0, 1].
    pub dt_fraction: f64,
    /// Center every covariance with the pooled stationary means instead of
    /// demanding exactly centered inputs. Needed for observables whose
    /// discrete-time stationary mean is offset at order dt (sign-even
    /// functions of the slopes, e.g. generator images of pair functions);
    /// only meaningful on a fixed fiber, where the offset is a constant.
    pub subtract_mean: bool,
    pub seed: u64,
}

/// Cap on the number of evaluated lags per curve; the coarse part of the
/// two-tier lag grid thins to stay under it.
const MAX_LAGS: usize = 1600;

impl GkRunParams {
    fn validate(&self) -> Result<()> {
        if self.n_replicas < 4 {
            return Err(Error::InvalidParameter(
                "need at least 4 replicas for resampled error bars".into(),
            ));
        }
        if !(self.dt_fraction > 0.0 && self.dt_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "dt fraction {} outside (0, 1]",
                self.dt_fraction
            )));
        }
        if self.record_dt <= 0.0 || self.horizon <= 0.0 || self.lag_horizon <= 0.0 {
            return Err(Error::InvalidParameter(
                "horizon, record interval and lag horizon must be positive".into(),
            ));
        }
        if self.horizon < 4.0 * self.lag_horizon {
            return Err(Error::InvalidParameter(
                "horizon must cover the lag horizon at least 4 times over".into(),
            ));
        }
        Ok(())
    }
}

/// Law of the conserved pair a replica's window is conditioned on.
#[derive(Debug, Clone, Copy)]
pub enum FiberLaw {
    /// Every replica runs on this exact fiber.
    Fixed(ConservedPair),
    /// Each replica draws its pair from the product-measure fluctuation law
    /// of a window of half-width k = 2l centered on alpha: block mean
    /// N(alpha, 1/(2k+1)), linear mean N(0, (2k+1)/(3k(k+1))). The outer
    /// fiber average is then taken by the replica average itself.
    Fluctuating,
}

impl FiberLaw {
    pub fn centered() -> Self {
        FiberLaw::Fixed(ConservedPair { block_mean: 0.0, linear_mean: 0.0 })
    }

    fn draw(&self, alpha: f64, l: usize, rng: &mut impl rand::Rng) -> ConservedPair {
        match self {
            FiberLaw::Fixed(pair) => *pair,
            FiberLaw::Fluctuating => {
                let k = 2.0 * l as f64;
                let sd1 = (2.0 * k + 1.0).recip().sqrt();
                let sd2 = ((2.0 * k + 1.0) / (3.0 * k * (k + 1.0))).sqrt();
                let z1: f64 = rng.sample(rand_distr::StandardNormal);
                let z2: f64 = rng.sample(rand_distr::StandardNormal);
                ConservedPair {
                    block_mean: alpha + sd1 * z1,
                    linear_mean: sd2 * z2,
                }
            }
        }
    }
}

/// Pooled symmetric cross-covariance curves from replicated stationary runs.
pub struct CurveSet {
    pub taus: Vec<f64>,
    /// pooled[p][lag]: replica-mean curve for pair p.
    pub pooled: Vec<Vec<f64>>,
    /// Per-lag standard error from the replica spread.
    pub sigma: Vec<Vec<f64>>,
    /// per_replica[r][p][lag]: raw product curves, never mean-subtracted.
    pub per_replica: Vec<Vec<Vec<f64>>>,
    /// per_replica_mean[r][k]: time mean of observable k on replica r.
    pub per_replica_mean: Vec<Vec<f64>>,
    /// Grand mean and its error, one per observable: a centering check.
    pub series_mean: Vec<(f64, f64)>,
    pub max_drift: f64,
}

/// Runs `n_replicas` stationary window trajectories (each started from an
/// exact draw of the centered conditioned measure) and pools the symmetrized
/// lag covariances E[F(0) G(tau)] for each requested pair of observables.
/// Means are NOT subtracted: every observable must have zero stationary mean,
/// which is verified against the replica spread.
pub fn cross_covariance_mc(
    obs: &[&dyn Observable],
    pairs: &[(usize, usize)],
    mobility: &Mobility,
    alpha: f64,
    l: usize,
    fiber: FiberLaw,
    run: &GkRunParams,
) -> Result<CurveSet> {
    run.validate()?;
    for &(i, j) in pairs {
        if i >= obs.len() || j >= obs.len() {
            return Err(Error::InvalidParameter("pair index out of range".into()));
        }
    }
    let dt = run.dt_fraction * BoxStepper::stability_limit(mobility);
    let record_stride = ((run.record_dt / dt).round() as usize).max(1);
    let rec_dt = record_stride as f64 * dt;
    let n_steps = (run.horizon / dt).round() as u64;
    let n_lags = (run.lag_horizon / rec_dt).ceil() as usize;
    let n_records = 1 + (n_steps / record_stride as u64) as usize;
    if n_records < 2 * (n_lags + 1) || n_records < 8 {
        return Err(Error::InsufficientData(format!(
            "{n_records} records cannot support {n_lags} lags"
        )));
    }
    // Two-tier lag grid: every record up to the dense horizon, then thinned
    // so the total stays below the cap. The slow part of the curve is smooth,
    // so the trapezoid loses nothing on the coarse section.
    let dense_n = if run.dense_lag_horizon <= 0.0 {
        n_lags
    } else {
        ((run.dense_lag_horizon / rec_dt).ceil() as usize).min(n_lags)
    };
    let budget = MAX_LAGS.saturating_sub(dense_n + 1).max(1);
    let coarse_stride = (n_lags - dense_n).div_ceil(budget).max(1);
    let mut lag_steps: Vec<usize> = (0..=dense_n).collect();
    let mut k = dense_n + coarse_stride;
    while k <= n_lags {
        lag_steps.push(k);
        k += coarse_stride;
    }
    if *lag_steps.last().unwrap() < n_lags {
        lag_steps.push(n_lags);
    }
    let n_kept = lag_steps.len();
    struct ReplicaOut {
        curves: Vec<Vec<f64>>,
        means: Vec<f64>,
        drift: f64,
    }
    let outs: Vec<ReplicaOut> = (0..run.n_replicas)
        .into_par_iter()
        .map(|r| -> Result<ReplicaOut> {
            let mut rng = replica_rng(run.seed, r as u64);
            let spec = CanonicalSpec {
                alpha,
                half_width: l,
                pair: fiber.draw(alpha, l, &mut rng),
            };
            let start = spec.sample(&mut rng)?;
            let series = box_observable_series(
                &start,
                mobility.clone(),
                dt,
                n_steps,
                record_stride,
                obs,
                &mut rng,
            )?;
            let t = series.times.len();
            let mut curves = Vec::with_capacity(pairs.len());
            for &(i, j) in pairs {
                let (f, g) = (&series.values[i], &series.values[j]);
                let mut c = vec![0.0; n_kept];
                for (ck, &lag) in c.iter_mut().zip(&lag_steps) {
                    let mut acc = 0.0;
                    for s in 0..t - lag {
                        acc += 0.5 * (f[s] * g[s + lag] + g[s] * f[s + lag]);
                    }
                    *ck = acc / (t - lag) as f64;
                }
                curves.push(c);
            }
            let means =
                series.values.iter().map(|v| v.iter().sum::<f64>() / t as f64).collect();
            Ok(ReplicaOut { curves, means, drift: series.max_drift })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut series_mean = Vec::with_capacity(obs.len());
    for k in 0..obs.len() {
        let mut st = OnlineStats::new();
        for o in &outs {
            st.push(o.means[k]);
        }
        series_mean.push((st.mean(), st.stderr()));
    }
    let mut pooled = vec![vec![0.0; n_kept]; pairs.len()];
    let mut sigma = vec![vec![0.0; n_kept]; pairs.len()];
    for (p, pool) in pooled.iter_mut().enumerate() {
        let (i, j) = pairs[p];
        let (ai, bj) = (series_mean[i].0, series_mean[j].0);
        for lag in 0..n_kept {
            let mut st = OnlineStats::new();
            for o in &outs {
                if run.subtract_mean {
                    // Influence pseudo-value of the centered estimator
                    // pooled(curve) - pooled(a) * pooled(b): its replica mean
                    // is the centered value exactly, its spread the first-
                    // order standard error.
                    st.push(o.curves[p][lag] - o.means[i] * bj - ai * o.means[j] + ai * bj);
                } else {
                    st.push(o.curves[p][lag]);
                }
            }
            pool[lag] = st.mean();
            sigma[p][lag] = st.stderr();
        }
    }
    Ok(CurveSet {
        taus: lag_steps.iter().map(|&k| k as f64 * rec_dt).collect(),
        pooled,
        sigma,
        per_replica: outs.iter().map(|o| o.curves.clone()).collect(),
        per_replica_mean: outs.iter().map(|o| o.means.clone()).collect(),
        series_mean,
        max_drift: outs.iter().map(|o| o.drift).fold(0.0, f64::max),
    })
}

/// One integrated covariance value with its provenance diagnostics.
#[derive(Debug, Clone)]
pub struct GkEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Normalized equal-time value of the summed pair.
    pub c0: f64,
    pub truncation_time: f64,
    pub tail_fraction: f64,
    pub decayed: bool,
    pub max_drift: f64,
}

/// Integrated, normalized covariances of window sums at a single half-width:
/// for each pair (f, g),
///   2/(2 jmax + 1) * integral_0^inf of Cov(sum_j f_j (0), sum_j g_j (tau))
/// with jmax = min(l1(l), l - span). All observables share one set of
/// trajectories. Error bars are leave-one-replica-out.
pub fn gk_battery(
    obs: &[&dyn Observable],
    pairs: &[(usize, usize)],
    mobility: &Mobility,
    alpha: f64,
    l: usize,
    fiber: FiberLaw,
    run: &GkRunParams,
) -> Result<Vec<GkEstimate>> {
    let l1 = l1_of(l);
    let mut jmax = l1;
    for o in obs {
        let room = l.checked_sub(o.span()).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "observable {} too wide for half-width {l}",
                o.name()
            ))
        })?;
        jmax = jmax.min(room);
    }
    let summed: Vec<SummedObservable<&dyn Observable>> = obs
        .iter()
        .map(|o| SummedObservable::over_range(*o, -(jmax as i64), jmax as i64))
        .collect();
    let refs: Vec<&dyn Observable> =
        summed.iter().map(|s| s as &dyn Observable).collect();
    let curves = cross_covariance_mc(&refs, pairs, mobility, alpha, l, fiber, run)?;
    if !run.subtract_mean {
        for (k, (mean, se)) in curves.series_mean.iter().enumerate() {
            if mean.abs() > 5.0 * se && mean.abs() > 1e-12 {
                return Err(Error::Numerical(format!(
                    "summed observable {} has stationary mean {mean:.3e} (se {se:.3e}); \
                     the covariance route needs exactly centered inputs",
                    obs[k].name()
                )));
            }
        }
    }
    let norm = 2.0 / (2.0 * jmax as f64 + 1.0);
    let nr = curves.per_replica.len();
    let mut out = Vec::with_capacity(pairs.len());
    for p in 0..pairs.len() {
        let integral = integrate_autocov(&curves.taus, &curves.pooled[p], &curves.sigma[p])?;
        let (i, j) = pairs[p];
        let (_, stderr) = jackknife(nr, |keep| {
            let mut mean = vec![0.0; curves.taus.len()];
            for &r in keep {
                for (lag, m) in mean.iter_mut().enumerate() {
                    *m += curves.per_replica[r][p][lag];
                }
            }
            for m in mean.iter_mut() {
                *m /= keep.len() as f64;
            }
            if run.subtract_mean {
                // Recenter with the subset's own means so the jackknife sees
                // the full estimator, subtraction included.
                let kn = keep.len() as f64;
                let ai =
                    keep.iter().map(|&r| curves.per_replica_mean[r][i]).sum::<f64>() / kn;
                let bj =
                    keep.iter().map(|&r| curves.per_replica_mean[r][j]).sum::<f64>() / kn;
                for m in mean.iter_mut() {
                    *m -= ai * bj;
                }
            }
            match integrate_autocov(&curves.taus, &mean, &curves.sigma[p]) {
                Ok(gi) => norm * gi.value,
                Err(_) => f64::NAN,
            }
        });
        out.push(GkEstimate {
            value: norm * integral.value,
            stderr,
            c0: norm * curves.pooled[p][0],
            truncation_time: integral.truncation_time,
            tail_fraction: integral.tail / integral.value.abs().max(f64::MIN_POSITIVE),
            decayed: integral.decayed,
            max_drift: curves.max_drift,
        });
    }
    Ok(out)
}

/// Integrated covariance of one observable with itself on a fixed fiber.
pub fn clt_variance(
    f: &dyn Observable,
    mobility: &Mobility,
    alpha: f64,
    l: usize,
    pair: ConservedPair,
    run: &GkRunParams,
) -> Result<GkEstimate> {
    Ok(gk_battery(&[f], &[(0, 0)], mobility, alpha, l, FiberLaw::Fixed(pair), run)?.remove(0))
}

/// Finite-width values plus the extrapolated limit of one integrated
/// covariance.
///
/// Current-sum pairings are built so their expectation at every finite l
/// already equals the limit (cross-checked statically); for those the flat
/// weighted mean `value` is the extrapolation and a fitted slope would only
/// amplify noise. Pairings involving a generator image on a fixed fiber
/// instead decay toward their limit: the conditioned measure correlates the
/// observable with the window's edge terms until the supports separate, so
/// their per-l values shrink monotonically and the limit is bracketed by
/// zero and the largest resolved width. Callers checking such a pairing
/// should look at `points` alongside `value`, and `chi2_dof` exposes how far
/// the flat model is from describing them.
#[derive(Debug, Clone)]
pub struct SemiInnerResult {
    pub points: Vec<(usize, GkEstimate)>,
    /// Inverse-variance weighted mean of the per-l points (flat model).
    pub value: f64,
    pub stderr: f64,
    /// Weighted chi-square per dof about `value`: consistency of the points
    /// with a flat curve.
    pub chi2_dof: f64,
    /// Diagnostic fit value(l) = c0 + c1 / l. For flat pairings its slope
    /// should be statistically consistent with zero; for decaying pairings
    /// the 1/l form is not trustworthy (the observed decay can be steeper),
    /// so the intercept must not be read as the limit.
    pub fit: LinearFit,
}

/// Runs [`gk_battery`] on each half-width in `l_grid` (all pairs share each
/// grid point's trajectories) and extrapolates every pair to l -> inf, both
/// through a flat weighted mean and through a weighted 1/l fit; see
/// [`SemiInnerResult`] for which applies to which pairing class.
///
/// Each replica draws its conserved pair afresh ([`FiberLaw::Fluctuating`]),
/// so the replica average doubles as the outer fiber average. The slowest
/// window mode relaxes on a time that grows like l^4 (about l^4/13 at unit
/// mobility) and holds most of the integral's mass at large l, so
/// `run.lag_horizon` and `run.horizon` are treated as floors: each grid
/// point's lag window deepens to about 1.5x that relaxation time, keeping
/// the exponential tail inside the fitted range rather than silently
/// truncated. The budget knob is `n_replicas`: per-lag noise shrinks like
/// 1/sqrt(replicas x horizon) and must resolve the slow tail's amplitude,
/// which falls like 1/l^4; points too noisy to resolve it keep honest error
/// bars from the jackknife and are downweighted by the fit.
pub fn semi_inner_many(
    obs: &[&dyn Observable],
    pairs: &[(usize, usize)],
    mobility: &Mobility,
    alpha: f64,
    l_grid: &[usize],
    fiber: FiberLaw,
    run: &GkRunParams,
) -> Result<Vec<SemiInnerResult>> {
    if l_grid.len() < 2 {
        return Err(Error::InvalidParameter(
            "extrapolation needs at least two half-widths".into(),
        ));
    }
    let mut per_l = Vec::with_capacity(l_grid.len());
    for (li, &l) in l_grid.iter().enumerate() {
        let mut run_l = run.clone();
        run_l.seed = subtask_seed(run.seed, li as u64 + 1);
        let lf = l as f64;
        run_l.lag_horizon = run.lag_horizon.max(lf.powi(4) / 8.9);
        run_l.horizon = run.horizon.max(4.5 * run_l.lag_horizon);
        per_l.push(gk_battery(obs, pairs, mobility, alpha, l, fiber, &run_l)?);
    }
    let xs: Vec<f64> = l_grid.iter().map(|&l| 1.0 / l as f64).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for p in 0..pairs.len() {
        let ys: Vec<f64> = per_l.iter().map(|b| b[p].value).collect();
        let ws: Vec<f64> = per_l
            .iter()
            .map(|b| 1.0 / (b[p].stderr * b[p].stderr).max(f64::MIN_POSITIVE))
            .collect();
        let wsum: f64 = ws.iter().sum();
        let value = ys.iter().zip(&ws).map(|(y, w)| y * w).sum::<f64>() / wsum;
        let stderr = wsum.recip().sqrt();
        let chi2: f64 = ys.iter().zip(&ws).map(|(y, w)| w * (y - value) * (y - value)).sum();
        let chi2_dof = chi2 / (l_grid.len() as f64 - 1.0).max(1.0);
        let fit = linear_fit(&xs, &ys, Some(&ws))?;
        out.push(SemiInnerResult {
            points: l_grid.iter().cloned().zip(per_l.iter().map(|b| b[p].clone())).collect(),
            value,
            stderr,
            chi2_dof,
            fit,
        });
    }
    Ok(out)
}

/// Single-pair convenience wrapper around [`semi_inner_many`].
pub fn semi_inner(
    f: &dyn Observable,
    g: &dyn Observable,
    mobility: &Mobility,
    alpha: f64,
    l_grid: &[usize],
    fiber: FiberLaw,
    run: &GkRunParams,
) -> Result<SemiInnerResult> {
    Ok(semi_inner_many(&[f, g], &[(0, 1)], mobility, alpha, l_grid, fiber, run)?.remove(0))
}

/// Static value of the integrated current-current covariance at half-width l:
/// the current sum is a generator image, so the time integral collapses to a
/// one-time average, 4 * Av_{|j| <= l1} E[a_j] in the centered conditioned
/// measure. Exact at every finite l; no dynamics involved.
pub fn current_variance_static(
    mobility: &Mobility,
    alpha: f64,
    l: usize,
    fiber: FiberLaw,
    n_samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    let l1 = l1_of(l) as i64;
    let mut rng = replica_rng(seed, 0);
    let mut acc = OnlineStats::new();
    for _ in 0..n_samples {
        let spec = CanonicalSpec {
            alpha,
            half_width: l,
            pair: fiber.draw(alpha, l, &mut rng),
        };
        let cfg = spec.sample(&mut rng)?;
        let mut s = 0.0;
        for j in -l1..=l1 {
            s += mobility.eval(&[cfg.get(j - 1)?, cfg.get(j)?, cfg.get(j + 1)?]);
        }
        acc.push(4.0 * s / (2 * l1 + 1) as f64);
    }
    Ok(McEstimate { mean: acc.mean(), stderr: acc.stderr(), n: acc.n() })
}

/// Site profile on the window whose bond second difference is 1 on every
/// interior bond with |b| <= jmax and 0 on the rest: a quadratic core with
/// linear continuations. Sites are flat-indexed 0..2l+1 (center at l).
pub fn quad_profile(l: usize, jmax: usize) -> Result<Vec<f64>> {
    if jmax + 1 > l {
        return Err(Error::InvalidParameter(format!(
            "bond range {jmax} does not fit inside half-width {l}"
        )));
    }
    let edge = (jmax + 1) as f64;
    let slope = (jmax as f64) + 0.5;
    let mut c = vec![0.0; 2 * l + 1];
    for (k, ck) in c.iter_mut().enumerate() {
        let i = (k as f64) - (l as f64);
        *ck = if i.abs() <= edge {
            0.5 * i * i
        } else {
            0.5 * edge * edge + (i.abs() - edge) * slope
        };
    }
    Ok(c)
}

/// Static variational lower bound on the integrated autocovariance of the
/// window sum of `f`, normalized like [`gk_battery`]:
///   value >= (2/(2 jmax + 1)) * Cov(F, 2u)^2 / (2 E[sum of a over the window])
/// where u is the quadratic bond-window profile. For f = w the bound is
/// saturated: the current sum is exactly the generator image of -2u.
pub fn gk_lower_bound(
    f: &dyn Observable,
    mobility: &Mobility,
    alpha: f64,
    l: usize,
    pair: ConservedPair,
    n_samples: u64,
    n_batches: usize,
    seed: u64,
) -> Result<McEstimate> {
    let jmax = l1_of(l).min(l.checked_sub(f.span()).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "observable {} too wide for half-width {l}",
            f.name()
        ))
    })?);
    if n_batches < 2 || n_samples < 4 * n_batches as u64 {
        return Err(Error::InvalidParameter(
            "lower bound needs at least 2 batches of 2 samples".into(),
        ));
    }
    let profile = quad_profile(l, jmax)?;
    let spec = CanonicalSpec { alpha, half_width: l, pair };
    let norm = 2.0 / (2.0 * jmax as f64 + 1.0);
    let per_batch = n_samples / n_batches as u64;
    let bounds: Vec<f64> = (0..n_batches as u64)
        .into_par_iter()
        .map(|b| -> Result<f64> {
            let mut rng = replica_rng(seed, b);
            let (mut sf, mut su, mut sfu, mut sa) = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..per_batch {
                let cfg = spec.sample(&mut rng)?;
                let mut fsum = 0.0;
                for j in -(jmax as i64)..=jmax as i64 {
                    fsum += f.eval(&cfg, j)?;
                }
                let mut u = 0.0;
                for (k, ck) in profile.iter().enumerate() {
                    u += ck * cfg.get(k as i64 - l as i64)?;
                }
                let mut asum = 0.0;
                for j in -(jmax as i64)..=jmax as i64 {
                    asum += mobility.eval(&[cfg.get(j - 1)?, cfg.get(j)?, cfg.get(j + 1)?]);
                }
                sf += fsum;
                su += 2.0 * u;
                sfu += fsum * 2.0 * u;
                sa += asum;
            }
            let m = per_batch as f64;
            let cov = sfu / m - (sf / m) * (su / m);
            Ok(norm * cov * cov / (2.0 * sa / m))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = OnlineStats::new();
    for b in bounds {
        acc.push(b);
    }
    Ok(McEstimate { mean: acc.mean(), stderr: acc.stderr(), n: acc.n() })
}

// ---------------------------------------------------------------------------
// Relaxation-rate extraction
// ---------------------------------------------------------------------------

/// Slowest decay rate of a normalized correlation curve, from a weighted
/// log-linear fit over the window where C(t)/C(0) lies in [lo, hi]. The same
/// rule applied to an exactly computed curve gives the matching reference.
pub fn decay_rate_from_curve(
    taus: &[f64],
    c: &[f64],
    sigma: &[f64],
    window: (f64, f64),
) -> Result<LinearFit> {
    let (lo, hi) = window;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "fit window ({lo}, {hi}) must satisfy 0 < lo < hi < 1"
        )));
    }
    if c.is_empty() || c[0] <= 0.0 {
        return Err(Error::InsufficientData("curve has no positive value at lag 0".into()));
    }
    let c0 = c[0];
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for i in 1..c.len() {
        let rho = c[i] / c0;
        if rho < lo {
            break;
        }
        if rho <= hi {
            ts.push(taus[i]);
            ys.push(rho.ln());
            // var(log rho) = (sigma / c)^2 up to the common c0 factor.
            let rel = (sigma[i] / c[i]).max(1e-12);
            ws.push(1.0 / (rel * rel));
        }
    }
    if ts.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "only {} curve points fall inside the fit window",
            ts.len()
        )));
    }
    linear_fit(&ts, &ys, Some(&ws))
}

#[derive(Debug, Clone)]
pub struct RateEstimate {
    pub rate: f64,
    pub stderr: f64,
    pub n_points: usize,
}

/// Measured slowest relaxation rate of `obs` under the window dynamics on
/// the centered fiber.
pub fn measure_relaxation_rate(
    obs: &dyn Observable,
    mobility: &Mobility,
    alpha: f64,
    l: usize,
    window: (f64, f64),
    run: &GkRunParams,
) -> Result<RateEstimate> {
    let curves =
        cross_covariance_mc(&[obs], &[(0, 0)], mobility, alpha, l, FiberLaw::centered(), run)?;
    let fit = decay_rate_from_curve(&curves.taus, &curves.pooled[0], &curves.sigma[0], window)?;
    let n_points = curves
        .pooled[0]
        .iter()
        .skip(1)
        .take_while(|&&v| v / curves.pooled[0][0] >= window.0)
        .filter(|&&v| v / curves.pooled[0][0] <= window.1)
        .count();
    let nr = curves.per_replica.len();
    let (_, stderr) = jackknife(nr, |keep| {
        let mut mean = vec![0.0; curves.taus.len()];
        for &r in keep {
            for (lag, m) in mean.iter_mut().enumerate() {
                *m += curves.per_replica[r][0][lag];
            }
        }
        for m in mean.iter_mut() {
            *m /= keep.len() as f64;
        }
        match decay_rate_from_curve(&curves.taus, &mean, &curves.sigma[0], window) {
            Ok(f) => -f.slope,
            Err(_) => f64::NAN,
        }
    });
    Ok(RateEstimate { rate: -fit.slope, stderr, n_points })
}

// ---------------------------------------------------------------------------
// Tabulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TableParams {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub n_points: usize,
    pub basis: BasisSpec,
    pub n_samples: u64,
    pub n_batches: usize,
    pub quad_order: usize,
    pub seed: u64,
}

impl TableParams {
    pub fn standard(basis: BasisSpec, n_samples: u64, seed: u64) -> Self {
        Self {
            alpha_min: -3.0,
            alpha_max: 3.0,
            n_points: 25,
            basis,
            n_samples,
            n_batches: 16,
            quad_order: 96,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TablePoint {
    pub alpha: f64,
    pub a_hat: f64,
    pub stderr: f64,
    pub lower: f64,
    pub upper: f64,
    pub sandwich_ok: bool,
    pub gram_cond: f64,
}

#[derive(Debug, Clone)]
pub struct TabulateReport {
    pub points: Vec<TablePoint>,
    pub sandwich_all_ok: bool,
    /// Differences of (a_hat - E[a]) between neighbors stay within 5 combined
    /// standard errors; the subtraction removes the smooth leading trend.
    pub smooth_ok: bool,
    pub max_step_sigma: f64,
}

/// Runs the variational estimator across a uniform grid of chemical
/// potentials, validates every point against the exact sandwich, checks the
/// grid for statistical smoothness, and packages the result for
/// interpolation.
pub fn tabulate(mobility: &Mobility, params: &TableParams) -> Result<(TransportTable, TabulateReport)> {
    if params.n_points < 2 || !(params.alpha_min < params.alpha_max) {
        return Err(Error::InvalidParameter("need an increasing grid of >= 2 points".into()));
    }
    let mut points = Vec::with_capacity(params.n_points);
    for i in 0..params.n_points {
        let alpha = params.alpha_min
            + (params.alpha_max - params.alpha_min) * i as f64 / (params.n_points - 1) as f64;
        let est = estimate_a_hat(
            mobility,
            alpha,
            &params.basis,
            params.n_samples,
            params.n_batches,
            subtask_seed(params.seed, i as u64),
        )?;
        let (lower, upper) = a_hat_bounds(mobility, alpha, params.quad_order)?;
        let sandwich_ok = est.value >= lower - 3.0 * est.stderr
            && est.value <= upper + 3.0 * est.stderr;
        points.push(TablePoint {
            alpha,
            a_hat: est.value,
            stderr: est.stderr,
            lower,
            upper,
            sandwich_ok,
            gram_cond: est.gram_cond,
        });
    }
    let mut smooth_ok = true;
    let mut max_step_sigma = 0.0f64;
    for w in points.windows(2) {
        let t0 = w[0].a_hat - w[0].upper;
        let t1 = w[1].a_hat - w[1].upper;
        let sig = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        let steps = (t1 - t0).abs() / sig.max(f64::MIN_POSITIVE);
        max_step_sigma = max_step_sigma.max(steps);
        if steps > 5.0 {
            smooth_ok = false;
        }
    }
    let table = TransportTable::from_grid(
        mobility.describe(),
        params.basis.id(),
        points.iter().map(|p| p.alpha).collect(),
        points.iter().map(|p| p.a_hat).collect(),
        points.iter().map(|p| p.stderr).collect(),
    )?;
    let sandwich_all_ok = points.iter().all(|p| p.sandwich_ok);
    Ok((table, TabulateReport { points, sandwich_all_ok, smooth_ok, max_step_sigma }))
}

// ---------------------------------------------------------------------------
// Transport table
// ---------------------------------------------------------------------------

const TABLE_HEADER: &str = "soshydro-table v1";

enum TableData {
    Constant(f64),
    Grid { alphas: Vec<f64>, values: Vec<f64>, stderrs: Vec<f64>, derivs: Vec<f64> },
}

/// Tabulated transport coefficient with shape-preserving cubic interpolation.
/// Serializes to a fingerprinted text format that round-trips bit-exactly.
pub struct TransportTable {
    mobility: String,
    basis: String,
    data: TableData,
    warned: AtomicBool,
}

impl Clone for TransportTable {
    fn clone(&self) -> Self {
        let data = match &self.data {
            TableData::Constant(v) => TableData::Constant(*v),
            TableData::Grid { alphas, values, stderrs, derivs } => TableData::Grid {
                alphas: alphas.clone(),
                values: values.clone(),
                stderrs: stderrs.clone(),
                derivs: derivs.clone(),
            },
        };
        Self {
            mobility: self.mobility.clone(),
            basis: self.basis.clone(),
            data,
            warned: AtomicBool::new(false),
        }
    }
}

impl std::fmt::Debug for TransportTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.data {
            TableData::Constant(v) => {
                write!(f, "TransportTable[{} constant {v}]", self.mobility)
            }
            TableData::Grid { alphas, .. } => write!(
                f,
                "TransportTable[{} grid {} points on [{}, {}]]",
                self.mobility,
                alphas.len(),
                alphas[0],
                alphas[alphas.len() - 1]
            ),
        }
    }
}

/// Shape-preserving knot slopes (two-sided harmonic weighting inside,
/// limited one-sided estimates at the ends).
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = y.windows(2).zip(&h).map(|(w, h)| (w[1] - w[0]) / h).collect();
    let mut d = vec![0.0; n];
    if n == 2 {
        d[0] = delta[0];
        d[1] = delta[0];
        return d;
    }
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] <= 0.0 {
            d[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| -> f64 {
        let mut e = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if e * d0 <= 0.0 {
            e = 0.0;
        } else if d0 * d1 < 0.0 && e.abs() > 3.0 * d0.abs() {
            e = 3.0 * d0;
        }
        e
    };
    d[0] = end(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

impl TransportTable {
    pub fn constant(mobility_id: impl Into<String>, value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "constant coefficient must be finite and positive, got {value}"
            )));
        }
        Ok(Self {
            mobility: mobility_id.into(),
            basis: "none".into(),
            data: TableData::Constant(value),
            warned: AtomicBool::new(false),
        })
    }

    pub fn from_grid(
        mobility_id: impl Into<String>,
        basis_id: impl Into<String>,
        alphas: Vec<f64>,
        values: Vec<f64>,
        stderrs: Vec<f64>,
    ) -> Result<Self> {
        if alphas.len() < 2 || alphas.len() != values.len() || alphas.len() != stderrs.len() {
            return Err(Error::InvalidParameter(
                "grid table needs >= 2 aligned (alpha, value, stderr) rows".into(),
            ));
        }
        if !alphas.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidParameter("grid points must be strictly increasing".into()));
        }
        if values.iter().chain(&alphas).chain(&stderrs).any(|v| !v.is_finite())
            || values.iter().any(|&v| v <= 0.0)
        {
            return Err(Error::InvalidParameter(
                "table entries must be finite with positive coefficients".into(),
            ));
        }
        let derivs = pchip_slopes(&alphas, &values);
        Ok(Self {
            mobility: mobility_id.into(),
            basis: basis_id.into(),
            data: TableData::Grid { alphas, values, stderrs, derivs },
            warned: AtomicBool::new(false),
        })
    }

    pub fn mobility_id(&self) -> &str {
        &self.mobility
    }

    pub fn basis_id(&self) -> &str {
        &self.basis
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.data, TableData::Constant(_))
    }

    /// Grid extent, None for constant tables.
    pub fn range(&self) -> Option<(f64, f64)> {
        match &self.data {
            TableData::Constant(_) => None,
            TableData::Grid { alphas, .. } => Some((alphas[0], alphas[alphas.len() - 1])),
        }
    }

    /// Raw grid nodes as (alphas, values, stderrs), None for constant tables.
    pub fn grid(&self) -> Option<(&[f64], &[f64], &[f64])> {
        match &self.data {
            TableData::Constant(_) => None,
            TableData::Grid { alphas, values, stderrs, .. } => Some((alphas, values, stderrs)),
        }
    }

    /// Upper bound of the stored coefficient (for stability budgets).
    pub fn max_value(&self) -> f64 {
        match &self.data {
            TableData::Constant(v) => *v,
            TableData::Grid { values, .. } => values.iter().cloned().fold(f64::MIN, f64::max),
        }
    }

    /// Interpolated coefficient. Queries outside the grid clamp to the edge
    /// (warned once per table instance).
    pub fn eval(&self, alpha: f64) -> f64 {
        match &self.data {
            TableData::Constant(v) => *v,
            TableData::Grid { alphas, values, derivs, .. } => {
                let n = alphas.len();
                let a = if alpha < alphas[0] || alpha > alphas[n - 1] {
                    if !self.warned.swap(true, Ordering::Relaxed) {
                        log::warn!(
                            "transport table queried at {alpha} outside [{}, {}]; clamping",
                            alphas[0],
                            alphas[n - 1]
                        );
                    }
                    alpha.clamp(alphas[0], alphas[n - 1])
                } else {
                    alpha
                };
                let i = alphas.partition_point(|&p| p <= a).clamp(1, n - 1) - 1;
                let h = alphas[i + 1] - alphas[i];
                let t = (a - alphas[i]) / h;
                let (t2, t3) = (t * t, t * t * t);
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + t;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                h00 * values[i] + h10 * h * derivs[i] + h01 * values[i + 1] + h11 * h * derivs[i + 1]
            }
        }
    }

    fn body(&self) -> String {
        let mut s = String::new();
        s.push_str(TABLE_HEADER);
        s.push('\n');
        s.push_str(&format!("mobility {}\n", self.mobility));
        s.push_str(&format!("basis {}\n", self.basis));
        match &self.data {
            TableData::Constant(v) => {
                s.push_str("kind constant\n");
                s.push_str(&format!("value {v:?}\n"));
            }
            TableData::Grid { alphas, values, stderrs, .. } => {
                s.push_str("kind grid\n");
                s.push_str(&format!("rows {}\n", alphas.len()));
                s.push_str("columns alpha a_hat stderr\n");
                for i in 0..alphas.len() {
                    s.push_str(&format!("{:?} {:?} {:?}\n", alphas[i], values[i], stderrs[i]));
                }
            }
        }
        s
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.body().as_bytes())
    }

    pub fn to_text(&self) -> String {
        let body = self.body();
        format!("{body}fingerprint {:016x}\n", fnv1a64(body.as_bytes()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |msg: &str| Error::Parse(format!("transport table: {msg}"));
        let fp_pos = text
            .rfind("fingerprint ")
            .ok_or_else(|| parse_err("missing fingerprint line"))?;
        let body = &text[..fp_pos];
        let fp_line = text[fp_pos..].trim_end();
        let stated = fp_line
            .strip_prefix("fingerprint ")
            .and_then(|h| u64::from_str_radix(h, 16).ok())
            .ok_or_else(|| parse_err("malformed fingerprint line"))?;
        let actual = fnv1a64(body.as_bytes());
        if stated != actual {
            return Err(parse_err(&format!(
                "fingerprint mismatch: stated {stated:016x}, content hashes to {actual:016x}"
            )));
        }
        let mut lines = body.lines();
        if lines.next() != Some(TABLE_HEADER) {
            return Err(parse_err("unrecognized header (expected 'soshydro-table v1')"));
        }
        let field = |line: Option<&str>, key: &str| -> Result<String> {
            line.and_then(|l| l.strip_prefix(key))
                .map(|v| v.trim().to_string())
                .ok_or_else(|| parse_err(&format!("expected '{key}' line")))
        };
        let mobility = field(lines.next(), "mobility ")?;
        let basis = field(lines.next(), "basis ")?;
        let kind = field(lines.next(), "kind ")?;
        match kind.as_str() {
            "constant" => {
                let v: f64 = field(lines.next(), "value ")?
                    .parse()
                    .map_err(|_| parse_err("bad constant value"))?;
                let mut t = Self::constant(mobility, v)?;
                t.basis = basis;
                Ok(t)
            }
            "grid" => {
                let rows: usize = field(lines.next(), "rows ")?
                    .parse()
                    .map_err(|_| parse_err("bad row count"))?;
                if lines.next() != Some("columns alpha a_hat stderr") {
                    return Err(parse_err("expected 'columns alpha a_hat stderr'"));
                }
                let mut alphas = Vec::with_capacity(rows);
                let mut values = Vec::with_capacity(rows);
                let mut stderrs = Vec::with_capacity(rows);
                for _ in 0..rows {
                    let row = lines.next().ok_or_else(|| parse_err("truncated grid"))?;
                    let mut it = row.split_whitespace();
                    let mut next = || -> Result<f64> {
                        it.next()
                            .and_then(|tok| tok.parse().ok())
                            .ok_or_else(|| parse_err("bad grid row"))
                    };
                    alphas.push(next()?);
                    values.push(next()?);
                    stderrs.push(next()?);
                }
                Self::from_grid(mobility, basis, alphas, values, stderrs)
            }
            other => Err(parse_err(&format!("unknown table kind '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_fn::{CurrentObs, LaplacianObs};

    #[test]
    fn l1_grows_like_l_minus_sqrt_l() {
        assert_eq!(l1_of(2), 0);
        assert_eq!(l1_of(3), 1);
        assert_eq!(l1_of(4), 2);
        assert_eq!(l1_of(6), 3);
        assert_eq!(l1_of(8), 5);
        assert_eq!(l1_of(12), 8);
    }

    #[test]
    fn constant_mobility_recovers_the_constant() {
        let mob = Mobility::constant(2.0).unwrap();
        let est =
            estimate_a_hat(&mob, 0.3, &BasisSpec::default_tanh(), 40_000, 8, 11).unwrap();
        assert_eq!(est.coeffs.len(), 9);
        assert!(
            (est.value - 2.0).abs() < 0.01,
            "a_hat {} +- {}",
            est.value,
            est.stderr
        );
        assert!(est.gram_cond.is_finite() && est.gram_cond >= 1.0);
    }

    #[test]
    fn empty_basis_degenerates_to_mean_mobility() {
        let mob = Mobility::bump(0.1).unwrap();
        let est = estimate_a_hat(&mob, 0.5, &BasisSpec::Empty, 30_000, 6, 3).unwrap();
        let (_, upper) = a_hat_bounds(&mob, 0.5, 96).unwrap();
        assert!(est.coeffs.is_empty());
        assert!((est.value - upper).abs() < 4.0 * est.stderr);
    }

    #[test]
    fn variational_value_sits_inside_the_sandwich() {
        let mob = Mobility::bump(0.2).unwrap();
        let est =
            estimate_a_hat(&mob, 0.0, &BasisSpec::default_tanh(), 60_000, 8, 7).unwrap();
        let (lower, upper) = a_hat_bounds(&mob, 0.0, 96).unwrap();
        assert!(lower < upper);
        assert!(est.value >= lower - 3.0 * est.stderr, "{} < {}", est.value, lower);
        assert!(est.value <= upper + 3.0 * est.stderr, "{} > {}", est.value, upper);
    }

    #[test]
    fn fresh_sample_residual_is_unsuspicious() {
        let mob = Mobility::bump(0.15).unwrap();
        let basis = BasisSpec::default_tanh();
        let est = estimate_a_hat(&mob, 0.2, &basis, 40_000, 8, 19).unwrap();
        let fd = fd_residual(&mob, 0.2, &basis, &est, 40_000, 23).unwrap();
        assert!(!fd.suspicious, "residual {} +- {}", fd.value, fd.stderr);
        assert!(fd.value.abs() < 5.0 * fd.stderr);
    }

    #[test]
    fn parts_identity_holds_for_two_observables() {
        let mob = Mobility::bump(0.25).unwrap();
        for f in [&TanhSite { offset: 0 } as &dyn LocalFn, &TanhPair { offset: -1 }] {
            let gap = ibp_gap(&mob, 0.4, f, 60_000, 5).unwrap();
            assert!(
                gap.mean.abs() < 4.0 * gap.stderr,
                "{}: gap {} +- {}",
                f.name(),
                gap.mean,
                gap.stderr
            );
        }
    }

    #[test]
    fn static_current_variance_is_exact_for_unit_mobility() {
        let mob = Mobility::constant(1.0).unwrap();
        let v = current_variance_static(&mob, 0.7, 6, FiberLaw::Fluctuating, 200, 1).unwrap();
        assert!((v.mean - 4.0).abs() < 1e-12);
        assert!(v.stderr < 1e-12);
    }

    #[test]
    fn mc_bounds_agree_with_quadrature() {
        let mob = Mobility::bump(0.1).unwrap();
        let (lo_q, up_q) = a_hat_bounds(&mob, 1.0, 96).unwrap();
        let (mean, inv) = a_hat_bounds_mc(&mob, 1.0, 60_000, 2).unwrap();
        assert!((mean.mean - up_q).abs() < 4.0 * mean.stderr);
        assert!((1.0 / inv.mean - lo_q).abs() < 4.0 * lo_q * inv.stderr / inv.mean);
    }

    #[test]
    fn decay_rate_recovers_synthetic_exponential() {
        let lam = 0.8;
        let taus: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let c: Vec<f64> = taus.iter().map(|t| 3.0 * (-lam * t).exp()).collect();
        let sigma = vec![1e-4; taus.len()];
        let fit = decay_rate_from_curve(&taus, &c, &sigma, (0.05, 0.4)).unwrap();
        assert!((-fit.slope - lam).abs() < 1e-6, "rate {}", -fit.slope);
    }

    #[test]
    fn pchip_is_exact_on_lines_and_preserves_monotonicity() {
        let alphas: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 2.0).collect();
        let values: Vec<f64> = alphas.iter().map(|a| 2.0 + 0.25 * a).collect();
        let t = TransportTable::from_grid("m", "b", alphas.clone(), values, vec![0.0; 9])
            .unwrap();
        for k in 0..80 {
            let a = -2.0 + k as f64 * 0.05;
            assert!((t.eval(a) - (2.0 + 0.25 * a)).abs() < 1e-12);
        }
        // Monotone data stays monotone between knots.
        let ys = vec![1.0, 1.1, 1.8, 1.85, 2.9, 3.0, 3.2, 3.9, 4.0];
        let t2 = TransportTable::from_grid(
            "m",
            "b",
            (0..9).map(|i| i as f64).collect(),
            ys,
            vec![0.0; 9],
        )
        .unwrap();
        let mut prev = t2.eval(0.0);
        for k in 1..=800 {
            let v = t2.eval(k as f64 * 0.01);
            assert!(v >= prev - 1e-12, "dip at {}", k as f64 * 0.01);
            prev = v;
        }
    }

    #[test]
    fn table_clamps_outside_the_grid() {
        let t = TransportTable::from_grid(
            "m",
            "b",
            vec![-1.0, 0.0, 1.0],
            vec![2.0, 3.0, 2.5],
            vec![0.0; 3],
        )
        .unwrap();
        assert_eq!(t.eval(-5.0), 2.0);
        assert_eq!(t.eval(7.0), 2.5);
        assert_eq!(t.range(), Some((-1.0, 1.0)));
    }

    #[test]
    fn table_text_round_trips_bit_exactly() {
        let alphas = vec![-3.0, -1.5, 0.1 + 0.2, 1.0, 2.718281828459045];
        let values = vec![1.0 / 3.0, 1.1, 1.2000000000000002, 1.05, 1e-3];
        let errs = vec![1e-300, 0.0, 2e-5, 3.3e-4, f64::MIN_POSITIVE];
        let t = TransportTable::from_grid("bump:0.1", "tanh:s=2", alphas, values, errs)
            .unwrap();
        let text = t.to_text();
        let back = TransportTable::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.fingerprint(), t.fingerprint());
        assert_eq!(back.mobility_id(), "bump:0.1");
        assert_eq!(back.basis_id(), "tanh:s=2");
        for a in [-3.0, -0.7, 0.30000000000000004, 2.0] {
            assert_eq!(back.eval(a).to_bits(), t.eval(a).to_bits());
        }
        let c = TransportTable::constant("constant:2.0", 2.0).unwrap();
        let ct = c.to_text();
        let cback = TransportTable::from_text(&ct).unwrap();
        assert_eq!(cback.to_text(), ct);
        assert_eq!(cback.eval(123.0), 2.0);
    }

    #[test]
    fn tampered_table_is_rejected() {
        let t = TransportTable::from_grid(
            "bump:0.1",
            "tanh:s=2",
            vec![0.0, 1.0],
            vec![1.0, 1.1],
            vec![0.0, 0.0],
        )
        .unwrap();
        let text = t.to_text();
        let tampered = text.replace("1.1", "1.2");
        assert!(matches!(TransportTable::from_text(&tampered), Err(Error::Parse(_))));
        let truncated = &text[..text.len() / 2];
        assert!(TransportTable::from_text(truncated).is_err());
        assert!(matches!(
            TransportTable::from_text("soshydro-table v0\nfingerprint 00\n"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn tabulate_smoke_on_constant_mobility() {
        let mob = Mobility::constant(1.5).unwrap();
        let params = TableParams {
            alpha_min: -1.0,
            alpha_max: 1.0,
            n_points: 5,
            basis: BasisSpec::Tanh { s: 1 },
            n_samples: 8_000,
            n_batches: 4,
            quad_order: 32,
            seed: 99,
        };
        let (table, report) = tabulate(&mob, &params).unwrap();
        assert!(report.sandwich_all_ok, "{:#?}", report.points);
        assert!(report.smooth_ok);
        assert_eq!(table.mobility_id(), "constant:1.5");
        for a in [-0.9, -0.2, 0.4, 0.99] {
            assert!((table.eval(a) - 1.5).abs() < 0.05);
        }
    }

    #[test]
    fn quad_profile_second_difference_is_window_indicator() {
        for (l, jmax) in [(4usize, 2usize), (6, 3), (8, 5), (12, 8), (5, 4)] {
            let c = quad_profile(l, jmax).unwrap();
            for b in 1..2 * l {
                let d = c[b - 1] - 2.0 * c[b] + c[b + 1];
                let want = if (b as i64 - l as i64).unsigned_abs() as usize <= jmax {
                    1.0
                } else {
                    0.0
                };
                assert!((d - want).abs() < 1e-12, "l={l} jmax={jmax} bond {b}: {d}");
            }
        }
        assert!(quad_profile(4, 4).is_err());
    }

    #[test]
    fn lower_bound_saturates_for_the_current_sum() {
        // The current sum is the generator image of -2u, so the variational
        // bound with trial function u is an equality: 4c at constant mobility.
        let mob = Mobility::constant(1.3).unwrap();
        let w = CurrentObs { mobility: mob.clone(), offset: 0 };
        let pair = ConservedPair { block_mean: 0.0, linear_mean: 0.0 };
        let b = gk_lower_bound(&w, &mob, 0.0, 5, pair, 20_000, 8, 3).unwrap();
        assert!(
            (b.mean - 5.2).abs() < 4.0 * b.stderr + 0.02,
            "bound {} +- {}",
            b.mean,
            b.stderr
        );
    }

    #[test]
    fn battery_rejects_uncentered_observables() {
        // x_0^2 has nonzero stationary mean; the guard must catch it.
        let mob = Mobility::constant(1.0).unwrap();
        let sq = crate::local_fn::FnObservable::new(0, "x0sq", |w: &[f64]| w[0] * w[0]);
        let run = GkRunParams {
            n_replicas: 4,
            horizon: 200.0,
            record_dt: 0.5,
            lag_horizon: 10.0,
            dense_lag_horizon: 0.0,
            dt_fraction: 1.0,
            subtract_mean: false,
            seed: 5,
        };
        let pair = ConservedPair { block_mean: 0.0, linear_mean: 0.0 };
        let err = clt_variance(&sq, &mob, 0.8, 4, pair, &run);
        assert!(matches!(err, Err(Error::Numerical(_))), "{err:?}");
        // The centered current passes the same guard.
        let lap = LaplacianObs { offset: 0 };
        let ok = clt_variance(&lap, &mob, 0.8, 4, pair, &run);
        assert!(ok.is_ok(), "{ok:?}");
    }

    #[test]
    fn mean_subtraction_recovers_the_centered_pairing() {
        // Shifting an observable by a constant changes nothing about its
        // centered covariances. The plain route rejects the shifted input;
        // the subtracting route reproduces the unshifted estimate.
        let mob = Mobility::constant(1.0).unwrap();
        let lap = LaplacianObs { offset: 0 };
        let shifted = crate::local_fn::FnObservable::new(1, "lap+5", |w: &[f64]| {
            (w[0] - 2.0 * w[1] + w[2]) + 5.0
        });
        let run = GkRunParams {
            n_replicas: 8,
            horizon: 1200.0,
            record_dt: 0.25,
            lag_horizon: 80.0,
            dense_lag_horizon: 0.0,
            dt_fraction: 1.0,
            subtract_mean: false,
            seed: 0x6b30,
        };
        let pair = ConservedPair { block_mean: 0.0, linear_mean: 0.0 };
        let plain = clt_variance(&lap, &mob, 0.0, 4, pair, &run).unwrap();
        assert!(
            matches!(clt_variance(&shifted, &mob, 0.0, 4, pair, &run), Err(Error::Numerical(_))),
            "shifted observable must trip the centering guard"
        );
        let mut run_sub = run.clone();
        run_sub.subtract_mean = true;
        let sub = clt_variance(&shifted, &mob, 0.0, 4, pair, &run_sub).unwrap();
        // The centered estimate stays consistent with the exact value 4,
        // with the subtraction noise (amplified by the shift) reflected in
        // its jackknife error via per-subset recentering.
        assert!(
            (sub.value - 4.0).abs() < 4.0 * sub.stderr + 0.1,
            "centered {} +- {}",
            sub.value,
            sub.stderr
        );
        assert!(
            sub.stderr >= plain.stderr * 0.5,
            "subtraction noise cannot shrink the error: {} vs plain {}",
            sub.stderr,
            plain.stderr
        );
        assert!((plain.value - 4.0).abs() < 4.0 * plain.stderr + 0.1);
    }
}
