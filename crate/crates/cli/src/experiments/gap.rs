//! Spectral-gap scaling: the slowest relaxation rate of the window dynamics
//! on the centered conserved fiber, measured per half-width from the decay
//! of the center-site autocorrelation, then fitted as a power law in l.

use super::RunCtx;
use crate::config::MobilitySpec;
use crate::report::{fmt_f64, write_csv, Outcome};
use serde::Serialize;
use serde_json::json;
use soshydro_core::dense::relaxation_rates;
use soshydro_core::local_fn::SiteValue;
use soshydro_core::stats::linear_fit;
use soshydro_core::transport::{measure_relaxation_rate, subtask_seed, GkRunParams};
use soshydro_core::Result;

/// Expected slowest relaxation time; the l^4 scaling is what the experiment
/// measures, the constant only budgets horizons.
fn tau_guess(l: usize) -> f64 {
    (l as f64).powi(4) / 13.4
}

#[derive(Debug, Serialize)]
struct GapRow {
    l: usize,
    rate: f64,
    stderr: f64,
    n_fit_points: usize,
    /// Dense-eigensolve rate, constant mobility only.
    dense: Option<f64>,
    dense_rel_err: Option<f64>,
}

pub fn run(ctx: &RunCtx) -> Result<Outcome> {
    let cfg = ctx.config;
    let g = &cfg.gap;
    let obs = SiteValue { offset: 0 };

    let mut rows: Vec<GapRow> = Vec::new();
    for (li, &l) in g.l.iter().enumerate() {
        let tau = tau_guess(l);
        let run = GkRunParams {
            n_replicas: g.replicas,
            horizon: g.horizon_taus * tau,
            record_dt: tau / g.record_per_tau as f64,
            lag_horizon: g.lag_taus * tau,
            dense_lag_horizon: 0.0,
            dt_fraction: 0.8,
            subtract_mean: false,
            seed: subtask_seed(ctx.seed, 17 + li as u64),
        };
        let est = measure_relaxation_rate(&obs, &ctx.mobility, 0.0, l, (g.fit_lo, g.fit_hi), &run)?;
        let dense = match cfg.mobility {
            MobilitySpec::Constant { value } => Some(value * relaxation_rates(l)?[0]),
            MobilitySpec::Bump { .. } => None,
        };
        let dense_rel_err = dense.map(|d| (est.rate - d).abs() / d);
        rows.push(GapRow {
            l,
            rate: est.rate,
            stderr: est.stderr,
            n_fit_points: est.n_points,
            dense,
            dense_rel_err,
        });
    }

    // Weighted log-log fit; weights from the per-l jackknife errors.
    let xs: Vec<f64> = rows.iter().map(|r| (r.l as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.rate.ln()).collect();
    let ws: Vec<f64> = rows
        .iter()
        .map(|r| {
            let rel = (r.stderr / r.rate).max(1e-6);
            1.0 / (rel * rel)
        })
        .collect();
    let fit = linear_fit(&xs, &ys, Some(&ws))?;
    let wmean = ys.iter().zip(&ws).map(|(y, w)| y * w).sum::<f64>() / ws.iter().sum::<f64>();
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for ((&x, &y), &w) in xs.iter().zip(&ys).zip(&ws) {
        ss_res += w * (y - (fit.intercept + fit.slope * x)).powi(2);
        ss_tot += w * (y - wmean).powi(2);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.l.to_string(),
                fmt_f64(r.rate),
                fmt_f64(r.stderr),
                r.dense.map(fmt_f64).unwrap_or_default(),
                r.dense_rel_err.map(fmt_f64).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(&ctx.out_dir, "gap_rates.csv", ctx.config_hash, &["l", "rate", "stderr", "dense_rate", "dense_rel_err"], &csv_rows)?;

    let mut failures = Vec::new();
    let mut flags = Vec::new();
    if (fit.slope - g.expected_exponent).abs() > g.exponent_tolerance {
        failures.push(format!(
            "fitted exponent {:.3} outside {} +- {}",
            fit.slope, g.expected_exponent, g.exponent_tolerance
        ));
    }
    for r in &rows {
        if let Some(rel) = r.dense_rel_err {
            if rel > g.dense_tolerance {
                failures.push(format!(
                    "l = {}: measured rate {:.4} off the dense eigensolve {:.4} by {:.1}%",
                    r.l,
                    r.rate,
                    r.dense.unwrap(),
                    100.0 * rel
                ));
            }
        }
    }
    if !(r2 >= 0.9) {
        flags.push(format!("poor power-law fit: R^2 = {r2:.3}"));
    }

    let results = json!({
        "rates": rows,
        "exponent": fit.slope,
        "exponent_stderr": fit.slope_stderr,
        "intercept": fit.intercept,
        "r2": r2,
        "expected_exponent": g.expected_exponent,
        "tolerance": g.exponent_tolerance,
    });
    Ok(Outcome::from_failures(failures, flags, results))
}
