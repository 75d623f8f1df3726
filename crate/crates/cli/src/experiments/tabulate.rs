//! Transport-coefficient tabulation: the variational estimator on a tilt
//! grid, validated point-by-point against the exact quadrature sandwich,
//! then emitted as a fingerprinted table file for the PDE-backed runs.

use super::RunCtx;
use crate::report::{fmt_f64, write_csv, Outcome};
use serde_json::json;
use soshydro_core::transport::{tabulate, BasisSpec, TableParams};
use soshydro_core::{Error, Result};

pub fn run(ctx: &RunCtx) -> Result<Outcome> {
    let t = &ctx.config.tabulate;
    let params = TableParams {
        alpha_min: t.alpha_min,
        alpha_max: t.alpha_max,
        n_points: t.points,
        basis: BasisSpec::Tanh { s: t.basis_s },
        n_samples: t.samples,
        n_batches: t.batches,
        quad_order: t.quad_order,
        seed: ctx.seed,
    };
    let (table, report) = tabulate(&ctx.mobility, &params)?;

    let out_path = ctx.out_dir.join(&t.out_table);
    std::fs::create_dir_all(&ctx.out_dir)
        .map_err(|e| Error::InvalidParameter(format!("cannot create {}: {e}", ctx.out_dir.display())))?;
    std::fs::write(&out_path, table.to_text())
        .map_err(|e| Error::InvalidParameter(format!("cannot write {}: {e}", out_path.display())))?;

    let rows: Vec<Vec<String>> = report
        .points
        .iter()
        .map(|p| {
            vec![
                fmt_f64(p.alpha),
                fmt_f64(p.a_hat),
                fmt_f64(p.stderr),
                fmt_f64(p.lower),
                fmt_f64(p.upper),
                p.sandwich_ok.to_string(),
                fmt_f64(p.gram_cond),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir,
        "table_points.csv",
        ctx.config_hash,
        &["alpha", "a_hat", "stderr", "lower_bound", "upper_bound", "sandwich_ok", "gram_cond"],
        &rows,
    )?;

    let mut failures = Vec::new();
    if !report.sandwich_all_ok {
        let bad: Vec<String> = report
            .points
            .iter()
            .filter(|p| !p.sandwich_ok)
            .map(|p| format!("{:.3}", p.alpha))
            .collect();
        failures.push(format!("sandwich bounds violated at alpha = {}", bad.join(", ")));
    }
    if !report.smooth_ok {
        failures.push(format!(
            "grid not statistically smooth: neighbor step of {:.1} sigma",
            report.max_step_sigma
        ));
    }
    let fingerprint = {
        let text = table.to_text();
        text.lines().last().unwrap_or("").to_string()
    };
    let results = json!({
        "table_file": t.out_table,
        "mobility": table.mobility_id(),
        "basis": table.basis_id(),
        "points": report.points.len(),
        "alpha_range": [t.alpha_min, t.alpha_max],
        "samples_per_point": t.samples,
        "sandwich_all_ok": report.sandwich_all_ok,
        "smooth_ok": report.smooth_ok,
        "max_step_sigma": report.max_step_sigma,
        "fingerprint": fingerprint,
    });
    Ok(Outcome::from_failures(failures, Vec::new(), results))
}
