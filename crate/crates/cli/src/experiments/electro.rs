//! Field-driven discrimination run: the microscopic dynamics under a field
//! E against two PDE references, one with the tabulated transport
//! coefficient and one with the naive static mean of the mobility. The
//! verdict is meaningful only when the two coefficients differ by more than
//! the tabulation noise over the range of tilts the profile visits; that
//! pre-check failing downgrades the verdict to inconclusive, never to a
//! silent pass.

use super::{load_table, micro_battery, pair_grid, pde_reference, ring_run_seed, RunCtx, BATTERY};
use crate::config::MobilitySpec;
use crate::report::{fmt_f64, write_csv, Outcome, Verdict};
use serde_json::json;
use soshydro_core::quadrature::mobility_moments;
use soshydro_core::transport::TransportTable;
use soshydro_core::{Error, Result};

struct Precheck {
    min_gap: f64,
    max_combined_stderr: f64,
    threshold: f64,
    passed: bool,
    alpha_lo: f64,
    alpha_hi: f64,
}

/// A failed pre-check always downgrades to inconclusive, whatever the
/// residuals happen to say: an underpowered comparison must not be read in
/// either direction.
fn discrimination_verdict(
    check: &Precheck,
    sigma: f64,
    residual_hat: f64,
    residual_tilde: f64,
    gate: f64,
) -> (Verdict, Vec<String>) {
    if !check.passed {
        return (
            Verdict::Inconclusive,
            vec![format!(
                "pre-check failed: coefficient gap {:.3e} does not exceed {:.1} x stderr = {:.3e}; \
                 the two references are statistically indistinguishable at this tabulation budget",
                check.min_gap, sigma, check.threshold
            )],
        );
    }
    if residual_hat <= gate * residual_tilde {
        (Verdict::Pass, Vec::new())
    } else {
        (
            Verdict::Fail,
            vec![format!(
                "residual(transport) = {residual_hat:.4e} > {gate} x residual(static-mean) = {:.4e}",
                gate * residual_tilde
            )],
        )
    }
}

/// Static-mean coefficient on the same grid as the tabulated one, from
/// quadrature (exact up to machine precision, so stderr 0).
fn static_mean_table(ctx: &RunCtx, table: &TransportTable) -> Result<TransportTable> {
    let (alphas, _, _) = table
        .grid()
        .ok_or_else(|| Error::InvalidParameter("discrimination needs a grid table, not a constant".into()))?;
    let values = alphas
        .iter()
        .map(|&a| mobility_moments(&ctx.mobility, a, 64).map(|(mean, _)| mean))
        .collect::<Result<Vec<f64>>>()?;
    TransportTable::from_grid(
        ctx.mobility.describe(),
        "static-mean",
        alphas.to_vec(),
        values,
        vec![0.0; alphas.len()],
    )
}

/// Coefficient gap over the tilt range the run can visit: table nodes
/// restricted to m0's amplitude bound plus margin.
fn precheck(ctx: &RunCtx, table: &TransportTable, tilde: &TransportTable) -> Result<Precheck> {
    let (alphas, values, stderrs) = table.grid().expect("checked in static_mean_table");
    let (t_alphas, t_values, _) = tilde.grid().expect("built as a grid");
    debug_assert_eq!(alphas, t_alphas);
    let reach = ctx.config.m0.amplitude_bound() + ctx.config.electro.alpha_margin;
    let (mut min_gap, mut max_se) = (f64::INFINITY, 0.0f64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut used = 0;
    for i in 0..alphas.len() {
        if alphas[i].abs() > reach {
            continue;
        }
        used += 1;
        lo = lo.min(alphas[i]);
        hi = hi.max(alphas[i]);
        min_gap = min_gap.min(t_values[i] - values[i]);
        max_se = max_se.max(stderrs[i]);
    }
    if used < 2 {
        return Err(Error::InvalidParameter(format!(
            "table covers too little of the profile range [{:-.2}, {:.2}]",
            -reach, reach
        )));
    }
    let threshold = ctx.config.electro.precheck_sigma * max_se;
    Ok(Precheck {
        min_gap,
        max_combined_stderr: max_se,
        threshold,
        passed: min_gap > threshold,
        alpha_lo: lo,
        alpha_hi: hi,
    })
}

pub fn run(ctx: &RunCtx) -> Result<Outcome> {
    let cfg = ctx.config;

    // E off: the dynamics and both references degenerate to the field-free
    // run, so this is exactly the hydro experiment, reported as such.
    if cfg.field.is_off() {
        let data = super::hydro::run_ladder(ctx, None)?;
        super::hydro::emit_csv(ctx, &data.rows, "electro_reduction.csv")?;
        let mut failures = Vec::new();
        if !data.monotone {
            failures.push("weak-metric error is not strictly decreasing in N".to_string());
        }
        if !(data.final_error < data.threshold) {
            failures.push(format!(
                "final weak-metric error {:.4} exceeds threshold {}",
                data.final_error, data.threshold
            ));
        }
        let results = json!({
            "mode": "reduction",
            "sizes": data.rows,
            "monotone_in_n": data.monotone,
            "final_weak_error": data.final_error,
            "threshold": data.threshold,
        });
        return Ok(Outcome::from_failures(failures, data.reference_flags, results));
    }

    // Constant mobility: the transport coefficient and the static mean are
    // the same number, so there is nothing to discriminate. Report the
    // field-driven comparison against the single reference.
    if let MobilitySpec::Constant { .. } = cfg.mobility {
        let data = super::hydro::run_ladder(ctx, Some(&cfg.field))?;
        super::hydro::emit_csv(ctx, &data.rows, "electro_residuals.csv")?;
        let mut failures = Vec::new();
        if !(data.final_error < data.threshold) {
            failures.push(format!(
                "final weak-metric error {:.4} exceeds threshold {}",
                data.final_error, data.threshold
            ));
        }
        let results = json!({
            "mode": "degenerate",
            "note": "constant mobility: both references coincide, discrimination skipped",
            "sizes": data.rows,
            "final_weak_error": data.final_error,
            "threshold": data.threshold,
        });
        return Ok(Outcome::from_failures(failures, data.reference_flags, results));
    }

    // Discrimination proper.
    let table = load_table(ctx)?;
    let tilde = static_mean_table(ctx, &table)?;
    let check = precheck(ctx, &table, &tilde)?;

    let n = *cfg.run.n.last().expect("validated nonempty");
    let ni = cfg.run.n.len() - 1;
    let field_profile = cfg.field.sample(n);
    let mb = micro_battery(ctx, n, ring_run_seed(ctx.seed, ni), Some(&field_profile))?;

    let sol_hat = pde_reference(ctx, table, &cfg.field, cfg.run.t)?;
    let sol_tilde = pde_reference(ctx, tilde, &cfg.field, cfg.run.t)?;
    let ref_hat: [f64; 3] = std::array::from_fn(|i| pair_grid(sol_hat.final_profile(), i));
    let ref_tilde: [f64; 3] = std::array::from_fn(|i| pair_grid(sol_tilde.final_profile(), i));

    let err_hat: [f64; 3] = std::array::from_fn(|i| (mb.mean[i] - ref_hat[i]).abs());
    let err_tilde: [f64; 3] = std::array::from_fn(|i| (mb.mean[i] - ref_tilde[i]).abs());
    let residual_hat = err_hat.iter().cloned().fold(0.0, f64::max);
    let residual_tilde = err_tilde.iter().cloned().fold(0.0, f64::max);
    let ratio = residual_hat / residual_tilde;

    let mut rows = Vec::new();
    for i in 0..3 {
        rows.push(vec![
            BATTERY[i].0.to_string(),
            fmt_f64(mb.mean[i]),
            fmt_f64(mb.stderr[i]),
            fmt_f64(ref_hat[i]),
            fmt_f64(ref_tilde[i]),
            fmt_f64(err_hat[i]),
            fmt_f64(err_tilde[i]),
        ]);
    }
    write_csv(
        &ctx.out_dir,
        "electro_residuals.csv",
        ctx.config_hash,
        &["phi", "micro", "micro_stderr", "ref_transport", "ref_static_mean", "err_transport", "err_static_mean"],
        &rows,
    )?;

    let mut flags = Vec::new();
    for (sol, tag) in [(&sol_hat, "transport"), (&sol_tilde, "static-mean")] {
        if sol.clamped {
            flags.push(format!("{tag} reference: coefficient clamped at the table edge"));
        }
    }

    let gate = cfg.electro.ratio_gate;
    let (verdict, failures) = discrimination_verdict(
        &check,
        cfg.electro.precheck_sigma,
        residual_hat,
        residual_tilde,
        gate,
    );

    let results = json!({
        "mode": "discrimination",
        "n": n,
        "replicas": cfg.run.replicas,
        "precheck": {
            "passed": check.passed,
            "min_coefficient_gap": check.min_gap,
            "max_table_stderr": check.max_combined_stderr,
            "threshold": check.threshold,
            "alpha_range_scanned": [check.alpha_lo, check.alpha_hi],
        },
        "residual_transport": residual_hat,
        "residual_static_mean": residual_tilde,
        "ratio": ratio,
        "ratio_gate": gate,
        "micro": mb.mean,
        "micro_stderr": mb.stderr,
        "reference_transport": ref_hat,
        "reference_static_mean": ref_tilde,
        "max_conservation_drift": mb.max_drift,
    });
    Ok(Outcome { verdict, failures, flags, results })
}
