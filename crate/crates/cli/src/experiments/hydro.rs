//! Hydrodynamic scaling run: replica-averaged final-state pairings of the
//! ring dynamics against the reference PDE solve, across a ladder of ring
//! sizes. The weak metric is the max over the fixed test-function battery.

use super::{load_table, micro_battery, pair_grid, pde_reference, ring_run_seed, RunCtx, BATTERY};
use crate::config::MobilitySpec;
use crate::report::{fmt_f64, write_csv, Outcome};
use serde::Serialize;
use serde_json::json;
use soshydro_core::Result;

#[derive(Debug, Serialize)]
pub struct SizeRow {
    pub n: usize,
    /// Per-battery-function |micro - pde|.
    pub errors: [f64; 3],
    pub micro: [f64; 3],
    pub micro_stderr: [f64; 3],
    pub reference: [f64; 3],
    /// Max over the battery: the weak metric.
    pub weak_error: f64,
    pub max_conservation_drift: f64,
}

pub struct HydroData {
    pub rows: Vec<SizeRow>,
    pub monotone: bool,
    pub final_error: f64,
    pub threshold: f64,
    pub reference_flags: Vec<String>,
}

/// The comparison core, shared with the field-free reduction mode of the
/// electromigration driver.
pub fn run_ladder(ctx: &RunCtx, field: Option<&crate::config::FieldSpec>) -> Result<HydroData> {
    let cfg = ctx.config;
    let table = load_table(ctx)?;
    let field_spec = field.cloned().unwrap_or(crate::config::FieldSpec::Off);
    let sol = pde_reference(ctx, table, &field_spec, cfg.run.t)?;
    let reference: [f64; 3] = std::array::from_fn(|i| pair_grid(sol.final_profile(), i));
    let mut reference_flags = Vec::new();
    if sol.clamped {
        reference_flags.push("pde reference: coefficient queried outside the tabulated range (clamped)".into());
    }
    if !sol.stability_ok {
        reference_flags.push("pde reference: empirical sup-norm growth bound violated".into());
    }

    let mut rows = Vec::new();
    for (ni, &n) in cfg.run.n.iter().enumerate() {
        let field_profile = (!field_spec.is_off()).then(|| field_spec.sample(n));
        let mb = micro_battery(ctx, n, ring_run_seed(ctx.seed, ni), field_profile.as_deref())?;
        let errors: [f64; 3] = std::array::from_fn(|i| (mb.mean[i] - reference[i]).abs());
        let weak_error = errors.iter().cloned().fold(0.0, f64::max);
        rows.push(SizeRow {
            n,
            errors,
            micro: mb.mean,
            micro_stderr: mb.stderr,
            reference,
            weak_error,
            max_conservation_drift: mb.max_drift,
        });
    }
    let monotone = rows.windows(2).all(|w| w[1].weak_error < w[0].weak_error);
    let final_error = rows.last().map(|r| r.weak_error).unwrap_or(f64::NAN);
    let threshold = match cfg.mobility {
        MobilitySpec::Constant { .. } => 0.05,
        MobilitySpec::Bump { .. } => 0.08,
    };
    Ok(HydroData { rows, monotone, final_error, threshold, reference_flags })
}

pub fn emit_csv(ctx: &RunCtx, rows: &[SizeRow], name: &str) -> Result<()> {
    let header = ["n", "phi", "micro", "micro_stderr", "reference", "error"];
    let mut out = Vec::new();
    for row in rows {
        for i in 0..3 {
            out.push(vec![
                row.n.to_string(),
                BATTERY[i].0.to_string(),
                fmt_f64(row.micro[i]),
                fmt_f64(row.micro_stderr[i]),
                fmt_f64(row.reference[i]),
                fmt_f64(row.errors[i]),
            ]);
        }
    }
    write_csv(&ctx.out_dir, name, ctx.config_hash, &header, &out)?;
    Ok(())
}

pub fn run(ctx: &RunCtx) -> Result<Outcome> {
    let data = run_ladder(ctx, None)?;
    emit_csv(ctx, &data.rows, "hydro_errors.csv")?;

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
        "sizes": data.rows,
        "monotone_in_n": data.monotone,
        "final_weak_error": data.final_error,
        "threshold": data.threshold,
        "battery": BATTERY.iter().map(|b| b.0).collect::<Vec<_>>(),
    });
    Ok(Outcome::from_failures(failures, data.reference_flags, results))
}
