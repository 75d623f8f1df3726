//! Standalone PDE solve: evolve m0 under the tabulated (or constant)
//! coefficient to the horizon, dump the trajectory's checkpoints and weak
//! residuals against the test battery.

use super::{load_table, pde_reference, RunCtx, BATTERY};
use crate::report::{fmt_f64, write_csv, Outcome};
use serde_json::json;
use soshydro_core::Result;

pub fn run(ctx: &RunCtx) -> Result<Outcome> {
    let cfg = ctx.config;
    let table = load_table(ctx)?;
    let sol = pde_reference(ctx, table, &cfg.field, cfg.run.t)?;

    let m = cfg.pde.m;
    let final_profile = sol.final_profile();
    let rows: Vec<Vec<String>> = (0..m)
        .map(|j| vec![fmt_f64(j as f64 / m as f64), fmt_f64(final_profile[j])])
        .collect();
    write_csv(&ctx.out_dir, "pde_profile.csv", ctx.config_hash, &["theta", "m"], &rows)?;

    let pair_rows: Vec<Vec<String>> = (0..3)
        .map(|i| vec![BATTERY[i].0.to_string(), fmt_f64(super::pair_grid(final_profile, i))])
        .collect();
    write_csv(&ctx.out_dir, "pde_pairings.csv", ctx.config_hash, &["phi", "pairing"], &pair_rows)?;

    let mut failures = Vec::new();
    let mut flags = Vec::new();
    if sol.max_mass_drift > 1e-8 {
        failures.push(format!("mass drifted by {:.3e} (> 1e-8)", sol.max_mass_drift));
    }
    if sol.clamped {
        flags.push("coefficient queried outside the tabulated range (clamped)".into());
    }
    if !sol.stability_ok {
        flags.push("empirical sup-norm growth bound violated".into());
    }

    let results = json!({
        "grid": m,
        "t_final": cfg.run.t,
        "mass_initial": sol.mass.first(),
        "mass_final": sol.mass.last(),
        "max_mass_drift": sol.max_mass_drift,
        "dissipated_energy": sol.energy,
        "stability_ok": sol.stability_ok,
        "clamped": sol.clamped,
        "pairings": (0..3).map(|i| json!({
            "phi": BATTERY[i].0,
            "value": super::pair_grid(final_profile, i),
        })).collect::<Vec<_>>(),
    });
    Ok(Outcome::from_failures(failures, flags, results))
}
