//! Experiment drivers and the machinery they share: profile sampling,
//! replica-parallel microscopic runs, and tabulated-coefficient plumbing.

pub mod diag;
pub mod electro;
pub mod gap;
pub mod hydro;
pub mod pde_solve;
pub mod tabulate;

use crate::config::{Config, FieldSpec, InitKind, ProfileSpec};
use crate::report::Outcome;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use soshydro_core::gibbs::replica_rng;
use soshydro_core::lattice::SlopeConfig;
use soshydro_core::mobility::Mobility;
use soshydro_core::pde::{self, PdeParams, PdeSolution};
use soshydro_core::sim::{pair_empirical, simulate, Field, SimParams};
use soshydro_core::transport::{subtask_seed, TransportTable};
use soshydro_core::{Error, Result};
use std::path::{Path, PathBuf};

/// Everything a driver needs besides the parsed config.
pub struct RunCtx<'a> {
    pub config: &'a Config,
    pub mobility: Mobility,
    /// Effective seed (config or CLI override).
    pub seed: u64,
    /// Hash of the raw config file; stamped into every CSV artifact.
    pub config_hash: &'a str,
    pub out_dir: PathBuf,
    /// Directory relative table paths resolve against.
    pub base_dir: PathBuf,
}

pub type Driver = fn(&RunCtx) -> Result<Outcome>;

/// The weak-topology test battery. Fixed and finite so that runs are
/// reproducible and the max-metric is well-defined.
pub const BATTERY: [(&str, usize, bool); 3] =
    [("sin(2pi t)", 1, false), ("cos(2pi t)", 1, true), ("sin(4pi t)", 2, false)];

pub fn battery_eval(idx: usize, theta: f64) -> f64 {
    let (_, mode, cosine) = BATTERY[idx];
    let arg = 2.0 * std::f64::consts::PI * mode as f64 * theta;
    if cosine { arg.cos() } else { arg.sin() }
}

/// <profile, phi> = (1/M) sum_j m_j phi(j/M).
pub fn pair_grid(values: &[f64], idx: usize) -> f64 {
    let m = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(j, &v)| v * battery_eval(idx, j as f64 / m))
        .sum::<f64>()
        / m
}

/// Initial slope configuration on the ring: the profile plus (optionally)
/// unit Gaussian noise, projected onto the zero-sum fiber.
pub fn init_ring(
    kind: InitKind,
    m0: &ProfileSpec,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<SlopeConfig> {
    let mut values: Vec<f64> = (0..n).map(|i| m0.eval(i as f64 / n as f64)).collect();
    if kind == InitKind::Gaussian {
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += z;
        }
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    for v in values.iter_mut() {
        *v -= mean;
    }
    SlopeConfig::periodic(values)
}

/// Replica-averaged battery pairings of the final ring state.
pub struct MicroBattery {
    /// Mean over replicas, one entry per battery function.
    pub mean: [f64; 3],
    /// Scatter standard error over replicas.
    pub stderr: [f64; 3],
    /// Worst conserved-sum drift seen in any replica.
    pub max_drift: f64,
}

/// Runs R replicas of the ring dynamics to the horizon and pairs the final
/// state against the battery. Parallel over replicas; aggregation is in
/// replica order, so the result does not depend on the worker pool.
pub fn micro_battery(
    ctx: &RunCtx,
    n: usize,
    run_seed: u64,
    field_profile: Option<&[f64]>,
) -> Result<MicroBattery> {
    let cfg = ctx.config;
    let replicas = cfg.run.replicas;
    let params = SimParams {
        n,
        mobility: ctx.mobility.clone(),
        c_dt: cfg.run.c_dt,
        t_final: cfg.run.t,
        record_stride: usize::MAX,
        field: match field_profile {
            Some(p) => Field::Static(p.to_vec()),
            None => Field::Off,
        },
    };
    let per_replica: Vec<([f64; 3], f64)> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<([f64; 3], f64)> {
            let mut rng = replica_rng(run_seed, r as u64);
            let initial = init_ring(cfg.init.kind, &cfg.m0, n, &mut rng)?;
            let traj = simulate(&initial, &params, &mut rng)?;
            let last = SlopeConfig::periodic(traj.snapshots.last().unwrap().clone())?;
            let mut vals = [0.0; 3];
            for (i, v) in vals.iter_mut().enumerate() {
                *v = pair_empirical(&last, |t| battery_eval(i, t))?;
            }
            Ok((vals, *traj.drift_log.last().unwrap()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = [0.0; 3];
    let mut stderr = [0.0; 3];
    for i in 0..3 {
        let series: Vec<f64> = per_replica.iter().map(|(v, _)| v[i]).collect();
        let (m, s) = soshydro_core::stats::mean_stderr(&series);
        mean[i] = m;
        stderr[i] = s;
    }
    let max_drift = per_replica.iter().map(|&(_, d)| d).fold(0.0, f64::max);
    Ok(MicroBattery { mean, stderr, max_drift })
}

/// Per-N run seed: decorrelated from sibling runs, stable in the position
/// of N within the config list.
pub fn ring_run_seed(seed: u64, n_index: usize) -> u64 {
    subtask_seed(seed, 1 + n_index as u64)
}

/// Loads the transport coefficient for the configured mobility, or builds
/// the exact constant table when the mobility is constant and no path is
/// given. A table whose recorded mobility differs from the config is a hard
/// error: the fingerprint in the file makes silent mismatches impossible.
pub fn load_table(ctx: &RunCtx) -> Result<TransportTable> {
    match &ctx.config.table.path {
        Some(rel) => {
            let path = resolve(&ctx.base_dir, rel);
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Error::InvalidParameter(format!("cannot read table {}: {e}", path.display()))
            })?;
            let table = TransportTable::from_text(&text)?;
            let expected = ctx.mobility.describe();
            if table.mobility_id() != expected {
                return Err(Error::InvalidParameter(format!(
                    "table {} was tabulated for mobility '{}' but the config says '{expected}'",
                    path.display(),
                    table.mobility_id()
                )));
            }
            Ok(table)
        }
        None => match &ctx.mobility {
            Mobility::Constant { value } => {
                TransportTable::constant(ctx.mobility.describe(), *value)
            }
            _ => Err(Error::InvalidParameter("this mobility needs table.path".into())),
        },
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reference PDE solve on the configured grid: profile from m0, optional
/// static field, horizon split into whole steps no coarser than pde.dt.
pub fn pde_reference(
    ctx: &RunCtx,
    table: TransportTable,
    field: &FieldSpec,
    t_final: f64,
) -> Result<PdeSolution> {
    let cfg = ctx.config;
    let m = cfg.pde.m;
    let mut values: Vec<f64> = (0..m).map(|j| cfg.m0.eval(j as f64 / m as f64)).collect();
    let mean = values.iter().sum::<f64>() / m as f64;
    for v in values.iter_mut() {
        *v -= mean;
    }
    let n_steps = (t_final / cfg.pde.dt).ceil().max(1.0);
    let params = PdeParams {
        table,
        dt: t_final / n_steps,
        grid: m,
        field: if field.is_off() { Field::Off } else { Field::Static(field.sample(m)) },
        scheme: cfg.pde.scheme.build(),
    };
    pde::solve(&values, t_final, usize::MAX, &[], &params)
}
