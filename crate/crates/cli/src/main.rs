//! `soshydro`: experiment harness for the conservative slope dynamics.
//!
//! Exit codes: 0 the run passed its tolerances; 1 a tolerance failed (or the
//! verdict is inconclusive); 2 the configuration is invalid; 3 a numerical
//! failure (non-finite state, failed factorization, too little data).

mod config;
mod experiments;
mod report;

use clap::{Args, Parser, Subcommand};
use config::ExperimentKind;
use experiments::RunCtx;
use report::{Meta, Report};
use soshydro_core::Error;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "soshydro", version, about = "Slope-dynamics experiment harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Hydrodynamic scaling ladder against the reference PDE solve.
    Hydro(CommonArgs),
    /// Field-driven run discriminating the transport coefficient from the
    /// static mean of the mobility.
    Electro(CommonArgs),
    /// Spectral-gap scaling of the window dynamics.
    Gap(CommonArgs),
    /// Local-ergodicity and two-block diagnostics.
    Diag(CommonArgs),
    /// Tabulate the transport coefficient over a tilt grid.
    Tabulate(CommonArgs),
    /// Evolve the limiting PDE alone.
    #[command(name = "pde-solve")]
    PdeSolve(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides run.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: output.dir from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for replica parallelism (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (kind, args) = match &cli.cmd {
        Cmd::Hydro(a) => (ExperimentKind::Hydro, a),
        Cmd::Electro(a) => (ExperimentKind::Electro, a),
        Cmd::Gap(a) => (ExperimentKind::Gap, a),
        Cmd::Diag(a) => (ExperimentKind::Diag, a),
        Cmd::Tabulate(a) => (ExperimentKind::Tabulate, a),
        Cmd::PdeSolve(a) => (ExperimentKind::PdeSolve, a),
    };
    std::process::exit(run(kind, args));
}

fn run(kind: ExperimentKind, args: &CommonArgs) -> i32 {
    let started = Instant::now();
    let loaded = match config::load(&args.config) {
        Ok(l) => l,
        Err(e) => return fail(2, &format!("config: {e}")),
    };
    if let Err(e) = loaded.config.validate(kind) {
        return fail(2, &format!("config: {e}"));
    }
    let mobility = loaded.config.mobility.build().expect("validated");
    if let Some(k) = args.threads {
        if k == 0 {
            return fail(2, "config: --threads must be >= 1");
        }
        // Errors only if a global pool already exists, which is equivalent.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    let seed = args.seed.unwrap_or(loaded.config.run.seed);
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&loaded.config.output.dir));
    let ctx = RunCtx {
        config: &loaded.config,
        mobility,
        seed,
        config_hash: &loaded.hash,
        out_dir: out_dir.clone(),
        base_dir: loaded.base_dir.clone(),
    };

    let driver: experiments::Driver = match kind {
        ExperimentKind::Hydro => experiments::hydro::run,
        ExperimentKind::Electro => experiments::electro::run,
        ExperimentKind::Gap => experiments::gap::run,
        ExperimentKind::Diag => experiments::diag::run,
        ExperimentKind::Tabulate => experiments::tabulate::run,
        ExperimentKind::PdeSolve => experiments::pde_solve::run,
    };
    let outcome = match driver(&ctx) {
        Ok(o) => o,
        Err(e) => {
            let code = error_code(&e);
            return fail(code, &format!("{}: {e}", kind.name()));
        }
    };

    let report = Report {
        report_version: 1,
        experiment: kind.name(),
        verdict: outcome.verdict,
        failures: outcome.failures,
        flags: outcome.flags,
        meta: Meta {
            code_version: env!("CARGO_PKG_VERSION"),
            config_hash: loaded.hash.clone(),
            seed,
            threads: rayon::current_num_threads(),
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            runtime_seconds: started.elapsed().as_secs_f64(),
        },
        results: outcome.results,
    };
    let path = match report::write_report(&out_dir, &report) {
        Ok(p) => p,
        Err(e) => return fail(2, &format!("report: {e}")),
    };
    println!("{} verdict: {:?} ({})", kind.name(), report.verdict, path.display());
    for f in &report.failures {
        println!("  failure: {f}");
    }
    for f in &report.flags {
        println!("  flag: {f}");
    }
    report.verdict.exit_code()
}

fn fail(code: i32, msg: &str) -> i32 {
    eprintln!("error: {msg}");
    code
}

fn error_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) | Error::Parse(_) | Error::WrongTopology { .. } | Error::Boundary { .. } => 2,
        Error::NonFinite { .. } | Error::Numerical(_) | Error::InsufficientData(_) => 3,
    }
}
