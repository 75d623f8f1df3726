//! Experiment configuration: a versioned TOML schema.
//!
//! Every run is reproducible from (config file, seed): the effective seed is
//! `run.seed` unless overridden on the command line, and the FNV-1a hash of
//! the raw config bytes is recorded in every artifact the run writes.

use serde::Deserialize;
use soshydro_core::mobility::Mobility;
use soshydro_core::pde::Scheme;
use soshydro_core::{Error, Result};
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

/// Default cap on ring sizes. Steps scale like T N^4 / c_dt, so anything
/// beyond this is opt-in via `run.max_n`.
pub const DEFAULT_MAX_N: usize = 256;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    /// Optional redundancy check: when present it must match the subcommand.
    #[serde(default)]
    pub experiment: Option<String>,
    pub mobility: MobilitySpec,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub m0: ProfileSpec,
    #[serde(default)]
    pub field: FieldSpec,
    #[serde(default)]
    pub pde: PdeSection,
    #[serde(default)]
    pub table: TableSection,
    #[serde(default)]
    pub electro: ElectroSection,
    #[serde(default)]
    pub gap: GapSection,
    #[serde(default)]
    pub diag: DiagSection,
    #[serde(default)]
    pub tabulate: TabulateSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MobilitySpec {
    Constant { value: f64 },
    Bump { beta: f64 },
}

impl MobilitySpec {
    pub fn build(&self) -> Result<Mobility> {
        match self {
            MobilitySpec::Constant { value } => Mobility::constant(*value),
            MobilitySpec::Bump { beta } => Mobility::bump(*beta),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Ring sizes, ascending.
    pub n: Vec<usize>,
    pub replicas: usize,
    /// Macroscopic horizon.
    pub t: f64,
    /// Step factor: dt = c_dt / N^4.
    pub c_dt: f64,
    pub seed: u64,
    pub max_n: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { n: vec![64], replicas: 16, t: 0.01, c_dt: 0.1, seed: 1, max_n: DEFAULT_MAX_N }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// x_i ~ N(m0(i/N), 1), then projected to sum zero.
    #[default]
    Gaussian,
    /// x_i = m0(i/N), projected to sum zero.
    Deterministic,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InitSection {
    pub kind: InitKind,
}

/// Mean-zero profile from Fourier coefficients: entry k-1 of `sin` (`cos`)
/// multiplies sin(2 pi k theta) (cos(2 pi k theta)). No constant term, so the
/// profile integrates to zero by construction.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSpec {
    pub sin: Vec<f64>,
    pub cos: Vec<f64>,
}

impl ProfileSpec {
    pub fn eval(&self, theta: f64) -> f64 {
        let mut acc = 0.0;
        for (i, &c) in self.sin.iter().enumerate() {
            acc += c * (2.0 * std::f64::consts::PI * (i + 1) as f64 * theta).sin();
        }
        for (i, &c) in self.cos.iter().enumerate() {
            acc += c * (2.0 * std::f64::consts::PI * (i + 1) as f64 * theta).cos();
        }
        acc
    }

    /// Largest possible |m0|, by the triangle inequality.
    pub fn amplitude_bound(&self) -> f64 {
        self.sin.iter().chain(&self.cos).map(|c| c.abs()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for &c in self.sin.iter().chain(&self.cos) {
            if !c.is_finite() {
                return Err(Error::InvalidParameter("m0 coefficients must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    #[default]
    Off,
    /// E(theta) = amplitude * sin(2 pi mode theta), time-independent.
    Sine { amplitude: f64, mode: usize },
}

impl FieldSpec {
    pub fn is_off(&self) -> bool {
        matches!(self, FieldSpec::Off)
    }

    pub fn eval(&self, theta: f64) -> f64 {
        match self {
            FieldSpec::Off => 0.0,
            FieldSpec::Sine { amplitude, mode } => {
                amplitude * (2.0 * std::f64::consts::PI * *mode as f64 * theta).sin()
            }
        }
    }

    /// Field sampled at j/n for j in 0..n.
    pub fn sample(&self, n: usize) -> Vec<f64> {
        (0..n).map(|j| self.eval(j as f64 / n as f64)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let FieldSpec::Sine { amplitude, mode } = self {
            if !amplitude.is_finite() {
                return Err(Error::InvalidParameter("field amplitude must be finite".into()));
            }
            if *mode == 0 {
                return Err(Error::InvalidParameter(
                    "field mode 0 would break mass conservation; use mode >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeSection {
    /// Grid size (even, >= 16).
    pub m: usize,
    /// Requested step; the solver uses T / ceil(T/dt) so the horizon is hit
    /// exactly.
    pub dt: f64,
    pub scheme: SchemeSpec,
}

impl Default for PdeSection {
    fn default() -> Self {
        Self { m: 256, dt: 1e-6, scheme: SchemeSpec::BackwardEuler }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeSpec {
    BackwardEuler,
    Imex,
}

impl SchemeSpec {
    pub fn build(self) -> Scheme {
        match self {
            SchemeSpec::BackwardEuler => Scheme::BackwardEulerFrozen,
            SchemeSpec::Imex => Scheme::ImexStabilized,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TableSection {
    /// Path to a tabulated transport coefficient, relative to the config
    /// file's directory unless absolute. Required for bump mobility in the
    /// hydro/electro/pde-solve experiments.
    pub path: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElectroSection {
    /// Gate on residual(transport) / residual(static-mean); 1.0 demands a
    /// strict win, smaller values demand a margin.
    pub ratio_gate: f64,
    /// The coefficient gap must exceed this many combined standard errors
    /// for the discrimination verdict to be meaningful.
    pub precheck_sigma: f64,
    /// Extra slack added around the profile range when scanning the gap.
    pub alpha_margin: f64,
}

impl Default for ElectroSection {
    fn default() -> Self {
        Self { ratio_gate: 1.0, precheck_sigma: 5.0, alpha_margin: 0.2 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapSection {
    /// Window half-widths, ascending, within [2, 8].
    pub l: Vec<usize>,
    pub replicas: usize,
    /// Per-replica horizon and recording interval in units of the expected
    /// slowest relaxation time at each l (which scales like l^4).
    pub horizon_taus: f64,
    pub record_per_tau: usize,
    pub lag_taus: f64,
    /// Fit window on the normalized autocorrelation.
    pub fit_lo: f64,
    pub fit_hi: f64,
    pub expected_exponent: f64,
    pub exponent_tolerance: f64,
    /// Relative tolerance for the dense-eigensolve cross-check (constant
    /// mobility only).
    pub dense_tolerance: f64,
}

impl Default for GapSection {
    fn default() -> Self {
        Self {
            l: vec![2, 3, 4, 5, 6],
            replicas: 24,
            horizon_taus: 40.0,
            record_per_tau: 25,
            lag_taus: 3.0,
            fit_lo: 0.05,
            fit_hi: 0.6,
            expected_exponent: -4.0,
            exponent_tolerance: 0.7,
            dense_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DiagObservable {
    /// f = a(x_{i-1}, x_i, x_{i+1}); the quadrature prediction is the tilted
    /// mean of the mobility.
    #[default]
    Mobility,
    /// f = x_i; the quadrature prediction is the tilt itself. The statistic
    /// is pure sampling noise, useful as a null check.
    Site,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagSection {
    /// Block sizes, ascending.
    pub blocks: Vec<usize>,
    /// Macroscopic block separations for the two-block statistic.
    pub separations: Vec<f64>,
    /// Target number of recorded snapshots per replica.
    pub snapshots: usize,
    /// Weight function index: sin(2 pi mode theta).
    pub phi_mode: usize,
    pub observable: DiagObservable,
}

impl Default for DiagSection {
    fn default() -> Self {
        Self {
            blocks: vec![4, 16],
            separations: vec![0.1, 0.25, 0.5],
            snapshots: 400,
            phi_mode: 1,
            observable: DiagObservable::Mobility,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TabulateSection {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub points: usize,
    pub samples: u64,
    pub batches: usize,
    pub quad_order: usize,
    /// Width parameter of the tanh basis.
    pub basis_s: usize,
    /// File name of the emitted table, inside the output directory.
    pub out_table: String,
}

impl Default for TabulateSection {
    fn default() -> Self {
        Self {
            alpha_min: -3.0,
            alpha_max: 3.0,
            points: 25,
            samples: 200_000,
            batches: 16,
            quad_order: 96,
            basis_s: 2,
            out_table: "table.txt".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Hydro,
    Electro,
    Gap,
    Diag,
    Tabulate,
    PdeSolve,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Hydro => "hydro",
            ExperimentKind::Electro => "electro",
            ExperimentKind::Gap => "gap",
            ExperimentKind::Diag => "diag",
            ExperimentKind::Tabulate => "tabulate",
            ExperimentKind::PdeSolve => "pde-solve",
        }
    }
}

/// Parsed config plus everything derived from the file itself.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: Config,
    /// FNV-1a of the raw file bytes, fixed-width hex.
    pub hash: String,
    /// Directory of the config file; relative table paths resolve against it.
    pub base_dir: std::path::PathBuf,
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::InvalidParameter(format!("cannot read config {}: {e}", path.display())))?;
    let hash = format!("{:016x}", soshydro_core::fnv1a64(&bytes));
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Parse(format!("config {} is not UTF-8", path.display())))?;
    let config: Config =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("config parse error: {e}")))?;
    if config.version != CONFIG_VERSION {
        return Err(Error::InvalidParameter(format!(
            "config version {} unsupported (expected {CONFIG_VERSION})",
            config.version
        )));
    }
    let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok(LoadedConfig { config, hash, base_dir })
}

impl Config {
    /// Schema-level checks shared by every experiment, then per-experiment
    /// requirements. All failures here are configuration errors.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if let Some(declared) = &self.experiment {
            if declared != kind.name() {
                return Err(Error::InvalidParameter(format!(
                    "config declares experiment '{declared}' but '{}' was requested",
                    kind.name()
                )));
            }
        }
        self.mobility.build()?;
        self.m0.validate()?;
        self.field.validate()?;
        match kind {
            ExperimentKind::Hydro | ExperimentKind::Electro => {
                self.validate_ring_run()?;
                if matches!(self.mobility, MobilitySpec::Bump { .. }) && self.table.path.is_none() {
                    return Err(Error::InvalidParameter(
                        "bump mobility needs table.path (run `soshydro tabulate` first)".into(),
                    ));
                }
                if kind == ExperimentKind::Electro && !(self.electro.ratio_gate > 0.0) {
                    return Err(Error::InvalidParameter("electro.ratio_gate must be positive".into()));
                }
                self.validate_pde()?;
            }
            ExperimentKind::Gap => {
                let l = &self.gap.l;
                if l.is_empty() || !l.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::InvalidParameter("gap.l must be nonempty and ascending".into()));
                }
                if l.iter().any(|&v| !(2..=8).contains(&v)) {
                    return Err(Error::InvalidParameter("gap.l entries must lie in [2, 8]".into()));
                }
                if self.gap.replicas < 4 {
                    return Err(Error::InvalidParameter("gap.replicas must be >= 4".into()));
                }
                if !(self.gap.fit_lo > 0.0 && self.gap.fit_lo < self.gap.fit_hi && self.gap.fit_hi < 1.0) {
                    return Err(Error::InvalidParameter("gap fit window must satisfy 0 < lo < hi < 1".into()));
                }
            }
            ExperimentKind::Diag => {
                self.validate_ring_run()?;
                let b = &self.diag.blocks;
                if b.is_empty() || !b.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::InvalidParameter("diag.blocks must be nonempty and ascending".into()));
                }
                let n0 = self.run.n[0];
                if b.iter().any(|&k| k < 3 || 2 * k > n0) {
                    return Err(Error::InvalidParameter(format!(
                        "diag.blocks must fit the ring: 3 <= k <= N/2 = {}",
                        n0 / 2
                    )));
                }
                if self.diag.separations.iter().any(|&a| !(0.0 < a && a <= 0.5)) {
                    return Err(Error::InvalidParameter("diag.separations must lie in (0, 0.5]".into()));
                }
                if self.diag.snapshots < 2 {
                    return Err(Error::InvalidParameter("diag.snapshots must be >= 2".into()));
                }
            }
            ExperimentKind::Tabulate => {
                let t = &self.tabulate;
                if !(t.alpha_min < t.alpha_max) || t.points < 2 {
                    return Err(Error::InvalidParameter("tabulate grid must be increasing with >= 2 points".into()));
                }
                if t.samples == 0 || t.batches < 2 {
                    return Err(Error::InvalidParameter("tabulate needs samples > 0 and batches >= 2".into()));
                }
                if t.out_table.is_empty() || t.out_table.contains(std::path::is_separator) {
                    return Err(Error::InvalidParameter("tabulate.out_table must be a bare file name".into()));
                }
            }
            ExperimentKind::PdeSolve => {
                self.validate_pde()?;
                if matches!(self.mobility, MobilitySpec::Bump { .. }) && self.table.path.is_none() {
                    return Err(Error::InvalidParameter(
                        "bump mobility needs table.path (run `soshydro tabulate` first)".into(),
                    ));
                }
                if !(self.run.t > 0.0) {
                    return Err(Error::InvalidParameter("run.t must be positive".into()));
                }
            }
        }
        Ok(())
    }

    fn validate_ring_run(&self) -> Result<()> {
        let r = &self.run;
        if r.n.is_empty() || !r.n.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidParameter("run.n must be nonempty and ascending".into()));
        }
        if r.n.iter().any(|&n| n < 8) {
            return Err(Error::InvalidParameter("run.n entries must be >= 8".into()));
        }
        if let Some(&n) = r.n.iter().find(|&&n| n > r.max_n) {
            return Err(Error::InvalidParameter(format!(
                "N = {n} exceeds the cap {} (raise run.max_n to opt in)",
                r.max_n
            )));
        }
        if r.replicas < 2 {
            return Err(Error::InvalidParameter("run.replicas must be >= 2 for scatter error bars".into()));
        }
        if !(r.t >= 0.0 && r.t.is_finite()) {
            return Err(Error::InvalidParameter("run.t must be nonnegative".into()));
        }
        if !(r.c_dt > 0.0 && r.c_dt <= 0.25) {
            return Err(Error::InvalidParameter("run.c_dt must lie in (0, 0.25]".into()));
        }
        Ok(())
    }

    fn validate_pde(&self) -> Result<()> {
        let p = &self.pde;
        if p.m < 16 || p.m % 2 != 0 {
            return Err(Error::InvalidParameter("pde.m must be even and >= 16".into()));
        }
        if !(p.dt > 0.0 && p.dt.is_finite()) {
            return Err(Error::InvalidParameter("pde.dt must be positive".into()));
        }
        Ok(())
    }
}
