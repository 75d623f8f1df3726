//! Euler-Maruyama integration of the slope SDE. All randomness enters per
//! bond and is routed to the sites through the (1,-2,1) stencil, so the ring
//! conserves the total slope and the window conserves both linear functionals
//! in exact arithmetic; only rounding can move them.
//!
//! The scaled ring dynamics advances macroscopic time with step dt = c_dt/N^4;
//! all per-step arithmetic is done in the O(1) combination c_dt * w, so no
//! intermediate hits N^4. The window dynamics is unscaled.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::lattice::{SlopeConfig, Topology};
use crate::local_fn::Observable;
use crate::mobility::Mobility;
use crate::stats::AutoCovPoint;
use crate::{Error, Result};

/// Driving field E(t, theta) for the scaled ring dynamics.
#[derive(Clone)]
pub enum Field {
    Off,
    /// Time-independent profile, pre-sampled at theta = i/N.
    Static(Vec<f64>),
    /// Fully general field; evaluated at every step.
    TimeVarying(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl Field {
    /// Samples a static profile at the N grid points i/N.
    pub fn from_profile(n: usize, f: impl Fn(f64) -> f64) -> Self {
        Field::Static((0..n).map(|i| f(i as f64 / n as f64)).collect())
    }

    pub fn is_off(&self) -> bool {
        matches!(self, Field::Off)
    }
}

/// Parameters of the scaled ring simulation.
#[derive(Clone)]
pub struct SimParams {
    pub n: usize,
    pub mobility: Mobility,
    /// Step size factor: dt = c_dt / N^4 in macroscopic units.
    pub c_dt: f64,
    /// Macroscopic horizon.
    pub t_final: f64,
    /// Steps between recorded snapshots.
    pub record_stride: usize,
    pub field: Field,
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(Error::InvalidParameter(format!("ring size {} < 8", self.n)));
        }
        if !(self.c_dt > 0.0 && self.c_dt <= 0.25) {
            return Err(Error::InvalidParameter(format!(
                "step factor {} outside (0, 0.25]",
                self.c_dt
            )));
        }
        if self.t_final < 0.0 || !self.t_final.is_finite() {
            return Err(Error::InvalidParameter("horizon must be nonnegative".into()));
        }
        if self.record_stride == 0 {
            return Err(Error::InvalidParameter("record stride must be positive".into()));
        }
        if let Field::Static(p) = &self.field {
            if p.len() != self.n {
                return Err(Error::InvalidParameter(format!(
                    "field profile length {} != N = {}",
                    p.len(),
                    self.n
                )));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.c_dt / (self.n as f64).powi(4)
    }
}

/// Recorded output of a simulation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
    /// Running maximum of the absolute drift of the conserved quantities,
    /// one entry per snapshot; monotone by construction.
    pub drift_log: Vec<f64>,
}

/// In-place integrator for the scaled ring dynamics.
pub struct Stepper {
    x: Vec<f64>,
    bond: Vec<f64>,
    mobility: Mobility,
    c_dt: f64,
    field: Field,
    inv_n2: f64,
    dt: f64,
    steps: u64,
}

impl Stepper {
    pub fn new(initial: &SlopeConfig, params: &SimParams) -> Result<Self> {
        params.validate()?;
        match initial.topology() {
            Topology::Periodic { n } if n == params.n => {}
            _ => {
                return Err(Error::InvalidParameter(
                    "initial state must be a ring of the configured size".into(),
                ))
            }
        }
        let n2 = (params.n as f64) * (params.n as f64);
        Ok(Self {
            x: initial.values().to_vec(),
            bond: vec![0.0; params.n],
            mobility: params.mobility.clone(),
            c_dt: params.c_dt,
            field: params.field.clone(),
            inv_n2: 1.0 / n2,
            dt: params.dt(),
            steps: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn config(&self) -> SlopeConfig {
        SlopeConfig::periodic(self.x.clone()).expect("ring size validated at construction")
    }

    pub fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let n = self.x.len();
        for i in 0..n {
            self.bond[i] = rng.sample(StandardNormal);
        }
        self.advance()
    }

    /// Advances one step with caller-supplied bond noises (test hook; pass
    /// zeros for the deterministic flow).
    pub fn step_given_noise(&mut self, xi: &[f64]) -> Result<()> {
        self.bond.copy_from_slice(xi);
        self.advance()
    }

    /// Turns the noise already stored in `bond` into bond increments and
    /// scatters them. b_i = -(c_dt/2) (w_i + E_i a_i / N^2) + sqrt(a_i c_dt) xi_i.
    fn advance(&mut self) -> Result<()> {
        let n = self.x.len();
        let t = self.time();
        let half = 0.5 * self.c_dt;
        for i in 0..n {
            let im = if i == 0 { n - 1 } else { i - 1 };
            let ip = if i + 1 == n { 0 } else { i + 1 };
            let win = [self.x[im], self.x[i], self.x[ip]];
            let a = self.mobility.eval(&win);
            let lap = win[0] - 2.0 * win[1] + win[2];
            let ga = self.mobility.grad(&win);
            let w = a * lap - (ga[0] - 2.0 * ga[1] + ga[2]);
            let mut bond = -half * w + (a * self.c_dt).sqrt() * self.bond[i];
            match &self.field {
                Field::Off => {}
                Field::Static(e) => bond -= half * self.inv_n2 * e[i] * a,
                Field::TimeVarying(e) => {
                    bond -= half * self.inv_n2 * e(t, i as f64 / n as f64) * a
                }
            }
            self.bond[i] = bond;
        }
        let mut probe = 0.0;
        for i in 0..n {
            let im = if i == 0 { n - 1 } else { i - 1 };
            let ip = if i + 1 == n { 0 } else { i + 1 };
            self.x[i] += self.bond[im] - 2.0 * self.bond[i] + self.bond[ip];
            probe += self.x[i];
        }
        self.steps += 1;
        if !probe.is_finite() {
            return Err(Error::NonFinite { step: self.steps });
        }
        Ok(())
    }
}

/// Deterministic drift rates of the scaled ring dynamics, in macroscopic time:
/// the second difference of the per-bond rate -(1/2)(N^4 w_i + N^2 E a_i).
/// Built bond-first, so the entries sum to zero in exact arithmetic.
pub fn drift_vector(
    cfg: &SlopeConfig,
    mobility: &Mobility,
    t: f64,
    field: &Field,
) -> Result<Vec<f64>> {
    let n = match cfg.topology() {
        Topology::Periodic { n } => n,
        Topology::Window { .. } => return Err(Error::WrongTopology { required: "periodic" }),
    };
    let n4 = (n as f64).powi(4);
    let n2 = (n as f64).powi(2);
    let mut bond = vec![0.0; n];
    for i in 0..n {
        let w = crate::local_fn::bond_current(cfg, mobility, i as i64)?;
        let mut rate = -0.5 * n4 * w;
        let win = [cfg.get(i as i64 - 1)?, cfg.get(i as i64)?, cfg.get(i as i64 + 1)?];
        match field {
            Field::Off => {}
            Field::Static(e) => rate -= 0.5 * n2 * e[i] * mobility.eval(&win),
            Field::TimeVarying(e) => {
                rate -= 0.5 * n2 * e(t, i as f64 / n as f64) * mobility.eval(&win)
            }
        }
        bond[i] = rate;
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        let im = if i == 0 { n - 1 } else { i - 1 };
        let ip = if i + 1 == n { 0 } else { i + 1 };
        out[i] = bond[im] - 2.0 * bond[i] + bond[ip];
    }
    Ok(out)
}

/// Runs the ring dynamics to the horizon, recording every `record_stride`
/// steps (the initial and final states always included).
pub fn simulate(
    initial: &SlopeConfig,
    params: &SimParams,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut stepper = Stepper::new(initial, params)?;
    let n_steps = (params.t_final / params.dt()).round() as u64;
    let sum0: f64 = stepper.state().iter().sum();
    let mut traj = Trajectory { times: vec![0.0], snapshots: vec![stepper.state().to_vec()], drift_log: vec![0.0] };
    let mut max_drift = 0.0f64;
    for step in 1..=n_steps {
        stepper.step(rng)?;
        if step % params.record_stride as u64 == 0 || step == n_steps {
            let sum: f64 = stepper.state().iter().sum();
            max_drift = max_drift.max((sum - sum0).abs());
            traj.times.push(stepper.time());
            traj.snapshots.push(stepper.state().to_vec());
            traj.drift_log.push(max_drift);
        }
    }
    Ok(traj)
}

/// In-place integrator for the unscaled window dynamics. Only interior bonds
/// carry current and noise; the two outermost sites per side move only
/// through their neighboring interior bonds.
pub struct BoxStepper {
    x: Vec<f64>,
    bond: Vec<f64>,
    mobility: Mobility,
    dt: f64,
    steps: u64,
}

impl BoxStepper {
    /// `dt` must respect the explicit-stability budget dt <= 0.25/(96 a*).
    pub fn stability_limit(mobility: &Mobility) -> f64 {
        0.25 / (96.0 * mobility.bounds().1)
    }

    pub fn new(initial: &SlopeConfig, mobility: Mobility, dt: f64) -> Result<Self> {
        let l = initial
            .half_width()
            .ok_or(Error::WrongTopology { required: "window" })?;
        let limit = Self::stability_limit(&mobility);
        if !(dt > 0.0 && dt <= limit) {
            return Err(Error::InvalidParameter(format!(
                "window step {dt} outside (0, {limit:.3e}]"
            )));
        }
        Ok(Self {
            x: initial.values().to_vec(),
            bond: vec![0.0; 2 * l - 1],
            mobility,
            dt,
            steps: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn config(&self) -> SlopeConfig {
        SlopeConfig::window(self.x.clone()).expect("window size validated at construction")
    }

    pub fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        for b in self.bond.iter_mut() {
            *b = rng.sample(StandardNormal);
        }
        self.advance()
    }

    pub fn step_given_noise(&mut self, xi: &[f64]) -> Result<()> {
        self.bond.copy_from_slice(xi);
        self.advance()
    }

    fn advance(&mut self) -> Result<()> {
        let nb = self.bond.len();
        let half = 0.5 * self.dt;
        for k in 0..nb {
            // Bond k sits at flat site k+1; stencil reads flat k, k+1, k+2.
            let win = [self.x[k], self.x[k + 1], self.x[k + 2]];
            let a = self.mobility.eval(&win);
            let lap = win[0] - 2.0 * win[1] + win[2];
            let ga = self.mobility.grad(&win);
            let w = a * lap - (ga[0] - 2.0 * ga[1] + ga[2]);
            self.bond[k] = -half * w + (a * self.dt).sqrt() * self.bond[k];
        }
        for k in 0..nb {
            let b = self.bond[k];
            self.x[k] += b;
            self.x[k + 1] -= 2.0 * b;
            self.x[k + 2] += b;
        }
        self.steps += 1;
        let probe: f64 = self.x.iter().sum();
        if !probe.is_finite() {
            return Err(Error::NonFinite { step: self.steps });
        }
        Ok(())
    }
}

/// Runs the window dynamics, recording snapshots like [`simulate`].
pub fn box_simulate(
    initial: &SlopeConfig,
    mobility: Mobility,
    dt: f64,
    n_steps: u64,
    record_stride: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    if record_stride == 0 {
        return Err(Error::InvalidParameter("record stride must be positive".into()));
    }
    let mut stepper = BoxStepper::new(initial, mobility, dt)?;
    let p0 = initial.conserved_pair()?;
    let mut traj = Trajectory { times: vec![0.0], snapshots: vec![stepper.state().to_vec()], drift_log: vec![0.0] };
    let mut max_drift = 0.0f64;
    for step in 1..=n_steps {
        stepper.step(rng)?;
        if step % record_stride as u64 == 0 || step == n_steps {
            let p = stepper.config().conserved_pair()?;
            max_drift = max_drift
                .max((p.block_mean - p0.block_mean).abs())
                .max((p.linear_mean - p0.linear_mean).abs());
            traj.times.push(stepper.time());
            traj.snapshots.push(stepper.state().to_vec());
            traj.drift_log.push(max_drift);
        }
    }
    Ok(traj)
}

/// Time series of observables along one window trajectory.
#[derive(Debug, Clone)]
pub struct ObservableSeries {
    pub times: Vec<f64>,
    /// values[k] is the series of observable k.
    pub values: Vec<Vec<f64>>,
    pub max_drift: f64,
}

/// Runs the window dynamics and evaluates `observables` at the center every
/// `record_stride` steps, without storing snapshots.
pub fn box_observable_series(
    initial: &SlopeConfig,
    mobility: Mobility,
    dt: f64,
    n_steps: u64,
    record_stride: usize,
    observables: &[&dyn Observable],
    rng: &mut ChaCha8Rng,
) -> Result<ObservableSeries> {
    if record_stride == 0 {
        return Err(Error::InvalidParameter("record stride must be positive".into()));
    }
    let mut stepper = BoxStepper::new(initial, mobility, dt)?;
    let p0 = initial.conserved_pair()?;
    let mut out = ObservableSeries {
        times: Vec::new(),
        values: vec![Vec::new(); observables.len()],
        max_drift: 0.0,
    };
    let record = |stepper: &BoxStepper, out: &mut ObservableSeries| -> Result<()> {
        let cfg = stepper.config();
        for (k, obs) in observables.iter().enumerate() {
            out.values[k].push(obs.eval(&cfg, 0)?);
        }
        out.times.push(stepper.time());
        let p = cfg.conserved_pair()?;
        out.max_drift = out
            .max_drift
            .max((p.block_mean - p0.block_mean).abs())
            .max((p.linear_mean - p0.linear_mean).abs());
        Ok(())
    };
    record(&stepper, &mut out)?;
    for _ in 0..n_steps {
        stepper.step(rng)?;
        if stepper.steps() % record_stride as u64 == 0 {
            record(&stepper, &mut out)?;
        }
    }
    Ok(out)
}

/// Empirical pairing (1/N) sum_i phi(i/N) x_i of a ring configuration against
/// a macroscopic test function.
pub fn pair_empirical(cfg: &SlopeConfig, phi: impl Fn(f64) -> f64) -> Result<f64> {
    let n = match cfg.topology() {
        Topology::Periodic { n } => n,
        Topology::Window { .. } => return Err(Error::WrongTopology { required: "periodic" }),
    };
    let mut acc = 0.0;
    for (i, &x) in cfg.values().iter().enumerate() {
        acc += phi(i as f64 / n as f64) * x;
    }
    Ok(acc / n as f64)
}

/// Stationary autocovariance of one observable under the window dynamics:
/// runs a trajectory from `initial` and estimates C(tau) on the lag grid
/// with batch-mean error bars. Lags are in units of recorded samples.
#[allow(clippy::too_many_arguments)]
pub fn box_autocorrelation(
    initial: &SlopeConfig,
    mobility: Mobility,
    dt: f64,
    n_steps: u64,
    record_stride: usize,
    observable: &dyn Observable,
    lags: &[usize],
    n_batches: usize,
    known_mean: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AutoCovPoint>> {
    let series = box_observable_series(
        initial,
        mobility,
        dt,
        n_steps,
        record_stride,
        &[observable],
        rng,
    )?;
    crate::stats::autocovariance(&series.values[0], lags, n_batches, known_mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::{replica_rng, GrandCanonical, RingFiber};
    use crate::stats::OnlineStats;

    fn ring_params(n: usize, mobility: Mobility) -> SimParams {
        SimParams {
            n,
            mobility,
            c_dt: 0.1,
            t_final: 0.0,
            record_stride: 1,
            field: Field::Off,
        }
    }

    #[test]
    fn constant_state_is_fixed_point_of_the_flow() {
        let cfg = SlopeConfig::periodic(vec![0.7; 12]).unwrap();
        let params = ring_params(12, Mobility::bump(0.2).unwrap());
        let mut st = Stepper::new(&cfg, &params).unwrap();
        let zeros = vec![0.0; 12];
        for _ in 0..10 {
            st.step_given_noise(&zeros).unwrap();
        }
        for &v in st.state() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_mobility_drift_is_negated_fourth_difference() {
        let mut rng = replica_rng(5, 0);
        let cfg = GrandCanonical { alpha: 0.0 }.sample_ring(&mut rng, 16).unwrap();
        let mob = Mobility::constant(1.0).unwrap();
        let drift = drift_vector(&cfg, &mob, 0.0, &Field::Off).unwrap();
        let n4 = 16.0f64.powi(4);
        for i in 0..16i64 {
            let f4 = cfg.get(i - 2).unwrap() - 4.0 * cfg.get(i - 1).unwrap()
                + 6.0 * cfg.get(i).unwrap()
                - 4.0 * cfg.get(i + 1).unwrap()
                + cfg.get(i + 2).unwrap();
            let expect = -0.5 * n4 * f4;
            assert!(
                (drift[i as usize] - expect).abs() < 1e-9 * n4,
                "site {i}: {} vs {expect}",
                drift[i as usize]
            );
        }
        let total: f64 = drift.iter().sum();
        let scale: f64 = drift.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(total.abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn one_step_noise_variance_matches_stencil_weights() {
        // From x = 0 with a == 1 each site gets variance (1+4+1) c_dt.
        let n = 16;
        let params = ring_params(n, Mobility::constant(1.0).unwrap());
        let mut rng = replica_rng(9, 0);
        let mut acc = OnlineStats::new();
        let zero = SlopeConfig::periodic(vec![0.0; n]).unwrap();
        for _ in 0..20_000 {
            let mut st = Stepper::new(&zero, &params).unwrap();
            st.step(&mut rng).unwrap();
            for &v in st.state() {
                acc.push(v * v);
            }
        }
        let expect = 6.0 * params.c_dt;
        assert!(
            (acc.mean() - expect).abs() < 5.0 * acc.stderr(),
            "var {} vs {expect} (se {})",
            acc.mean(),
            acc.stderr()
        );
    }

    #[test]
    fn ring_sum_is_conserved_through_noise() {
        let mut rng = replica_rng(13, 0);
        let cfg = GrandCanonical { alpha: 0.5 }.sample_ring(&mut rng, 32).unwrap();
        let sum0: f64 = cfg.values().iter().sum();
        let params = ring_params(32, Mobility::bump(0.1).unwrap());
        let mut st = Stepper::new(&cfg, &params).unwrap();
        for _ in 0..20_000 {
            st.step(&mut rng).unwrap();
        }
        let sum: f64 = st.state().iter().sum();
        assert!(((sum - sum0) / sum0).abs() < 1e-11, "drift {}", sum - sum0);
    }

    #[test]
    fn box_conserves_both_functionals() {
        let mut rng = replica_rng(21, 0);
        let vals: Vec<f64> = (0..13).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let cfg = SlopeConfig::window(vals).unwrap();
        let p0 = cfg.conserved_pair().unwrap();
        let mob = Mobility::bump(0.3).unwrap();
        let dt = BoxStepper::stability_limit(&mob);
        let mut st = BoxStepper::new(&cfg, mob, dt).unwrap();
        for _ in 0..50_000 {
            st.step(&mut rng).unwrap();
        }
        let p = st.config().conserved_pair().unwrap();
        assert!((p.block_mean - p0.block_mean).abs() < 1e-11);
        assert!((p.linear_mean - p0.linear_mean).abs() < 1e-11);
    }

    #[test]
    fn box_equilibrium_matches_conditional_covariance() {
        // a == 1, l=3: time-averaged x_0^2 must match the fiber projector's
        // center entry.
        let l = 3usize;
        let mut rng = replica_rng(33, 0);
        let fiber = crate::gibbs::CanonicalSpec {
            alpha: 0.0,
            half_width: l,
            pair: crate::lattice::ConservedPair { block_mean: 0.0, linear_mean: 0.0 },
        };
        let start = fiber.sample(&mut rng).unwrap();
        let mob = Mobility::constant(1.0).unwrap();
        let dt = BoxStepper::stability_limit(&mob);
        let mut st = BoxStepper::new(&start, mob, dt).unwrap();
        let mut acc = OnlineStats::new();
        let mut block = Vec::new();
        for step in 0..800_000u64 {
            st.step(&mut rng).unwrap();
            if step % 50 == 0 {
                block.push(st.state()[l] * st.state()[l]);
            }
        }
        for chunk in block.chunks(block.len() / 16) {
            acc.push(chunk.iter().sum::<f64>() / chunk.len() as f64);
        }
        let p = crate::dense::fiber_projector(l).unwrap();
        let expect = p[(l, l)];
        assert!(
            (acc.mean() - expect).abs() < 4.0 * acc.stderr(),
            "x0^2 {} vs {expect} (se {})",
            acc.mean(),
            acc.stderr()
        );
    }

    #[test]
    fn trajectories_are_bit_reproducible() {
        let mut rng1 = replica_rng(77, 3);
        let mut rng2 = replica_rng(77, 3);
        let cfg = RingFiber { alpha: 0.0, n: 16 }.sample(&mut rng1).unwrap();
        let cfg2 = RingFiber { alpha: 0.0, n: 16 }.sample(&mut rng2).unwrap();
        assert_eq!(cfg.values(), cfg2.values());
        let mut params = ring_params(16, Mobility::bump(0.1).unwrap());
        params.t_final = 200.0 * params.dt();
        let t1 = simulate(&cfg, &params, &mut rng1).unwrap();
        let t2 = simulate(&cfg2, &params, &mut rng2).unwrap();
        assert_eq!(t1.snapshots, t2.snapshots);
    }

    #[test]
    fn unstable_step_is_reported_not_propagated() {
        // A large constant mobility with the maximal step factor blows up;
        // the stepper must fail with the step index instead of emitting NaNs.
        let cfg = SlopeConfig::periodic(vec![0.0, 1.0, -1.0, 0.5, -0.5, 0.25, -0.25, 0.0]).unwrap();
        let mut params = ring_params(8, Mobility::constant(64.0).unwrap());
        params.c_dt = 0.25;
        let mut st = Stepper::new(&cfg, &params).unwrap();
        let mut rng = replica_rng(1, 0);
        let mut failed = false;
        for _ in 0..4000 {
            match st.step(&mut rng) {
                Ok(()) => {}
                Err(Error::NonFinite { step }) => {
                    assert!(step > 0);
                    failed = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e:?}"),
            }
        }
        assert!(failed, "expected the unstable scheme to be caught");
    }

    #[test]
    fn empirical_pairing_examples() {
        let n = 64;
        let vals: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64).sin()).collect();
        let cfg = SlopeConfig::periodic(vals).unwrap();
        let v = pair_empirical(&cfg, |th| (2.0 * std::f64::consts::PI * th).sin()).unwrap();
        assert!((v - 0.5).abs() < 1e-3);
        let mut rng = replica_rng(2, 0);
        let fib = RingFiber { alpha: 0.0, n: 32 }.sample(&mut rng).unwrap();
        let c = pair_empirical(&fib, |_| 1.0).unwrap();
        assert!(c.abs() < 1e-14);
    }

    #[test]
    fn time_varying_field_reduces_to_static_at_fixed_time() {
        let cfg = SlopeConfig::periodic(vec![0.1; 16]).unwrap();
        let mob = Mobility::constant(1.0).unwrap();
        let f_static = Field::from_profile(16, |th| (2.0 * std::f64::consts::PI * th).sin());
        let f_dyn = Field::TimeVarying(Arc::new(|_t, th: f64| {
            (2.0 * std::f64::consts::PI * th).sin()
        }));
        let d1 = drift_vector(&cfg, &mob, 0.0, &f_static).unwrap();
        let d2 = drift_vector(&cfg, &mob, 0.0, &f_dyn).unwrap();
        for (a, b) in d1.iter().zip(&d2) {
            assert!((a - b).abs() < 1e-12);
        }
        // Constant slopes + nonzero field: drift need not vanish, but must
        // still sum to zero.
        let s: f64 = d1.iter().sum();
        let m = d1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(s.abs() <= 1e-12 * m.max(1.0));
    }
}
