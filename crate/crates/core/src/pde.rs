//! Conservative solver for the limiting fourth-order equation
//! dm/dt = -(1/2) D^2( a_hat(m) (D^2 m + E) ) on the periodic unit circle,
//! with weak-form and energy diagnostics.
//!
//! One backward-Euler step freezes the coefficient at the current profile
//! and solves (I + (dt/2) D^2 A D^2) m+ = m - (dt/2) D^2(A E), rewritten in
//! increment form so the right-hand side is structurally mean-free and the
//! discrete mass error stays at solver roundoff. The linear system is
//! symmetric positive definite, pentadiagonal plus periodic corners, and is
//! solved by a banded Cholesky factorization of the corner-stripped matrix
//! with a rank-4 correction for the wrap. A stabilized IMEX variant with the
//! constant splitting coefficient max a_hat shares the same right-hand side
//! and factors its matrix once.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Vector4};

use crate::sim::Field;
use crate::transport::TransportTable;
use crate::{Error, Result};

/// Macroscopic slope profile on the M-point periodic grid, values at j/M.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub values: Vec<f64>,
    pub time: f64,
}

impl Profile {
    pub fn new(values: Vec<f64>, time: f64) -> Self {
        Profile { values, time }
    }

    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    /// Discrete mass (1/M) sum of values: the conserved quantity.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Time discretization of the nonlinear term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Coefficient frozen at the current profile, fully implicit otherwise.
    BackwardEulerFrozen,
    /// Constant-coefficient implicit operator (max table value), the
    /// remainder treated explicitly. One factorization for the whole run.
    ImexStabilized,
}

#[derive(Clone)]
pub struct PdeParams {
    pub table: TransportTable,
    pub dt: f64,
    pub grid: usize,
    pub field: Field,
    pub scheme: Scheme,
}

impl PdeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("step size {}", self.dt)));
        }
        if self.grid < 16 || self.grid % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "grid size {} must be even and at least 16",
                self.grid
            )));
        }
        if let Field::Static(e) = &self.field {
            if e.len() != self.grid {
                return Err(Error::InvalidParameter(format!(
                    "field profile has {} points on a {}-point grid",
                    e.len(),
                    self.grid
                )));
            }
        }
        Ok(())
    }

    fn field_at(&self, t: f64, j: usize) -> f64 {
        match &self.field {
            Field::Off => 0.0,
            Field::Static(e) => e[j],
            Field::TimeVarying(f) => f(t, j as f64 / self.grid as f64),
        }
    }
}

/// Periodic second difference scaled by M^2, the discrete d^2/d theta^2.
pub fn second_difference(values: &[f64], out: &mut [f64]) {
    let m = values.len();
    let scale = (m as f64) * (m as f64);
    for j in 0..m {
        let left = values[(j + m - 1) % m];
        let right = values[(j + 1) % m];
        out[j] = scale * (left - 2.0 * values[j] + right);
    }
}

/// Eigenvalue of -D^2 on Fourier mode k: 4 M^2 sin^2(pi k / M).
pub fn discrete_symbol(m: usize, k: usize) -> f64 {
    let s = (PI * k as f64 / m as f64).sin();
    4.0 * (m as f64) * (m as f64) * s * s
}

/// Cosine and sine coefficients of Fourier mode k of a grid function.
pub fn fourier_mode(values: &[f64], k: usize) -> (f64, f64) {
    let m = values.len() as f64;
    let (mut c, mut s) = (0.0, 0.0);
    for (j, v) in values.iter().enumerate() {
        let ang = 2.0 * PI * (k as f64) * (j as f64) / m;
        c += v * ang.cos();
        s += v * ang.sin();
    }
    (2.0 * c / m, 2.0 * s / m)
}

// ---------------------------------------------------------------------------
// Linear solver
// ---------------------------------------------------------------------------

/// Cholesky factor of a symmetric positive definite pentadiagonal matrix
/// (no periodic wrap), stored by bands.
struct BandedCholesky {
    d: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl BandedCholesky {
    /// Factors the matrix given by its diagonal and first two off-diagonals.
    fn factor(diag: &[f64], off1: &[f64], off2: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut d = vec![0.0; n];
        let mut l1 = vec![0.0; n.saturating_sub(1)];
        let mut l2 = vec![0.0; n.saturating_sub(2)];
        for i in 0..n {
            let mut s = diag[i];
            if i >= 1 {
                s -= l1[i - 1] * l1[i - 1];
            }
            if i >= 2 {
                s -= l2[i - 2] * l2[i - 2];
            }
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Numerical(format!(
                    "banded Cholesky pivot {s:.3e} at row {i}"
                )));
            }
            d[i] = s.sqrt();
            if i + 1 < n {
                let mut t = off1[i];
                if i >= 1 {
                    t -= l2[i - 1] * l1[i - 1];
                }
                l1[i] = t / d[i];
            }
            if i + 2 < n {
                l2[i] = off2[i] / d[i];
            }
        }
        Ok(BandedCholesky { d, l1, l2 })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            if i >= 1 {
                s -= self.l1[i - 1] * y[i - 1];
            }
            if i >= 2 {
                s -= self.l2[i - 2] * y[i - 2];
            }
            y[i] = s / self.d[i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            if i + 1 < n {
                s -= self.l1[i] * y[i + 1];
            }
            if i + 2 < n {
                s -= self.l2[i] * y[i + 2];
            }
            y[i] = s / self.d[i];
        }
        y
    }
}

/// Solver for (I + D^2 diag(q/M^4) D^2) x = b on the periodic grid, with q
/// in stencil units (q_j = coefficient_j times whatever scale multiplies the
/// unscaled (1,-2,1) rows). The corner-stripped part is SPD by construction
/// (identity plus a sum of row outer products), so its banded Cholesky is
/// safe; the periodic wrap is restored by a rank-4 Woodbury correction on
/// the four boundary indices.
pub struct CyclicPentaSolver {
    chol: BandedCholesky,
    idx: [usize; 4],
    bv: [Vec<f64>; 4],
    s: Matrix4<f64>,
    cap: nalgebra::LU<f64, nalgebra::U4, nalgebra::U4>,
}

impl CyclicPentaSolver {
    /// `q[j]` weights the row centered at site j: the matrix is
    /// I + sum_j q_j d_j d_j^T with d_j the periodic (1,-2,1) row at j.
    pub fn new(q: &[f64]) -> Result<Self> {
        let m = q.len();
        if m < 6 {
            return Err(Error::InvalidParameter(format!("grid size {m} below 6")));
        }
        // Bands of the corner-stripped matrix: rows 0 and m-1 lose their
        // wrap entry, every interior row keeps its full stencil.
        let mut diag = vec![1.0; m];
        let mut off1 = vec![0.0; m - 1];
        let mut off2 = vec![0.0; m - 2];
        let mut add = |i: usize, j: usize, v: f64| match j - i {
            0 => diag[i] += v,
            1 => off1[i] += v,
            2 => off2[i] += v,
            _ => unreachable!(),
        };
        for (r, &qr) in q.iter().enumerate() {
            let row: &[(usize, f64)] = if r == 0 {
                &[(0, -2.0), (1, 1.0)]
            } else if r == m - 1 {
                &[(m - 2, 1.0), (m - 1, -2.0)]
            } else {
                &[(r - 1, 1.0), (r, -2.0), (r + 1, 1.0)]
            };
            for a in 0..row.len() {
                for b in a..row.len() {
                    add(row[a].0, row[b].0, qr * row[a].1 * row[b].1);
                }
            }
        }
        let chol = BandedCholesky::factor(&diag, &off1, &off2)?;

        // Rank-4 difference between the periodic matrix and the stripped
        // one, supported on the boundary indices.
        let idx = [0usize, 1, m - 2, m - 1];
        let pos = |i: usize| idx.iter().position(|&x| x == i).unwrap();
        let mut s = Matrix4::zeros();
        for &r in &[0usize, m - 1] {
            let per: [(usize, f64); 3] =
                [((r + m - 1) % m, 1.0), (r, -2.0), ((r + 1) % m, 1.0)];
            let strip: &[(usize, f64)] = if r == 0 {
                &[(0, -2.0), (1, 1.0)]
            } else {
                &[(m - 2, 1.0), (m - 1, -2.0)]
            };
            for &(i, ci) in per.iter() {
                for &(j, cj) in per.iter() {
                    s[(pos(i), pos(j))] += q[r] * ci * cj;
                }
            }
            for &(i, ci) in strip {
                for &(j, cj) in strip {
                    s[(pos(i), pos(j))] -= q[r] * ci * cj;
                }
            }
        }

        let bv = [
            Self::unit_solve(&chol, m, idx[0]),
            Self::unit_solve(&chol, m, idx[1]),
            Self::unit_solve(&chol, m, idx[2]),
            Self::unit_solve(&chol, m, idx[3]),
        ];
        let mut t = Matrix4::zeros();
        for a in 0..4 {
            for b in 0..4 {
                t[(a, b)] = bv[b][idx[a]];
            }
        }
        let cap = nalgebra::LU::new(Matrix4::identity() + t * s);
        if cap.determinant().abs() < 1e-300 {
            return Err(Error::Numerical(
                "periodic corner correction is singular".into(),
            ));
        }
        Ok(CyclicPentaSolver { chol, idx, bv, s, cap })
    }

    fn unit_solve(chol: &BandedCholesky, m: usize, i: usize) -> Vec<f64> {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        chol.solve(&e)
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.chol.solve(b);
        let u = Vector4::new(
            y[self.idx[0]],
            y[self.idx[1]],
            y[self.idx[2]],
            y[self.idx[3]],
        );
        let z = self
            .cap
            .solve(&u)
            .ok_or_else(|| Error::Numerical("corner correction solve failed".into()))?;
        let w = self.s * z;
        for k in 0..4 {
            let c = w[k];
            if c != 0.0 {
                for (yi, vi) in y.iter_mut().zip(&self.bv[k]) {
                    *yi -= c * vi;
                }
            }
        }
        Ok(y)
    }
}

// ---------------------------------------------------------------------------
// Stepping
// ---------------------------------------------------------------------------

/// Reusable stepping state: buffers plus the cached IMEX factorization.
pub struct PdeStepper {
    params: PdeParams,
    imex: Option<CyclicPentaSolver>,
    /// Any profile value fell outside the table grid (clamped evaluation).
    pub clamped: bool,
    /// Largest per-step drift of the discrete mass seen so far.
    pub max_mass_drift: f64,
    /// Largest violation of the empirical sup-norm growth bound.
    pub max_overshoot: f64,
}

impl PdeStepper {
    pub fn new(params: PdeParams) -> Result<Self> {
        params.validate()?;
        let imex = match params.scheme {
            Scheme::BackwardEulerFrozen => None,
            Scheme::ImexStabilized => {
                let q = Self::stencil_weight(&params) * params.table.max_value();
                Some(CyclicPentaSolver::new(&vec![q; params.grid])?)
            }
        };
        Ok(PdeStepper { params, imex, clamped: false, max_mass_drift: 0.0, max_overshoot: 0.0 })
    }

    /// (dt/2) M^4: converts a table value into the stencil-unit row weight.
    fn stencil_weight(params: &PdeParams) -> f64 {
        let m = params.grid as f64;
        0.5 * params.dt * m * m * m * m
    }

    pub fn params(&self) -> &PdeParams {
        &self.params
    }

    /// One step of the configured scheme. Both schemes share the increment
    /// form (I + Op) delta = -(dt/2) D^2( a(m) (D^2 m + E) ), m+ = m + delta,
    /// with Op the frozen-coefficient operator or its constant majorant.
    pub fn step(&mut self, p: &Profile) -> Result<Profile> {
        let m = self.params.grid;
        if p.values.len() != m {
            return Err(Error::InvalidParameter(format!(
                "profile has {} points on a {m}-point grid",
                p.values.len()
            )));
        }
        let table = &self.params.table;
        let range = table.range();
        let mut a = vec![0.0; m];
        for (aj, &mj) in a.iter_mut().zip(&p.values) {
            if let Some((lo, hi)) = range {
                if mj < lo || mj > hi {
                    self.clamped = true;
                }
            }
            *aj = table.eval(mj);
        }

        let t_next = p.time + self.params.dt;
        let mut d2m = vec![0.0; m];
        second_difference(&p.values, &mut d2m);
        let mut flux = vec![0.0; m];
        let mut field_bound = 0.0f64;
        for j in 0..m {
            let e = self.params.field_at(t_next, j);
            flux[j] = a[j] * (d2m[j] + e);
        }
        let mut rhs = vec![0.0; m];
        second_difference(&flux, &mut rhs);
        for r in rhs.iter_mut() {
            *r *= -0.5 * self.params.dt;
        }
        if !self.params.field.is_off() {
            // Sup-norm growth allowance from the field term alone.
            let mut ae = vec![0.0; m];
            for j in 0..m {
                ae[j] = a[j] * self.params.field_at(t_next, j);
            }
            let mut d2ae = vec![0.0; m];
            second_difference(&ae, &mut d2ae);
            field_bound = d2ae.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        }

        let delta = match self.params.scheme {
            Scheme::BackwardEulerFrozen => {
                let w = Self::stencil_weight(&self.params);
                let q: Vec<f64> = a.iter().map(|&aj| w * aj).collect();
                CyclicPentaSolver::new(&q)?.solve(&rhs)?
            }
            Scheme::ImexStabilized => self.imex.as_ref().unwrap().solve(&rhs)?,
        };

        let mut values = p.values.clone();
        let mut sup_old = 0.0f64;
        let mut sup_new = 0.0f64;
        for (v, d) in values.iter_mut().zip(&delta) {
            sup_old = sup_old.max(v.abs());
            *v += d;
            sup_new = sup_new.max(v.abs());
            if !v.is_finite() {
                return Err(Error::NonFinite { step: 0 });
            }
        }
        let drift = (delta.iter().sum::<f64>() / m as f64).abs();
        self.max_mass_drift = self.max_mass_drift.max(drift);
        let allowance = self.params.dt * 0.5 * field_bound + 1e-9 * sup_old.max(1.0);
        self.max_overshoot = self.max_overshoot.max(sup_new - sup_old - allowance);
        Ok(Profile { values, time: t_next })
    }
}

/// One step of the frozen-coefficient scheme configured in `params`.
pub fn pde_step(p: &Profile, params: &PdeParams) -> Result<Profile> {
    PdeStepper::new(params.clone())?.step(p)
}

// ---------------------------------------------------------------------------
// Full solve with diagnostics
// ---------------------------------------------------------------------------

/// Space-time test function with analytic derivatives, for weak-form
/// residuals.
pub trait SpaceTimeTestFn: Sync {
    fn value(&self, t: f64, theta: f64) -> f64;
    fn time_deriv(&self, t: f64, theta: f64) -> f64;
    fn space_second(&self, t: f64, theta: f64) -> f64;
    fn name(&self) -> String;
}

/// Time-independent Fourier mode, the standard comparison battery.
#[derive(Debug, Clone, Copy)]
pub struct FourierTestFn {
    pub k: usize,
    pub cosine: bool,
}

impl FourierTestFn {
    pub fn sin(k: usize) -> Self {
        FourierTestFn { k, cosine: false }
    }
    pub fn cos(k: usize) -> Self {
        FourierTestFn { k, cosine: true }
    }
}

impl SpaceTimeTestFn for FourierTestFn {
    fn value(&self, _t: f64, theta: f64) -> f64 {
        let ang = 2.0 * PI * self.k as f64 * theta;
        if self.cosine {
            ang.cos()
        } else {
            ang.sin()
        }
    }
    fn time_deriv(&self, _t: f64, _theta: f64) -> f64 {
        0.0
    }
    fn space_second(&self, t: f64, theta: f64) -> f64 {
        let w = 2.0 * PI * self.k as f64;
        -w * w * self.value(t, theta)
    }
    fn name(&self) -> String {
        format!("{}({}x2pi theta)", if self.cosine { "cos" } else { "sin" }, self.k)
    }
}

/// Trajectory of a full solve plus its conservation and energy diagnostics.
#[derive(Debug, Clone)]
pub struct PdeSolution {
    pub times: Vec<f64>,
    pub profiles: Vec<Vec<f64>>,
    /// Discrete mass after every step (index 0 = initial).
    pub mass: Vec<f64>,
    /// Right-endpoint quadrature of dt * sum_j (D^2 m)_j^2 / M.
    pub energy: f64,
    pub max_mass_drift: f64,
    /// Empirical sup-norm growth bound held at every step.
    pub stability_ok: bool,
    pub clamped: bool,
    /// (test function name, residual) for the supplied battery.
    pub weak_residuals: Vec<(String, f64)>,
}

impl PdeSolution {
    pub fn final_profile(&self) -> &[f64] {
        self.profiles.last().expect("solve records at least the initial profile")
    }
}

/// Integrates m0 to `t_final`, recording every `record_stride`-th step (plus
/// first and last), per-step mass, the cumulative energy functional, and
/// weak residuals for `battery`. `t_final` must be a whole number of steps.
pub fn solve(
    m0: &[f64],
    t_final: f64,
    record_stride: usize,
    battery: &[&dyn SpaceTimeTestFn],
    params: &PdeParams,
) -> Result<PdeSolution> {
    params.validate()?;
    if m0.len() != params.grid {
        return Err(Error::InvalidParameter(format!(
            "initial profile has {} points on a {}-point grid",
            m0.len(),
            params.grid
        )));
    }
    if record_stride == 0 {
        return Err(Error::InvalidParameter("record stride must be positive".into()));
    }
    let mean0 = m0.iter().sum::<f64>() / m0.len() as f64;
    if mean0.abs() > 1e-10 {
        return Err(Error::InvalidParameter(format!(
            "initial profile must be mean-free, got mean {mean0:.3e}"
        )));
    }
    let n_steps = (t_final / params.dt).round() as u64;
    if n_steps == 0 || (n_steps as f64 * params.dt - t_final).abs() > 1e-9 * t_final.max(1e-30) {
        return Err(Error::InvalidParameter(format!(
            "horizon {t_final} is not a whole number of {} steps",
            params.dt
        )));
    }

    let mut stepper = PdeStepper::new(params.clone())?;
    let mut p = Profile::new(m0.to_vec(), 0.0);
    let m = params.grid as f64;
    let mut times = vec![0.0];
    let mut profiles = vec![m0.to_vec()];
    let mut mass = Vec::with_capacity(n_steps as usize + 1);
    mass.push(p.mean());
    let mut energy = 0.0;
    let mut d2 = vec![0.0; params.grid];
    for step in 1..=n_steps {
        p = stepper.step(&p)?;
        mass.push(p.mean());
        second_difference(&p.values, &mut d2);
        energy += params.dt * d2.iter().map(|v| v * v).sum::<f64>() / m;
        if step % record_stride as u64 == 0 || step == n_steps {
            times.push(p.time);
            profiles.push(p.values.clone());
        }
    }

    let mut weak_residuals = Vec::with_capacity(battery.len());
    for phi in battery {
        let r = weak_residual(&times, &profiles, *phi, params)?;
        weak_residuals.push((phi.name(), r));
    }
    Ok(PdeSolution {
        times,
        profiles,
        mass,
        energy,
        max_mass_drift: stepper.max_mass_drift,
        stability_ok: stepper.max_overshoot <= 0.0,
        clamped: stepper.clamped,
        weak_residuals,
    })
}

/// Discrete residual of the weak-form identity over a recorded trajectory:
/// (1/M) sum m phi |_0^T minus the time integrals of m d_s phi and of
/// -(1/2) a_hat(m) (D^2 m + E) d^2 phi, trapezoidal in time, midpoint in
/// space. Small for solver output when the recording resolves the dynamics.
pub fn weak_residual(
    times: &[f64],
    profiles: &[Vec<f64>],
    phi: &dyn SpaceTimeTestFn,
    params: &PdeParams,
) -> Result<f64> {
    if times.len() != profiles.len() || times.len() < 2 {
        return Err(Error::InvalidParameter(
            "need matching times and profiles, at least two".into(),
        ));
    }
    let m = params.grid;
    let mf = m as f64;
    let mut d2 = vec![0.0; m];
    let mut integrand = Vec::with_capacity(times.len());
    for (t, mv) in times.iter().zip(profiles) {
        if mv.len() != m {
            return Err(Error::InvalidParameter("profile length mismatch".into()));
        }
        second_difference(mv, &mut d2);
        let mut dphi_term = 0.0;
        let mut diss_term = 0.0;
        for j in 0..m {
            let theta = j as f64 / mf;
            let a = params.table.eval(mv[j]);
            let e = params.field_at(*t, j);
            dphi_term += mv[j] * phi.time_deriv(*t, theta);
            diss_term += a * (d2[j] + e) * phi.space_second(*t, theta);
        }
        integrand.push((dphi_term - 0.5 * diss_term) / mf);
    }
    let mut time_integral = 0.0;
    for k in 1..times.len() {
        time_integral += 0.5 * (integrand[k] + integrand[k - 1]) * (times[k] - times[k - 1]);
    }
    let boundary = |idx: usize| -> f64 {
        let t = times[idx];
        profiles[idx]
            .iter()
            .enumerate()
            .map(|(j, v)| v * phi.value(t, j as f64 / mf))
            .sum::<f64>()
            / mf
    };
    Ok(boundary(times.len() - 1) - boundary(0) - time_integral)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_params(c: f64, grid: usize, dt: f64) -> PdeParams {
        PdeParams {
            table: TransportTable::constant("constant", c).unwrap(),
            dt,
            grid,
            field: Field::Off,
            scheme: Scheme::BackwardEulerFrozen,
        }
    }

    fn dense_periodic(q: &[f64]) -> DMatrix<f64> {
        let m = q.len();
        let mut a = DMatrix::identity(m, m);
        for r in 0..m {
            let idx = [(r + m - 1) % m, r, (r + 1) % m];
            let co = [1.0, -2.0, 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    a[(idx[i], idx[j])] += q[r] * co[i] * co[j];
                }
            }
        }
        a
    }

    #[test]
    fn cyclic_solver_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in [6usize, 16, 33] {
            let q: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..50.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = CyclicPentaSolver::new(&q).unwrap().solve(&b).unwrap();
            let dense = dense_periodic(&q);
            let xd = dense
                .clone()
                .cholesky()
                .expect("dense SPD")
                .solve(&DVector::from_vec(b.clone()));
            for j in 0..m {
                assert!(
                    (x[j] - xd[j]).abs() < 1e-10 * (1.0 + xd[j].abs()),
                    "m={m} j={j}: {} vs {}",
                    x[j],
                    xd[j]
                );
            }
        }
    }

    #[test]
    fn zero_profile_stays_zero() {
        let params = constant_params(1.0, 16, 1e-6);
        let p = Profile::new(vec![0.0; 16], 0.0);
        let next = pde_step(&p, &params).unwrap();
        assert!(next.values.iter().all(|&v| v == 0.0));
        assert!((next.time - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn sine_mode_contracts_by_the_exact_symbol_factor() {
        let (grid, c, dt) = (32usize, 1.7, 3e-6);
        let params = constant_params(c, grid, dt);
        let m0: Vec<f64> =
            (0..grid).map(|j| (2.0 * PI * j as f64 / grid as f64).sin()).collect();
        let p = pde_step(&Profile::new(m0.clone(), 0.0), &params).unwrap();
        let sigma = discrete_symbol(grid, 1);
        let factor = 1.0 / (1.0 + 0.5 * dt * c * sigma * sigma);
        for j in 0..grid {
            assert!(
                (p.values[j] - factor * m0[j]).abs() < 1e-10,
                "j={j}: {} vs {}",
                p.values[j],
                factor * m0[j]
            );
        }
    }

    #[test]
    fn constant_field_with_constant_coefficient_is_inert() {
        let grid = 16;
        let mut with_field = constant_params(0.8, grid, 1e-6);
        with_field.field = Field::Static(vec![2.5; grid]);
        let plain = constant_params(0.8, grid, 1e-6);
        let m0: Vec<f64> = (0..grid)
            .map(|j| (2.0 * PI * j as f64 / grid as f64).sin() * 0.3)
            .collect();
        let p = Profile::new(m0, 0.0);
        let a = pde_step(&p, &with_field).unwrap();
        let b = pde_step(&p, &plain).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            // D^2 of the constant flux offset cancels to rounding.
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    fn wiggly_table() -> TransportTable {
        let alphas: Vec<f64> = (0..21).map(|i| -2.0 + 0.2 * i as f64).collect();
        let values: Vec<f64> =
            alphas.iter().map(|a| 1.0 + 0.3 * (1.3 * a).sin().powi(2)).collect();
        let stderrs = vec![1e-4; alphas.len()];
        TransportTable::from_grid("test", "none", alphas, values, stderrs).unwrap()
    }

    #[test]
    fn mass_is_conserved_with_varying_coefficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = 48;
        let mut m0: Vec<f64> = (0..grid).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean = m0.iter().sum::<f64>() / grid as f64;
        for v in m0.iter_mut() {
            *v -= mean;
        }
        for scheme in [Scheme::BackwardEulerFrozen, Scheme::ImexStabilized] {
            let params = PdeParams {
                table: wiggly_table(),
                dt: 5e-7,
                grid,
                field: Field::Static(
                    (0..grid)
                        .map(|j| (2.0 * PI * j as f64 / grid as f64).sin())
                        .collect(),
                ),
                scheme,
            };
            let sol = solve(&m0, 5e-7 * 200.0, 10, &[], &params).unwrap();
            assert!(
                sol.max_mass_drift < 1e-12,
                "{scheme:?}: per-step mass drift {}",
                sol.max_mass_drift
            );
            // No stability_ok assertion here: rough random data can push a
            // revealed low-mode peak above the old sup norm (fourth-order
            // smoothing has no maximum principle), which is exactly what the
            // recorded flag is for. Smooth-data tests assert it instead.
            assert!(sol.energy.is_finite() && sol.energy > 0.0);
        }
    }

    #[test]
    fn solve_tracks_the_discrete_decay_exactly() {
        let (grid, c, dt) = (64usize, 1.0, 1e-6);
        let params = constant_params(c, grid, dt);
        let m0: Vec<f64> = (0..grid)
            .map(|j| 0.5 * (2.0 * PI * j as f64 / grid as f64).sin())
            .collect();
        let n = 400u32;
        let sol = solve(&m0, dt * n as f64, 50, &[], &params).unwrap();
        let sigma = discrete_symbol(grid, 1);
        let factor = (1.0 + 0.5 * dt * c * sigma * sigma).powi(-(n as i32));
        let (_, s1) = fourier_mode(sol.final_profile(), 1);
        assert!(
            (s1 - 0.5 * factor).abs() < 1e-10,
            "mode 0.5*{factor} vs {s1}"
        );
        assert!(sol.stability_ok && sol.max_mass_drift < 1e-14);
        // Continuum check: the symbol gap and the first-order-in-dt error
        // are both tiny at these sizes.
        let cont = 0.5 * (-0.5 * c * (2.0 * PI).powi(4) * dt * n as f64).exp();
        assert!((s1 - cont).abs() / cont < 2e-3);
    }

    #[test]
    fn imex_agrees_with_frozen_at_small_dt() {
        let grid = 32;
        let m0: Vec<f64> = (0..grid)
            .map(|j| {
                let th = j as f64 / grid as f64;
                0.4 * (2.0 * PI * th).sin() + 0.2 * (4.0 * PI * th).cos()
            })
            .collect();
        let mean = m0.iter().sum::<f64>() / grid as f64;
        let m0: Vec<f64> = m0.iter().map(|v| v - mean).collect();
        let t = 2e-4;
        let run = |scheme: Scheme, dt: f64| {
            let params = PdeParams {
                table: wiggly_table(),
                dt,
                grid,
                field: Field::Off,
                scheme,
            };
            solve(&m0, t, usize::MAX, &[], &params).unwrap().final_profile().to_vec()
        };
        let be1 = run(Scheme::BackwardEulerFrozen, 1e-6);
        let be2 = run(Scheme::BackwardEulerFrozen, 5e-7);
        let fine = run(Scheme::BackwardEulerFrozen, 1e-7);
        let imex = run(Scheme::ImexStabilized, 1e-6);
        let dist = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max)
        };
        let e1 = dist(&be1, &fine);
        let e2 = dist(&be2, &fine);
        // First order in dt: errors vs the dt/10 reference scale like
        // (dt - dt/10), so halving dt gives a ratio near 0.9/0.4 = 2.25.
        let ratio = e1 / e2;
        assert!((1.6..2.9).contains(&ratio), "ratio {ratio}, e1 {e1}, e2 {e2}");
        // The stabilized splitting is also first order with a comparable
        // constant, so the two schemes sit within a few errors of each other.
        assert!(dist(&be1, &imex) < 6.0 * e1 + 1e-12, "{} vs e1 {e1}", dist(&be1, &imex));
        assert!(e1 < 5e-3, "absolute scale sanity: {e1}");
    }

    #[test]
    fn forced_steady_state_matches_per_mode_solution() {
        let (grid, c) = (32usize, 1.2);
        let mut params = constant_params(c, grid, 2e-5);
        params.field = Field::Static(
            (0..grid).map(|j| (2.0 * PI * j as f64 / grid as f64).sin()).collect(),
        );
        let sol = solve(&vec![0.0; grid], 2e-5 * 4000.0, 4000, &[], &params).unwrap();
        let sigma = discrete_symbol(grid, 1);
        let (_, s1) = fourier_mode(sol.final_profile(), 1);
        assert!(
            (s1 - 1.0 / sigma).abs() < 1e-8,
            "steady mode {} vs {}",
            s1,
            1.0 / sigma
        );
        assert!(sol.stability_ok, "smooth forced run must satisfy the growth bound");
    }

    #[test]
    fn weak_residual_flags_perturbed_trajectories() {
        let (grid, c, dt) = (64usize, 1.0, 1e-6);
        let params = constant_params(c, grid, dt);
        let m0: Vec<f64> = (0..grid)
            .map(|j| 0.5 * (2.0 * PI * j as f64 / grid as f64).sin())
            .collect();
        let phi = FourierTestFn::sin(1);
        let battery: [&dyn SpaceTimeTestFn; 2] = [&phi, &FourierTestFn::cos(2)];
        let sol = solve(&m0, 4e-4, 1, &battery, &params).unwrap();
        let honest = sol.weak_residuals[0].1.abs();
        // phi == 1 would reproduce the mass drift; sin(2 pi theta) rides on
        // the exact linear solution, so the residual is pure quadrature
        // error.
        assert!(honest < 5e-4, "residual {honest}");

        let mut perturbed = sol.profiles.clone();
        for row in perturbed.iter_mut().skip(1) {
            for (j, v) in row.iter_mut().enumerate() {
                *v += 0.05 * (2.0 * PI * j as f64 / grid as f64).sin();
            }
        }
        let bad = weak_residual(&sol.times, &perturbed, &phi, &params).unwrap().abs();
        assert!(bad > 10.0 * honest, "perturbed {bad} vs honest {honest}");
    }

    #[test]
    fn out_of_range_profiles_flag_clamping() {
        let params = PdeParams {
            table: wiggly_table(),
            dt: 1e-7,
            grid: 16,
            field: Field::Off,
            scheme: Scheme::BackwardEulerFrozen,
        };
        let m0: Vec<f64> = (0..16)
            .map(|j| 3.0 * (2.0 * PI * j as f64 / 16.0).sin())
            .collect();
        let sol = solve(&m0, 1e-6, 1, &[], &params).unwrap();
        assert!(sol.clamped);
    }

    #[test]
    fn rejects_bad_grids_and_horizons() {
        let params = constant_params(1.0, 16, 1e-6);
        assert!(solve(&vec![0.0; 15], 1e-5, 1, &[], &params).is_err());
        assert!(solve(&vec![0.1; 16], 1e-5, 1, &[], &params).is_err());
        assert!(solve(&vec![0.0; 16], 1.5e-6, 1, &[], &params).is_err());
        let mut odd = constant_params(1.0, 16, 1e-6);
        odd.grid = 17;
        assert!(odd.validate().is_err());
        let mut tiny = constant_params(1.0, 16, 1e-6);
        tiny.grid = 8;
        assert!(tiny.validate().is_err());
    }
}
