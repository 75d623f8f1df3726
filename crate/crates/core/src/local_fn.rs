//! Local functions of the slope field: an observable reads a finite window of
//! sites around a center, optionally with analytic first and second
//! derivatives. The module also carries the bond stencil operator that the
//! generator, the microscopic current, and the variational estimator share.

use crate::lattice::{potential_prime, SlopeConfig};
use crate::mobility::Mobility;
use crate::Result;

/// Conservative bond stencil (coefficients at relative sites -1, 0, 1).
pub const SECOND_DIFF: [f64; 3] = [1.0, -2.0, 1.0];

/// A function of finitely many slopes around a center site.
pub trait Observable: Send + Sync {
    /// Half-width of the window read: sites `center-span ..= center+span`.
    fn span(&self) -> usize;
    fn name(&self) -> String;
    fn eval(&self, cfg: &SlopeConfig, center: i64) -> Result<f64>;
}

/// Observable with analytic partial derivatives.
pub trait LocalFn: Observable {
    /// Writes d f / d x_{center+m} into `out[m + span]` for m in -span..=span.
    /// `out` must have length `2*span()+1`.
    fn grad(&self, cfg: &SlopeConfig, center: i64, out: &mut [f64]) -> Result<()>;
}

/// Local function with an analytic Hessian.
pub trait TwiceLocalFn: LocalFn {
    /// Row-major `(2s+1) x (2s+1)` matrix of second partials in window slots.
    fn hessian(&self, cfg: &SlopeConfig, center: i64, out: &mut [f64]) -> Result<()>;
}

impl<O: Observable + ?Sized> Observable for &O {
    fn span(&self) -> usize {
        (**self).span()
    }
    fn name(&self) -> String {
        (**self).name()
    }
    fn eval(&self, cfg: &SlopeConfig, center: i64) -> Result<f64> {
        (**self).eval(cfg, center)
    }
}

/// f = x_{center+offset}.
#[derive(Debug, Clone, Copy)]
pub struct SiteValue {
    pub offset: i64,
}

impl Observable for SiteValue {
    fn span(&self) -> usize {
        self.offset.unsigned_abs() as usize
    }
    fn name(&self) -> String {
        format!("x[{}]", self.offset)
    }
    fn eval(&self, cfg: &SlopeConfig, center: i64) -> Result<f64> {
        cfg.get(center + self.offset)
    }
}

impl LocalFn for SiteValue {
    fn grad(&self, cfg: &SlopeConfig, center: i64, out: &mut [f64]) -> Result<()> {
        cfg.get(center + self.offset)?;
        out.fill(0.0);
        out[(self.offset + self.span() as i64) as usize] = 1.0;
        Ok(())
    }
}

impl TwiceLocalFn for SiteValue {
    fn hessian(&self, cfg: &SlopeConfig, center: i64, out: &mut [f64]) -> Result<()> {
        cfg.get(center + self.offset)?;
        out.fill(0.0);
        Ok(())
    }
}

/// f = tanh(x_{center+offset}).
#[derive(Debug, Clone, Copy)]
pub struct TanhSite {
    pub offset: i64,
}

impl Observable for TanhSite {
    fn span(&self) -> usize {
        self.offset.unsigned_abs() as usize
    }
    fn name(&self) -> String {
        format!("tanh[{}]", self.offset)
    }
    fn eval(&self, cfg: &SlopeConfig, center: i64) -> Result<f64> {
        Ok(cfg.get(center + self.offset)?.tanh())
    }
}

impl LocalFn for TanhSite {
    fn grad(&self, cfg: &SlopeConfig, center: i64, out: &mut [f64]) -> Result<()> {
        let t = cfg.get(center + self.offset)?.tanh();
        out.fill(0.0);
        out[(self.offset + self.span() as i64) as usize] = 1.0 - t * t;
        Ok(())
    }
}

impl TwiceLocalFn for TanhSite {
    fn hessian(&self, cfg: &SlopeConfig, center: i64, out: &mut [f64]) -> Result<()> {
        let t = cfg.get(center + self.offset)?.tanh();
        out.fill(0.0);
        let w = 2 * self.span() + 1;
        let k = (self.offset + self.span() as i64) as usize;
        out[k * w + k] = -2.0 * t * (1.0 - t * t);
        Ok(())
    }
}

/// f = tanh(x_{center+offset}) * tanh(x_{center+offset+1}).
#[derive(Debug, Clone, Copy)]
pub struct TanhPair {
    pub offset: i64,
}

impl TanhPair {
    fn sites(&self) -> (i64, i64) {
        (self.offset, self.offset + 1)
    }
}

impl Observable for TanhPair {
    fn span(&self) -> usize {
        let (u, v) = self.sites();
        u.unsigned_abs().max(v.unsigned_abs()) as usize
    }
    fn name(&self) -> String {
        format!("tanh[{}]tanh[{}]", self.offset, self.offset + 1)
    }
    fn eval(&self, cfg: &SlopeConfig, center: i64) -> Result<f64> {
        let (u, v) = self.sites();
        Ok(cfg.get(center + u)?.tanh() * cfg.get(center + v)?.tanh())
    }
}

impl LocalFn for TanhPair {
    fn grad(&self, cfg: &SlopeConfig, center: i64, out: &mut [f64]) -> Result<()> {
        let (u, v) = self.sites();
        let tu = cfg.get(center + u)?.tanh();
        let tv = cfg.get(center + v)?.tanh();
        let s = self.span() as i64;
        out.fill(0.0);
        out[(u + s) as usize] = (1.0 - tu * tu) * tv;
        out[(v + s) as usize] = tu * (1.0 - tv * tv);
        Ok(())
    }
}

impl TwiceLocalFn for TanhPair {
    fn hessian(&self, cfg: &SlopeConfig, center: i64, out: &mut [f64]) -> Result<()> {
        let (u, v) = self.sites();
        let tu = cfg.get(center + u)?.tanh();
        let tv = cfg.get(center + v)?.tanh();
        let s = self.span() as i64;
        let w = 2 * self.span() + 1;
        let (du, dv) = (1.0 - tu * tu, 1.0 - tv * tv);
        out.fill(0.0);
        let (iu, iv) = ((u + s) as usize, (v + s) as usize);
        out[iu * w + iu] = -2.0 * tu * du * tv;
        out[iv * w + iv] = tu * -2.0 * tv * dv;
        out[iu * w + iv] = du * dv;
        out[iv * w + iu] = du * dv;
        Ok(())
    }
}

/// Closure-backed observable over the raw window slice, with finite-difference
/// derivatives. Convenient for tests and one-off integrands.
pub struct FnObservable<F> {
    f: F,
    span: usize,
    label: String,
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> FnObservable<F> {
    pub fn new(span: usize, label: impl Into<String>, f: F) -> Self {
        Self { f, span, label: label.into() }
    }

    fn window(&self, cfg: &SlopeConfig, center: i64) -> Result<Vec<f64>> {
        let s = self.span as i64;
        (-s..=s).map(|m| cfg.get(center + m)).collect()
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Observable for FnObservable<F> {
    fn span(&self) -> usize {
        self.span
    }
    fn name(&self) -> String {
        self.label.clone()
    }
    fn eval(&self, cfg: &SlopeConfig, center: i64) -> Result<f64> {
        Ok((self.f)(&self.window(cfg, center)?))
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> LocalFn for FnObservable<F> {
    fn grad(&self, cfg: &SlopeConfig, center: i64, out: &mut [f64]) -> Result<()> {
        let mut win = self.window(cfg, center)?;
        let h = 1e-5;
        for k in 0..win.len() {
            let x0 = win[k];
            win[k] = x0 + h;
            let fp = (self.f)(&win);
            win[k] = x0 - h;
            let fm = (self.f)(&win);
            win[k] = x0;
            out[k] = (fp - fm) / (2.0 * h);
        }
        Ok(())
    }
}

/// Sum of an observable over a set of lattice shifts.
pub struct SummedObservable<O> {
    pub inner: O,
    pub shifts: Vec<i64>,
}

impl<O: Observable> SummedObservable<O> {
    /// Shifts `lo ..= hi`.
    pub fn over_range(inner: O, lo: i64, hi: i64) -> Self {
        Self { inner, shifts: (lo..=hi).collect() }
    }
}

impl<O: Observable> Observable for SummedObservable<O> {
    fn span(&self) -> usize {
        let m = self.shifts.iter().map(|s| s.unsigned_abs()).max().unwrap_or(0);
        m as usize + self.inner.span()
    }
    fn name(&self) -> String {
        format!("sum({}; {} shifts)", self.inner.name(), self.shifts.len())
    }
    fn eval(&self, cfg: &SlopeConfig, center: i64) -> Result<f64> {
        let mut acc = 0.0;
        for &j in &self.shifts {
            acc += self.inner.eval(cfg, center + j)?;
        }
        Ok(acc)
    }
}

/// Microscopic current across the bond at `bond`:
/// w = a * (V'(x_{b-1}) - 2 V'(x_b) + V'(x_{b+1})) - (stencil applied to the
/// slope-derivatives of a). The divergence of this current is the
/// deterministic drift of the slopes.
pub fn bond_current(cfg: &SlopeConfig, mobility: &Mobility, bond: i64) -> Result<f64> {
    let win = [cfg.get(bond - 1)?, cfg.get(bond)?, cfg.get(bond + 1)?];
    let a = mobility.eval(&win);
    let lap = potential_prime(win[0]) - 2.0 * potential_prime(win[1]) + potential_prime(win[2]);
    let ga = mobility.grad(&win);
    Ok(a * lap - (ga[0] - 2.0 * ga[1] + ga[2]))
}

/// The current as an observable at a fixed bond offset.
pub struct CurrentObs {
    pub mobility: Mobility,
    pub offset: i64,
}

impl Observable for CurrentObs {
    fn span(&self) -> usize {
        self.offset.unsigned_abs() as usize + 1
    }
    fn name(&self) -> String {
        format!("w[{}]", self.offset)
    }
    fn eval(&self, cfg: &SlopeConfig, center: i64) -> Result<f64> {
        bond_current(cfg, &self.mobility, center + self.offset)
    }
}

/// Second difference of V'(x) at a fixed offset, as an observable.
pub struct LaplacianObs {
    pub offset: i64,
}

impl Observable for LaplacianObs {
    fn span(&self) -> usize {
        self.offset.unsigned_abs() as usize + 1
    }
    fn name(&self) -> String {
        format!("lap[{}]", self.offset)
    }
    fn eval(&self, cfg: &SlopeConfig, center: i64) -> Result<f64> {
        cfg.laplacian_slope(center + self.offset)
    }
}

/// Applies the bond stencil to the partials of `g` (centered at `center`)
/// around the bond at `bond`: sum_p c_p * d g / d x_{bond+p}. Partials outside
/// the window of `g` are zero.
pub fn stencil_grad<G: LocalFn + ?Sized>(
    g: &G,
    cfg: &SlopeConfig,
    center: i64,
    bond: i64,
) -> Result<f64> {
    let s = g.span() as i64;
    let mut grad = vec![0.0; 2 * g.span() + 1];
    g.grad(cfg, center, &mut grad)?;
    let mut acc = 0.0;
    for (p, cp) in SECOND_DIFF.iter().enumerate() {
        let m = bond - center + p as i64 - 1;
        if m.abs() <= s {
            acc += cp * grad[(m + s) as usize];
        }
    }
    Ok(acc)
}

/// Applies the bond stencil at `center` to the formal sum of all lattice
/// shifts of `g`. Only shifts within `span+1` of the bond contribute, so the
/// result is a local function of width `4*span+3`. Its mean vanishes in any
/// translation-invariant product state because the stencil weights sum to 0.
pub fn stencil_grad_sum<G: LocalFn + ?Sized>(
    g: &G,
    cfg: &SlopeConfig,
    center: i64,
) -> Result<f64> {
    let s = g.span() as i64;
    let mut grad = vec![0.0; 2 * g.span() + 1];
    let mut acc = 0.0;
    for j in -(s + 1)..=(s + 1) {
        g.grad(cfg, center + j, &mut grad)?;
        for (p, cp) in SECOND_DIFF.iter().enumerate() {
            let m = p as i64 - 1 - j;
            if m.abs() <= s {
                acc += cp * grad[(m + s) as usize];
            }
        }
    }
    Ok(acc)
}

/// Action of the unscaled equilibrium generator on `g` at `center`:
/// (1/2) * sum over bonds j of [ a_j * (stencil . Hess g . stencil)_j
///                               - w_j * (stencil . grad g)_j ].
/// Reads sites `center-span-2 ..= center+span+2`.
pub fn apply_generator<G: TwiceLocalFn + ?Sized>(
    g: &G,
    cfg: &SlopeConfig,
    center: i64,
    mobility: &Mobility,
) -> Result<f64> {
    let s = g.span() as i64;
    let w = 2 * g.span() + 1;
    let mut grad = vec![0.0; w];
    let mut hess = vec![0.0; w * w];
    g.grad(cfg, center, &mut grad)?;
    g.hessian(cfg, center, &mut hess)?;
    let mut acc = 0.0;
    for j in -(s + 1)..=(s + 1) {
        let bond = center + j;
        let win = [cfg.get(bond - 1)?, cfg.get(bond)?, cfg.get(bond + 1)?];
        let a = mobility.eval(&win);
        let lap =
            potential_prime(win[0]) - 2.0 * potential_prime(win[1]) + potential_prime(win[2]);
        let ga = mobility.grad(&win);
        let wj = a * lap - (ga[0] - 2.0 * ga[1] + ga[2]);
        let mut xg = 0.0;
        let mut xxg = 0.0;
        for (p, cp) in SECOND_DIFF.iter().enumerate() {
            let m = j + p as i64 - 1;
            if m.abs() > s {
                continue;
            }
            let row = (m + s) as usize;
            xg += cp * grad[row];
            for (q, cq) in SECOND_DIFF.iter().enumerate() {
                let mq = j + q as i64 - 1;
                if mq.abs() <= s {
                    xxg += cp * cq * hess[row * w + (mq + s) as usize];
                }
            }
        }
        acc += a * xxg - wj * xg;
    }
    Ok(0.5 * acc)
}

/// The generator applied to a fixed local function, as an observable. Useful
/// as a reference current: its equilibrium mean and its paired time-integrals
/// vanish identically.
pub struct GeneratorApplied<G> {
    pub g: G,
    pub mobility: Mobility,
}

impl<G: TwiceLocalFn> Observable for GeneratorApplied<G> {
    fn span(&self) -> usize {
        self.g.span() + 2
    }
    fn name(&self) -> String {
        format!("L({})", self.g.name())
    }
    fn eval(&self, cfg: &SlopeConfig, center: i64) -> Result<f64> {
        apply_generator(&self.g, cfg, center, &self.mobility)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::Mobility;

    fn ring() -> SlopeConfig {
        SlopeConfig::periodic(vec![
            0.3, -1.1, 0.7, 2.0, -0.4, 0.9, -1.6, 0.2, 1.3, -0.8, 0.5, -0.25,
        ])
        .unwrap()
    }

    #[test]
    fn site_value_shift_sum_vanishes() {
        // The stencil telescopes exactly on the identity observable.
        let cfg = ring();
        for c in 0..cfg.len() as i64 {
            let v = stencil_grad_sum(&SiteValue { offset: 0 }, &cfg, c).unwrap();
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn pair_grad_and_hessian_match_finite_difference() {
        let cfg = ring();
        let g = TanhPair { offset: -1 };
        let s = g.span() as i64;
        let w = 2 * g.span() + 1;
        let mut grad = vec![0.0; w];
        let mut hess = vec![0.0; w * w];
        g.grad(&cfg, 3, &mut grad).unwrap();
        g.hessian(&cfg, 3, &mut hess).unwrap();
        let h = 1e-5;
        for m in -s..=s {
            let mut plus = cfg.clone();
            let mut minus = cfg.clone();
            let idx = plus.flat_index(3 + m).unwrap();
            plus.values_mut()[idx] += h;
            minus.values_mut()[idx] -= h;
            let fd = (g.eval(&plus, 3).unwrap() - g.eval(&minus, 3).unwrap()) / (2.0 * h);
            assert!((grad[(m + s) as usize] - fd).abs() < 1e-9);
            let mut gp = vec![0.0; w];
            let mut gm = vec![0.0; w];
            g.grad(&plus, 3, &mut gp).unwrap();
            g.grad(&minus, 3, &mut gm).unwrap();
            for n in 0..w {
                let fd2 = (gp[n] - gm[n]) / (2.0 * h);
                let an = hess[(m + s) as usize * w + n];
                assert!((an - fd2).abs() < 1e-9, "hessian[{m},{n}]: {an} vs {fd2}");
            }
        }
    }

    #[test]
    fn shift_sum_matches_full_lattice_derivative() {
        // Oracle: differentiate H(x) = sum over every ring shift of g, then
        // apply the stencil at site 0 by central differences.
        let cfg = ring();
        let g = TanhPair { offset: 0 };
        let n = cfg.len() as i64;
        let full = |c: &SlopeConfig| -> f64 {
            (0..n).map(|j| g.eval(c, j).unwrap()).sum()
        };
        let h = 1e-5;
        let mut fd = 0.0;
        for (p, cp) in SECOND_DIFF.iter().enumerate() {
            let site = p as i64 - 1;
            let mut plus = cfg.clone();
            let mut minus = cfg.clone();
            let idx = plus.flat_index(site).unwrap();
            plus.values_mut()[idx] += h;
            minus.values_mut()[idx] -= h;
            fd += cp * (full(&plus) - full(&minus)) / (2.0 * h);
        }
        let direct = stencil_grad_sum(&g, &cfg, 0).unwrap();
        assert!((direct - fd).abs() < 1e-8, "{direct} vs {fd}");
    }

    #[test]
    fn generator_on_identity_gives_current_divergence() {
        // L x_0 must equal -(1/2) * second difference of the bond current.
        let cfg = ring();
        let mob = Mobility::bump(0.2).unwrap();
        for c in 0..cfg.len() as i64 {
            let lhs = apply_generator(&SiteValue { offset: 0 }, &cfg, c, &mob).unwrap();
            let wm = bond_current(&cfg, &mob, c - 1).unwrap();
            let w0 = bond_current(&cfg, &mob, c).unwrap();
            let wp = bond_current(&cfg, &mob, c + 1).unwrap();
            let rhs = -0.5 * (wm - 2.0 * w0 + wp);
            assert!((lhs - rhs).abs() < 1e-12, "site {c}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn fn_observable_fd_grad_matches_analytic() {
        let cfg = ring();
        let exact = TanhSite { offset: 0 };
        let approx = FnObservable::new(0, "tanh", |w: &[f64]| w[0].tanh());
        let mut ga = vec![0.0; 1];
        let mut gb = vec![0.0; 1];
        exact.grad(&cfg, 5, &mut ga).unwrap();
        approx.grad(&cfg, 5, &mut gb).unwrap();
        assert!((ga[0] - gb[0]).abs() < 1e-9);
    }

    #[test]
    fn summed_observable_window() {
        let cfg = SlopeConfig::window(vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let sum = SummedObservable::over_range(SiteValue { offset: 0 }, -2, 2);
        assert_eq!(sum.span(), 2);
        assert!((sum.eval(&cfg, 0).unwrap() - 15.0).abs() < 1e-15);
        assert!(sum.eval(&cfg, 1).is_err());
    }
}
