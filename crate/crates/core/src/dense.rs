//! Exact dense linear algebra for the unit-mobility box dynamics. With a == 1
//! the slope SDE on a window is an Ornstein-Uhlenbeck process
//! dx = -G x dt + S^T dB with G = (1/2) S^T S, where S maps slopes to their
//! interior second differences. Everything about its relaxation (gap,
//! autocovariances, time integrals) is then an eigenvalue computation, used as
//! the oracle for the stochastic estimators.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Interior second-difference matrix, shape (2l-1) x (2l+1): one row per
/// interior site j in [-(l-1), l-1], stencil (1,-2,1). Full row rank; its
/// kernel as a quadratic form is spanned by constant and linear slopes.
pub fn interior_stencil_matrix(l: usize) -> Result<DMatrix<f64>> {
    if l < 2 {
        return Err(Error::InvalidParameter(format!("window half-width {l} < 2")));
    }
    let rows = 2 * l - 1;
    let cols = 2 * l + 1;
    let mut s = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        s[(r, r)] = 1.0;
        s[(r, r + 1)] = -2.0;
        s[(r, r + 2)] = 1.0;
    }
    Ok(s)
}

/// Drift matrix G = (1/2) S^T S of the unit-mobility window dynamics.
pub fn generator_matrix(l: usize) -> Result<DMatrix<f64>> {
    let s = interior_stencil_matrix(l)?;
    Ok(0.5 * s.transpose() * s)
}

/// Orthogonal projector onto the conserved fiber (complement of constant and
/// linear slope directions). Equals the stationary covariance of the
/// unit-mobility window dynamics.
pub fn fiber_projector(l: usize) -> Result<DMatrix<f64>> {
    if l < 2 {
        return Err(Error::InvalidParameter(format!("window half-width {l} < 2")));
    }
    let n = 2 * l + 1;
    let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lin = DVector::from_fn(n, |i, _| i as f64 - l as f64);
    lin /= lin.norm();
    Ok(DMatrix::identity(n, n) - &ones * ones.transpose() - &lin * lin.transpose())
}

/// Eigenvalues of G above the conserved kernel, ascending.
pub fn relaxation_rates(l: usize) -> Result<Vec<f64>> {
    let g = generator_matrix(l)?;
    let eig = g.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut rates: Vec<f64> = eig
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&v| v > 1e-10 * max.max(1.0))
        .collect();
    rates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(rates)
}

/// Smallest nonzero relaxation rate (the spectral gap) of the unit-mobility
/// window dynamics.
pub fn spectral_gap(l: usize) -> Result<f64> {
    Ok(relaxation_rates(l)?[0])
}

/// Exact stationary cross-covariance curve of two linear observables
/// u.x and v.x: C(t) = sum_k (phi_k.u)(phi_k.v) exp(-lambda_k t) over the
/// nonzero modes of G.
pub fn cross_covariance_curve(
    l: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    taus: &[f64],
) -> Result<Vec<f64>> {
    let (rates, coefs) = mode_overlaps(l, u, v)?;
    Ok(taus
        .iter()
        .map(|&t| rates.iter().zip(&coefs).map(|(r, c)| c * (-r * t).exp()).sum())
        .collect())
}

/// Exact time integral of the stationary cross-covariance of u.x and v.x:
/// sum_k (phi_k.u)(phi_k.v) / lambda_k.
pub fn gk_integral_exact(l: usize, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    let (rates, coefs) = mode_overlaps(l, u, v)?;
    Ok(rates.iter().zip(&coefs).map(|(r, c)| c / r).sum())
}

fn mode_overlaps(
    l: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = 2 * l + 1;
    if u.len() != n || v.len() != n {
        return Err(Error::InvalidParameter(format!(
            "observable vectors must have length {n}"
        )));
    }
    let g = generator_matrix(l)?;
    let eig = g.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut rates = Vec::new();
    let mut coefs = Vec::new();
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam > 1e-10 * max.max(1.0) {
            let phi = eig.eigenvectors.column(k);
            rates.push(lam);
            coefs.push(phi.dot(u) * phi.dot(v));
        }
    }
    Ok((rates, coefs))
}

/// Linear functional of the summed second-difference observable
/// sum_{|j| <= l1} (x_{j-1} - 2 x_j + x_{j+1}), as a slope-space vector.
pub fn lap_sum_vector(l: usize, l1: usize) -> Result<DVector<f64>> {
    if l1 + 1 >= l {
        return Err(Error::InvalidParameter(format!(
            "sum radius {l1} needs interior sites in a window of half-width {l}"
        )));
    }
    let s = interior_stencil_matrix(l)?;
    let mut ind = DVector::zeros(2 * l - 1);
    for j in -(l1 as i64)..=(l1 as i64) {
        ind[(j + l as i64 - 1) as usize] = 1.0;
    }
    Ok(s.transpose() * ind)
}

/// Coordinate functional x_j as a slope-space vector.
pub fn site_vector(l: usize, j: i64) -> Result<DVector<f64>> {
    let n = 2 * l + 1;
    let idx = j + l as i64;
    if idx < 0 || idx >= n as i64 {
        return Err(Error::Boundary { site: j, lo: -(l as i64), hi: l as i64 });
    }
    let mut v = DVector::zeros(n);
    v[idx as usize] = 1.0;
    Ok(v)
}
