//! Gauss-Hermite quadrature against the standard normal weight, built by the
//! Golub-Welsch eigen-decomposition of the Jacobi matrix. Used as a noise-free
//! oracle for product-measure expectations of mobility functionals.

use nalgebra::DMatrix;

use crate::mobility::Mobility;
use crate::{Error, Result};

/// Nodes and weights such that sum_i w_i f(t_i) ~ E[f(Z)], Z ~ N(0,1),
/// exact for polynomials of degree < 2*order.
pub fn gauss_hermite(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 || order > 200 {
        return Err(Error::InvalidParameter(format!(
            "quadrature order {order} out of range"
        )));
    }
    // Jacobi matrix of the monic orthogonal polynomials for N(0,1):
    // zero diagonal, off-diagonal sqrt(k).
    let mut j = DMatrix::zeros(order, order);
    for k in 1..order {
        let b = (k as f64).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let v0 = eig.eigenvectors[(0, i)];
            (node, v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(pairs.into_iter().unzip())
}

/// E[f(Z1,..,Zd)] for i.i.d. Z ~ N(alpha,1) by a full tensor grid. `d` is
/// fixed at 3 (the mobility window).
pub fn expect_window(alpha: f64, order: usize, f: impl Fn(&[f64; 3]) -> f64) -> Result<f64> {
    let (nodes, weights) = gauss_hermite(order)?;
    let mut acc = 0.0;
    for (i, &ti) in nodes.iter().enumerate() {
        for (j, &tj) in nodes.iter().enumerate() {
            let wij = weights[i] * weights[j];
            for (k, &tk) in nodes.iter().enumerate() {
                acc += wij * weights[k] * f(&[alpha + ti, alpha + tj, alpha + tk]);
            }
        }
    }
    Ok(acc)
}

/// Quadrature values of (E[a], E[1/a]) under the tilted product measure.
pub fn mobility_moments(mob: &Mobility, alpha: f64, order: usize) -> Result<(f64, f64)> {
    let mean = expect_window(alpha, order, |w| mob.eval(w))?;
    let inv_mean = expect_window(alpha, order, |w| 1.0 / mob.eval(w))?;
    Ok((mean, inv_mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_standard_normal() {
        let (nodes, weights) = gauss_hermite(8).unwrap();
        let m = |p: i32| -> f64 {
            nodes.iter().zip(&weights).map(|(t, w)| w * t.powi(p)).sum()
        };
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-10);
        assert!((m(8) - 105.0).abs() < 1e-9);
    }

    #[test]
    fn tensor_grid_separates() {
        // E[(z1+1)(z2+2)(z3+3)] with alpha=0 factorizes to 1*2*3.
        let v = expect_window(0.0, 10, |w| (w[0] + 1.0) * (w[1] + 2.0) * (w[2] + 3.0)).unwrap();
        assert!((v - 6.0).abs() < 1e-11);
    }

    #[test]
    fn constant_mobility_moments() {
        let mob = Mobility::constant(2.5).unwrap();
        let (mean, inv) = mobility_moments(&mob, 1.0, 12).unwrap();
        assert!((mean - 2.5).abs() < 1e-12);
        assert!((inv - 0.4).abs() < 1e-12);
    }

    #[test]
    fn bump_moments_bracket() {
        // 1 <= E[a] <= 1+3beta, and Jensen: 1/E[1/a] <= E[a].
        let mob = Mobility::bump(0.1).unwrap();
        let (mean, inv) = mobility_moments(&mob, 0.0, 96).unwrap();
        assert!(mean > 1.0 && mean < 1.3);
        assert!(1.0 / inv <= mean);
        // The mean factorizes: E[a] = 1 + 3 beta E[s(z)] with s = x^2/(1+x^2),
        // and the 1-d integral is trapezoid-exact to machine precision on a
        // fine grid, which pins the slowly converging tensor rule.
        let h = 1e-3;
        let m = (12.0 / h) as i64;
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let one_d: f64 = (-m..=m)
            .map(|k| {
                let x = k as f64 * h;
                let s = x * x / (1.0 + x * x);
                norm * (-0.5 * x * x).exp() * s * h
            })
            .sum();
        let reference = 1.0 + 0.3 * one_d;
        assert!((mean - reference).abs() < 1e-7, "{mean} vs {reference}");
        // The inverse moment has no 1-d reduction; require order convergence.
        let (_, inv128) = mobility_moments(&mob, 0.0, 128).unwrap();
        assert!((inv - inv128).abs() < 1e-7);
    }
}
