//! Bond mobility coefficients. A mobility reads the three slopes around a
//! bond and returns a strictly positive rate; it must stay uniformly bounded
//! away from 0 and infinity for the dynamics and the estimators to be well
//! posed.

use std::fmt;
use std::sync::Arc;

use crate::{Error, Result};

/// Smooth saturating profile s(x) = x^2 / (1 + x^2) used by [`Mobility::Bump`].
#[inline]
fn bump_s(x: f64) -> f64 {
    let x2 = x * x;
    x2 / (1.0 + x2)
}

/// s'(x) = 2x / (1 + x^2)^2.
#[inline]
fn bump_s_prime(x: f64) -> f64 {
    let d = 1.0 + x * x;
    2.0 * x / (d * d)
}

type EvalFn = dyn Fn(&[f64; 3]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64; 3]) -> [f64; 3] + Send + Sync;

/// Mobility of the bond between sites i and i+1, as a function of the slopes
/// (x_{i-1}, x_i, x_{i+1}) centered on the left site.
#[derive(Clone)]
pub enum Mobility {
    /// a = value everywhere.
    Constant { value: f64 },
    /// a = 1 + beta * (s(x_{i-1}) + s(x_i) + s(x_{i+1})), range [1, 1+3beta].
    Bump { beta: f64 },
    /// User-supplied rate with matching gradient and bounds.
    Custom {
        name: String,
        eval: Arc<EvalFn>,
        grad: Arc<GradFn>,
        bounds: (f64, f64),
    },
}

impl fmt::Debug for Mobility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

impl Mobility {
    pub fn constant(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "constant mobility must be positive and finite, got {value}"
            )));
        }
        Ok(Mobility::Constant { value })
    }

    /// `beta` must lie in (0, 1/3) so the relative modulation stays small.
    pub fn bump(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0 && beta < 1.0 / 3.0) {
            return Err(Error::InvalidParameter(format!(
                "bump amplitude must lie in (0, 1/3), got {beta}"
            )));
        }
        Ok(Mobility::Bump { beta })
    }

    /// Parses "constant:VALUE" or "bump:BETA".
    pub fn by_name(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("mobility spec '{s}' lacks ':'")))?;
        let v: f64 = arg
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad mobility parameter in '{s}'")))?;
        match kind.trim() {
            "constant" => Self::constant(v),
            "bump" => Self::bump(v),
            other => Err(Error::Parse(format!("unknown mobility kind '{other}'"))),
        }
    }

    /// Rate at slopes (x_{i-1}, x_i, x_{i+1}).
    #[inline]
    pub fn eval(&self, window: &[f64; 3]) -> f64 {
        match self {
            Mobility::Constant { value } => *value,
            Mobility::Bump { beta } => {
                1.0 + beta * (bump_s(window[0]) + bump_s(window[1]) + bump_s(window[2]))
            }
            Mobility::Custom { eval, .. } => eval(window),
        }
    }

    /// Gradient with respect to the three window slopes.
    #[inline]
    pub fn grad(&self, window: &[f64; 3]) -> [f64; 3] {
        match self {
            Mobility::Constant { .. } => [0.0; 3],
            Mobility::Bump { beta } => [
                beta * bump_s_prime(window[0]),
                beta * bump_s_prime(window[1]),
                beta * bump_s_prime(window[2]),
            ],
            Mobility::Custom { grad, .. } => grad(window),
        }
    }

    /// Uniform (lower, upper) bounds on the rate.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Mobility::Constant { value } => (*value, *value),
            Mobility::Bump { beta } => (1.0, 1.0 + 3.0 * beta),
            Mobility::Custom { bounds, .. } => *bounds,
        }
    }

    /// Stable textual identity, used in table headers and config matching.
    pub fn describe(&self) -> String {
        match self {
            Mobility::Constant { value } => format!("constant:{value:?}"),
            Mobility::Bump { beta } => format!("bump:{beta:?}"),
            Mobility::Custom { name, .. } => format!("custom:{name}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_and_bump_validation() {
        assert!(Mobility::constant(0.0).is_err());
        assert!(Mobility::constant(-1.0).is_err());
        assert!(Mobility::constant(f64::NAN).is_err());
        assert!(Mobility::bump(0.0).is_err());
        assert!(Mobility::bump(1.0 / 3.0).is_err());
        assert!(Mobility::bump(0.1).is_ok());
    }

    #[test]
    fn by_name_round_trips_describe() {
        for spec in ["constant:2.0", "bump:0.25"] {
            let m = Mobility::by_name(spec).unwrap();
            let again = Mobility::by_name(&m.describe()).unwrap();
            assert_eq!(m.describe(), again.describe());
        }
        assert!(Mobility::by_name("sine:1").is_err());
        assert!(Mobility::by_name("constant").is_err());
    }

    #[test]
    fn bump_limits() {
        let m = Mobility::bump(0.2).unwrap();
        assert!((m.eval(&[0.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        // Saturates toward 1 + 3 beta for large slopes.
        let big = m.eval(&[1e6, -1e6, 1e6]);
        assert!(big < 1.6 && big > 1.6 - 1e-8);
    }

    proptest! {
        #[test]
        fn bump_stays_inside_bounds(beta in 0.01f64..0.33, w in proptest::array::uniform3(-50.0f64..50.0)) {
            let m = Mobility::bump(beta).unwrap();
            let (lo, hi) = m.bounds();
            let v = m.eval(&w);
            prop_assert!(v >= lo && v <= hi);
        }

        #[test]
        fn bump_gradient_matches_finite_difference(
            beta in 0.05f64..0.32,
            w in proptest::array::uniform3(-3.0f64..3.0),
        ) {
            let m = Mobility::bump(beta).unwrap();
            let g = m.grad(&w);
            let h = 1e-6;
            for k in 0..3 {
                let mut wp = w;
                let mut wm = w;
                wp[k] += h;
                wm[k] -= h;
                let fd = (m.eval(&wp) - m.eval(&wm)) / (2.0 * h);
                prop_assert!((g[k] - fd).abs() < 1e-7, "component {k}: {} vs {}", g[k], fd);
            }
        }
    }
}
