//! Slope configurations on a periodic ring or a finite centered window, the
//! quadratic on-site potential, and the two conserved linear functionals of
//! the conservative dynamics.

use crate::{Error, Result};

/// On-site potential V(x) = x^2 / 2.
#[inline]
pub fn potential(x: f64) -> f64 {
    0.5 * x * x
}

/// V'(x) = x.
#[inline]
pub fn potential_prime(x: f64) -> f64 {
    x
}

/// Where a configuration lives: a ring of `n` sites with wraparound indexing,
/// or a window of sites `-half_width ..= half_width` with hard edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Periodic { n: usize },
    Window { half_width: usize },
}

/// The two functionals conserved by the closed dynamics on a window:
/// `block_mean` is the average slope and `linear_mean` the first-moment
/// average, normalized so both are O(1) for O(1) slopes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservedPair {
    pub block_mean: f64,
    pub linear_mean: f64,
}

/// A slope field together with its topology. Window sites are indexed by
/// signed offsets from the center; ring sites by 0..n with wraparound.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeConfig {
    values: Vec<f64>,
    topology: Topology,
}

impl SlopeConfig {
    /// Ring of at least 5 sites (the interior stencil needs two neighbors on
    /// each side to stay unambiguous).
    pub fn periodic(values: Vec<f64>) -> Result<Self> {
        if values.len() < 5 {
            return Err(Error::InvalidParameter(format!(
                "periodic configuration needs >= 5 sites, got {}",
                values.len()
            )));
        }
        let n = values.len();
        Ok(Self { values, topology: Topology::Periodic { n } })
    }

    /// Window `-l ..= l`; `values` holds sites left to right and must have odd
    /// length `2l+1` with `l >= 2`.
    pub fn window(values: Vec<f64>) -> Result<Self> {
        let len = values.len();
        if len < 5 || len % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "window configuration needs odd length >= 5, got {len}"
            )));
        }
        let half_width = (len - 1) / 2;
        Ok(Self { values, topology: Topology::Window { half_width } })
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Window half-width `l`, if this is a window.
    pub fn half_width(&self) -> Option<usize> {
        match self.topology {
            Topology::Window { half_width } => Some(half_width),
            Topology::Periodic { .. } => None,
        }
    }

    /// Value at a signed site index. Rings wrap; windows reject sites outside
    /// `[-l, l]`.
    pub fn get(&self, site: i64) -> Result<f64> {
        Ok(self.values[self.flat_index(site)?])
    }

    /// Flat index into `values` for a signed site, after wrapping or bounds
    /// checking.
    pub fn flat_index(&self, site: i64) -> Result<usize> {
        match self.topology {
            Topology::Periodic { n } => {
                let n = n as i64;
                Ok(site.rem_euclid(n) as usize)
            }
            Topology::Window { half_width } => {
                let l = half_width as i64;
                if site < -l || site > l {
                    return Err(Error::Boundary { site, lo: -l, hi: l });
                }
                Ok((site + l) as usize)
            }
        }
    }

    /// Second difference of V'(x) at a site: V'(x_{i-1}) - 2 V'(x_i) + V'(x_{i+1}).
    /// Errors at window edges where a neighbor is missing.
    pub fn laplacian_slope(&self, site: i64) -> Result<f64> {
        let xm = self.get(site - 1)?;
        let x0 = self.get(site)?;
        let xp = self.get(site + 1)?;
        Ok(potential_prime(xm) - 2.0 * potential_prime(x0) + potential_prime(xp))
    }

    /// Total on-site energy.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|&x| potential(x)).sum()
    }

    /// The conserved pair. On a ring the linear functional is not defined and
    /// only the mean is meaningful; this method requires a window.
    pub fn conserved_pair(&self) -> Result<ConservedPair> {
        let l = match self.topology {
            Topology::Window { half_width } => half_width,
            Topology::Periodic { .. } => {
                return Err(Error::WrongTopology { required: "window" })
            }
        };
        let n = (2 * l + 1) as f64;
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (idx, &x) in self.values.iter().enumerate() {
            let j = idx as f64 - l as f64;
            sum += x;
            weighted += j * x;
        }
        Ok(ConservedPair {
            block_mean: sum / n,
            linear_mean: weighted / (l as f64 * (l as f64 + 1.0)),
        })
    }

    /// Mean slope, defined on both topologies.
    pub fn mean_slope(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}
