//! Equilibrium sampling. The product measure puts an independent N(alpha, 1)
//! slope on every site; conditioning it on the conserved functionals of a
//! window (or on the total slope of a ring) is an exact affine projection
//! because the covariance is the identity.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::lattice::{ConservedPair, SlopeConfig};
use crate::local_fn::Observable;
use crate::{Error, Result};

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for replica `stream` of run `seed`. The 64-bit
/// seed is expanded to the full key, and replicas get independent streams of
/// the same keyed cipher.
pub fn replica_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut s = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Unconditioned product measure with tilt `alpha`.
#[derive(Debug, Clone, Copy)]
pub struct GrandCanonical {
    pub alpha: f64,
}

impl GrandCanonical {
    fn fill(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.alpha + rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn sample_ring(&self, rng: &mut ChaCha8Rng, n: usize) -> Result<SlopeConfig> {
        SlopeConfig::periodic(self.fill(rng, n))
    }

    pub fn sample_window(&self, rng: &mut ChaCha8Rng, half_width: usize) -> Result<SlopeConfig> {
        SlopeConfig::window(self.fill(rng, 2 * half_width + 1))
    }
}

/// Product measure on a ring conditioned on the exact mean slope. This is the
/// stationary state of the closed periodic dynamics started at that mean.
#[derive(Debug, Clone, Copy)]
pub struct RingFiber {
    pub alpha: f64,
    pub n: usize,
}

impl RingFiber {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<SlopeConfig> {
        let gc = GrandCanonical { alpha: self.alpha };
        let mut z = gc.fill(rng, self.n);
        let shift = self.alpha - z.iter().sum::<f64>() / self.n as f64;
        for v in &mut z {
            *v += shift;
        }
        SlopeConfig::periodic(z)
    }
}

/// Product measure on the window `-l ..= l` conditioned on both conserved
/// functionals.
#[derive(Debug, Clone, Copy)]
pub struct CanonicalSpec {
    pub alpha: f64,
    pub half_width: usize,
    pub pair: ConservedPair,
}

impl CanonicalSpec {
    /// Orthogonal projection of a free sample onto the constraint plane. The
    /// constant and linear constraint directions are orthogonal, so the two
    /// corrections decouple.
    pub fn project(&self, z: &SlopeConfig) -> Result<SlopeConfig> {
        let l = z.half_width().ok_or(Error::WrongTopology { required: "window" })?;
        if l != self.half_width {
            return Err(Error::InvalidParameter(format!(
                "sample half-width {} does not match spec {}",
                l, self.half_width
            )));
        }
        let zp = z.conserved_pair()?;
        let c1 = self.pair.block_mean - zp.block_mean;
        let c2 = 3.0 * (self.pair.linear_mean - zp.linear_mean) / (2.0 * l as f64 + 1.0);
        let mut vals = z.values().to_vec();
        for (idx, v) in vals.iter_mut().enumerate() {
            let j = idx as f64 - l as f64;
            *v += c1 + c2 * j;
        }
        SlopeConfig::window(vals)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<SlopeConfig> {
        let z = GrandCanonical { alpha: self.alpha }.sample_window(rng, self.half_width)?;
        self.project(&z)
    }

    /// E[x_j] under the conditioned measure.
    pub fn conditional_mean(&self, j: i64) -> f64 {
        self.pair.block_mean
            + 3.0 * j as f64 * self.pair.linear_mean / (2.0 * self.half_width as f64 + 1.0)
    }

    /// Var(x_j) under the conditioned measure.
    pub fn conditional_variance(&self, j: i64) -> f64 {
        let l = self.half_width as f64;
        let n = 2.0 * l + 1.0;
        let sum_j2 = l * (l + 1.0) * n / 3.0;
        1.0 - 1.0 / n - (j * j) as f64 / sum_j2
    }
}

/// A Monte Carlo average with its independent-sample error bar.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: u64,
}

/// Averages `f` over `n` draws of `sample`. Rejects non-finite values.
pub fn mc_expectation<S, F>(n: u64, mut sample: S, mut f: F) -> Result<McEstimate>
where
    S: FnMut() -> Result<SlopeConfig>,
    F: FnMut(&SlopeConfig) -> Result<f64>,
{
    let mut acc = crate::stats::OnlineStats::new();
    for step in 0..n {
        let cfg = sample()?;
        let v = f(&cfg)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { step });
        }
        acc.push(v);
    }
    Ok(McEstimate { mean: acc.mean(), stderr: acc.stderr(), n: acc.n() })
}

/// Difference between the free and the conditioned expectation of `obs` at
/// the window center, estimated with coupled draws: each free sample is also
/// projected, so the two evaluations share noise and the difference
/// concentrates. Requires the observable to sit well inside the window
/// (span at most a quarter of the half-width).
pub fn ensemble_gap<O: Observable + ?Sized>(
    obs: &O,
    spec: &CanonicalSpec,
    n_samples: u64,
    rng: &mut ChaCha8Rng,
) -> Result<McEstimate> {
    if 4 * obs.span() > spec.half_width {
        return Err(Error::InvalidParameter(format!(
            "observable span {} too wide for window half-width {}",
            obs.span(),
            spec.half_width
        )));
    }
    let gc = GrandCanonical { alpha: spec.alpha };
    let mut acc = crate::stats::OnlineStats::new();
    for step in 0..n_samples {
        let z = gc.sample_window(rng, spec.half_width)?;
        let x = spec.project(&z)?;
        let d = obs.eval(&z, 0)? - obs.eval(&x, 0)?;
        if !d.is_finite() {
            return Err(Error::NonFinite { step });
        }
        acc.push(d);
    }
    Ok(McEstimate { mean: acc.mean(), stderr: acc.stderr(), n: acc.n() })
}
