//! Seeded random streams.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`), whose output is
//! fully specified and platform independent. Independent sub-streams are
//! derived from `(master seed, purpose, index)` with a SplitMix64 mixer, so
//! drawing more numbers for one purpose (say, batching) never shifts the
//! numbers seen by another (say, partitioning).
//!
//! Gamma variates use Marsaglia–Tsang (`rand_distr::Gamma`); for shape < 1
//! the boost `Gamma(a) = Gamma(a + 1) * U^(1/a)` is applied in log space so
//! that Dirichlet draws with tiny concentrations stay strictly positive.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{config_err, Result};

/// Purpose tags for sub-stream derivation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Data = 1,
    Partition = 2,
    ModelInit = 3,
    HypernetInit = 4,
    Embedding = 5,
    Cohort = 6,
    Batching = 7,
    NovelClient = 8,
    Sfda = 9,
    Analysis = 10,
}

/// Deterministic random stream (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Sub-stream for `purpose`, further split by `index` (round, client, ...).
    pub fn derive(seed: u64, purpose: Stream, index: u64) -> Self {
        let mixed = splitmix64(splitmix64(seed ^ splitmix64(purpose as u64)) ^ index);
        Self::new(mixed)
    }

    /// Sub-stream split by two indices.
    pub fn derive2(seed: u64, purpose: Stream, a: u64, b: u64) -> Self {
        Self::derive(splitmix64(seed ^ a.rotate_left(17)), purpose, b)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer on `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Natural log of a Gamma(shape, 1) variate.
    pub fn log_gamma_variate(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let g = Gamma::new(shape + 1.0, 1.0).expect("valid gamma shape");
            let boosted: f64 = g.sample(&mut self.inner);
            // 1 - U lies in (0, 1], keeping the log finite.
            let u = 1.0 - self.uniform();
            boosted.ln() + u.ln() / shape
        } else {
            let g = Gamma::new(shape, 1.0).expect("valid gamma shape");
            let v: f64 = g.sample(&mut self.inner);
            v.ln()
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, returned in increasing order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        let mut chosen = idx[..k].to_vec();
        chosen.sort_unstable();
        chosen
    }

    /// Index drawn from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        // Rounding can leave u marginally above the last cumulative weight.
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

pub fn sample_uniform(rng: &mut Rng, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return config_err(format!(
            "uniform bounds must satisfy lo < hi, got [{lo}, {hi})"
        ));
    }
    Ok((0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect())
}

pub fn sample_gaussian(rng: &mut Rng, mean: f64, std: f64, n: usize) -> Result<Vec<f64>> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return config_err(format!("gaussian std must be finite and >= 0, got {std}"));
    }
    Ok((0..n).map(|_| mean + std * rng.gaussian()).collect())
}

/// Dirichlet(alpha) via normalized Gamma draws.
pub fn sample_dirichlet(rng: &mut Rng, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return config_err("dirichlet needs at least one concentration");
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return config_err(format!(
            "dirichlet concentrations must be positive, got {a}"
        ));
    }
    let logs: Vec<f64> = alpha.iter().map(|&a| rng.log_gamma_variate(a)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs
        .iter()
        .map(|l| (l - max).exp().max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}
