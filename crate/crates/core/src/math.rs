//! Shared numeric utilities: tag-derived random streams, the probability
//! simplex, a central-difference gradient oracle and small dense helpers.
//!
//! Every reduction in the crate runs in a fixed index order so that results
//! are bit-reproducible regardless of how work is scheduled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A deterministic random stream identified by `(root_seed, tag)`.
///
/// The sub-seed is the SHA-256 digest of the little-endian seed followed by
/// the UTF-8 tag, so streams are identical across runs and platforms and
/// independent of the order in which they are created.
#[derive(Debug, Clone)]
pub struct RngStream {
    root_seed: u64,
    tag: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }
}

pub fn derive_stream(root_seed: u64, tag: &str) -> RngStream {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    RngStream {
        root_seed,
        tag: tag.to_owned(),
        rng: ChaCha8Rng::from_seed(seed),
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// A point of the probability simplex: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

pub const SIMPLEX_TOL: f64 = 1e-9;

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("probability vector must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::invalid(format!("negative probability {v}")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "uniform distribution over zero atoms");
        Self(vec![1.0 / len as f64; len])
    }

    /// Point mass at `index`.
    pub fn vertex(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Self(v)
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite);
        }
        if weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid("negative weight"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("weights sum to zero"));
        }
        Ok(Self(weights.iter().map(|w| w / total).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Euclidean projection onto the probability simplex (sort and threshold).
///
/// Inputs already on the simplex (to within `1e-12` in total mass) are
/// returned unchanged, which makes the projection exactly idempotent.
pub fn project_simplex(v: &[f64]) -> Result<ProbabilityVector> {
    if v.is_empty() {
        return Err(Error::invalid("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    if v.iter().all(|x| *x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-12 {
        return Ok(ProbabilityVector(v.to_vec()));
    }

    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - tau).max(0.0)).collect();
    // absorb the last ulp of rounding so the sum invariant holds tightly
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|x| *x /= total);
    }
    Ok(ProbabilityVector(out))
}

/// Central-difference gradient estimate `(f(x + h e_j) - f(x - h e_j)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    try_finite_diff_grad(|p| Ok::<_, std::convert::Infallible>(f(p)), x, h)
        .unwrap_or_else(|never| match never {})
}

/// Fallible variant of [`finite_diff_grad`]; the first evaluation error is
/// returned unchanged.
pub fn try_finite_diff_grad<F, E>(mut f: F, x: &[f64], h: f64) -> std::result::Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, E>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f(&probe)?;
        probe[j] = x[j] - h;
        let minus = f(&probe)?;
        probe[j] = x[j];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a - b‖ / max(‖b‖, floor)`, the relative error used by gradient checks.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(b).max(floor)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn linf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Numerically stable `log Σ exp(v_i)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Weighted mean in index order: `Σ w_i v_i / Σ w_i`.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total
}
