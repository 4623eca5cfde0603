//! Dense fixed-dimension vectors for latent states and velocities.
//!
//! Every constructor and arithmetic operation checks that the result is
//! finite, so a [`LatentVector`] in hand never carries NaN or infinity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine_similarity`].
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LatentVector(Vec<f64>);

impl<'de> Deserialize<'de> for LatentVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        LatentVector::new(values).map_err(serde::de::Error::custom)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    /// Elementwise combination `f(a_k, b_k)` with dimension and finiteness checks.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_dim(other)?;
        let values: Vec<f64> = self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect();
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = self.0.iter().map(|&a| f(a)).collect();
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|a| c * a)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + alpha * b)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        dot(self, other)
    }

    pub fn norm(&self) -> f64 {
        norm(self)
    }
}

impl AsRef<[f64]> for LatentVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &LatentVector, b: &LatentVector) -> Result<f64> {
    a.same_dim(b)?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum())
}

pub fn norm(a: &LatentVector) -> f64 {
    // Scaled accumulation keeps very large or very small components from
    // overflowing or underflowing the sum of squares.
    let m = a.max_abs();
    if m == 0.0 {
        return 0.0;
    }
    let s: f64 = a.0.iter().map(|v| (v / m) * (v / m)).sum();
    m * s.sqrt()
}

/// Fast-path cosine of `a` against `b_k = f(u_k, p_k)`. All three slices
/// must have the same length.
///
/// Returns `None` when a squared norm or their product leaves the normal
/// range, in which case the caller needs the scaled computation.
pub(crate) fn cosine_fast(a: &[f64], u: &[f64], p: &[f64], f: impl Fn(f64, f64) -> f64) -> Option<f64> {
    // Four interleaved accumulators break the dependency chain of one sum.
    let (mut ab, mut aa, mut bb) = ([0.0; 4], [0.0; 4], [0.0; 4]);
    let (ca, cu, cp) = (a.chunks_exact(4), u.chunks_exact(4), p.chunks_exact(4));
    let (ra, ru, rp) = (ca.remainder(), cu.remainder(), cp.remainder());
    for ((xs, us), ps) in ca.zip(cu).zip(cp) {
        for k in 0..4 {
            let (x, y) = (xs[k], f(us[k], ps[k]));
            ab[k] += x * y;
            aa[k] += x * x;
            bb[k] += y * y;
        }
    }
    for (k, ((&x, &uk), &pk)) in ra.iter().zip(ru).zip(rp).enumerate() {
        let y = f(uk, pk);
        ab[k] += x * y;
        aa[k] += x * x;
        bb[k] += y * y;
    }
    let lanes = |s: [f64; 4]| (s[0] + s[1]) + (s[2] + s[3]);
    let (ab, aa, bb) = (lanes(ab), lanes(aa), lanes(bb));
    // sqrt(|a|^2 |b|^2) makes cos(a, -a) == -1 exactly.
    let sq = aa * bb;
    if !(aa.is_normal() && bb.is_normal() && sq.is_normal() && ab.is_finite()) {
        return None;
    }
    if aa.sqrt() < DEGENERATE_NORM || bb.sqrt() < DEGENERATE_NORM {
        return Some(0.0);
    }
    Some((ab / sq.sqrt()).clamp(-1.0, 1.0))
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// Returns 0 when either input has norm below [`DEGENERATE_NORM`], which
/// makes the adaptive guidance multiplier neutral.
pub fn cosine_similarity(a: &LatentVector, b: &LatentVector) -> Result<f64> {
    a.same_dim(b)?;
    if let Some(c) = cosine_fast(&a.0, &b.0, &b.0, |y, _| y) {
        return Ok(c);
    }
    let (na, nb) = (norm(a), norm(b));
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok(0.0);
    }
    let (ma, mb) = (a.max_abs(), b.max_abs());
    let scaled: f64 = a.0.iter().zip(&b.0).map(|(x, y)| (x / ma) * (y / mb)).sum();
    Ok((scaled / ((na / ma) * (nb / mb))).clamp(-1.0, 1.0))
}
