//! Analytic flow-matching velocity fields.
//!
//! Data `x` is drawn from an isotropic Gaussian mixture, noise `eps` from
//! `N(0, I)`, and the interpolant is `z_t = (1 - t) x + t eps`. The exact
//! marginal velocity is `E[eps - x | z_t = z]`. For one Gaussian
//! `N(m, v I)` the pair `(z_t, eps - x)` is jointly Gaussian, which gives
//!
//! ```text
//! v(z, t) = (t - (1 - t) v) / ((1 - t)^2 v + t^2) * (z - (1 - t) m) - m
//! ```
//!
//! For a mixture the velocity is the posterior-weighted sum of the
//! per-component velocities, with posterior weights proportional to
//! `w_k N(z; (1 - t) m_k, ((1 - t)^2 v_k + t^2) I)`.

pub mod oracle;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath::LatentVector;

/// Tolerance on the sum of mixture weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub mean: LatentVector,
    pub variance: f64,
    pub weight: f64,
}

impl GaussianComponent {
    pub fn new(mean: LatentVector, variance: f64, weight: f64) -> Result<Self> {
        let c = Self {
            mean,
            variance,
            weight,
        };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::Config(format!("component variance must be positive, got {}", self.variance)));
        }
        if !(self.weight > 0.0 && self.weight <= 1.0) {
            return Err(Error::Config(format!("component weight must be in (0, 1], got {}", self.weight)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }
}

/// Which velocity to evaluate: the full mixture or one component of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConditionLabel {
    Unconditional,
    Component(usize),
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionLabel::Unconditional => f.write_str("unconditional"),
            ConditionLabel::Component(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ConditionRepr {
    Index(usize),
    Name(String),
}

impl Serialize for ConditionLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            ConditionLabel::Unconditional => ConditionRepr::Name("unconditional".into()),
            ConditionLabel::Component(k) => ConditionRepr::Index(k),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ConditionLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        match ConditionRepr::deserialize(deserializer)? {
            ConditionRepr::Index(k) => Ok(ConditionLabel::Component(k)),
            ConditionRepr::Name(s) if s == "unconditional" || s == "none" => Ok(ConditionLabel::Unconditional),
            ConditionRepr::Name(s) => Err(serde::de::Error::custom(format!(
                "unknown condition {s:?}, expected \"unconditional\" or a component index"
            ))),
        }
    }
}

/// A conditioned velocity field `(z, t, condition) -> velocity`.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn n_components(&self) -> usize;

    fn raw_velocity(&self, z: &LatentVector, t: f64, condition: ConditionLabel) -> Result<LatentVector>;

    fn check_condition(&self, condition: ConditionLabel) -> Result<()> {
        match condition {
            ConditionLabel::Component(index) if index >= self.n_components() => Err(Error::Condition {
                index,
                n_components: self.n_components(),
            }),
            _ => Ok(()),
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain { t })
    }
}

/// Variance of `z_t` for one component: `(1 - t)^2 v + t^2`.
fn marginal_variance(t: f64, variance: f64) -> f64 {
    let s = 1.0 - t;
    s * s * variance + t * t
}

/// Exact flow-matching velocity for data `N(mean, variance I)`.
pub fn gaussian_flow_velocity(z: &LatentVector, t: f64, mean: &LatentVector, variance: f64) -> Result<LatentVector> {
    check_time(t)?;
    if variance.is_nan() || variance <= 0.0 {
        return Err(Error::Config(format!("variance must be positive, got {variance}")));
    }
    let s = 1.0 - t;
    let gain = (t - s * variance) / marginal_variance(t, variance);
    z.zip_map(mean, |zk, mk| gain * (zk - s * mk) - mk)
}

/// Posterior responsibilities of each component for `z_t = z`.
pub fn posterior_weights(z: &LatentVector, t: f64, components: &[GaussianComponent]) -> Result<Vec<f64>> {
    check_time(t)?;
    if components.is_empty() {
        return Err(Error::Config("mixture has no components".into()));
    }
    let s = 1.0 - t;
    let d = z.dim() as f64;
    let mut logw = Vec::with_capacity(components.len());
    for c in components {
        if c.dim() != z.dim() {
            return Err(Error::Dimension {
                expected: z.dim(),
                found: c.dim(),
            });
        }
        let var = marginal_variance(t, c.variance);
        let sq: f64 = z
            .as_slice()
            .iter()
            .zip(c.mean.as_slice())
            .map(|(zk, mk)| {
                let r = zk - s * mk;
                r * r
            })
            .sum();
        logw.push(c.weight.ln() - 0.5 * d * var.ln() - 0.5 * sq / var);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for w in logw.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    for w in logw.iter_mut() {
        *w /= total;
    }
    Ok(logw)
}

/// Marginal velocity of a Gaussian mixture.
pub fn mixture_flow_velocity(z: &LatentVector, t: f64, components: &[GaussianComponent]) -> Result<LatentVector> {
    let weights = posterior_weights(z, t, components)?;
    let mut acc = vec![0.0; z.dim()];
    for (c, w) in components.iter().zip(&weights) {
        let vk = gaussian_flow_velocity(z, t, &c.mean, c.variance)?;
        for (a, v) in acc.iter_mut().zip(vk.as_slice()) {
            *a += w * v;
        }
    }
    LatentVector::new(acc)
}

/// Velocity field backed by an isotropic Gaussian mixture.
///
/// `Unconditional` evaluates the full mixture; `Component(k)` evaluates
/// component `k` alone.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureField {
    components: Vec<GaussianComponent>,
}

impl MixtureField {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::Config("mixture has no components".into()));
        };
        let dim = first.dim();
        for c in &components {
            c.validate()?;
            if c.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: c.dim(),
                });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    pub fn single(mean: LatentVector, variance: f64) -> Result<Self> {
        Self::new(vec![GaussianComponent::new(mean, variance, 1.0)?])
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }
}

impl VelocityField for MixtureField {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn n_components(&self) -> usize {
        self.components.len()
    }

    fn raw_velocity(&self, z: &LatentVector, t: f64, condition: ConditionLabel) -> Result<LatentVector> {
        if z.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: z.dim(),
            });
        }
        match condition {
            ConditionLabel::Unconditional => mixture_flow_velocity(z, t, &self.components),
            ConditionLabel::Component(k) => {
                self.check_condition(condition)?;
                let c = &self.components[k];
                gaussian_flow_velocity(z, t, &c.mean, c.variance)
            }
        }
    }
}

/// Wraps a field and counts `raw_velocity` calls.
#[derive(Debug)]
pub struct CountingField<F> {
    inner: F,
    calls: AtomicU64,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn n_components(&self) -> usize {
        self.inner.n_components()
    }

    fn raw_velocity(&self, z: &LatentVector, t: f64, condition: ConditionLabel) -> Result<LatentVector> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.raw_velocity(z, t, condition)
    }
}
