//! Sample statistics against known mixtures, and a reference solution of
//! the affine single-Gaussian guided ODE.

use crate::error::{Error, Result};
use crate::vecmath::LatentVector;
use crate::velocity::GaussianComponent;

pub const REFERENCE_SUBSTEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    points: Vec<LatentVector>,
    provenance: Vec<String>,
}

impl SampleBatch {
    pub fn new(points: Vec<LatentVector>, provenance: Vec<String>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::Contract("sample batch is empty".into()));
        };
        let d = first.dim();
        if let Some(p) = points.iter().find(|p| p.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: p.dim(),
            });
        }
        Ok(Self { points, provenance })
    }

    pub fn points(&self) -> &[LatentVector] {
        &self.points
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStats {
    pub count: usize,
    pub mass: f64,
    /// Empirical mean of the assigned points; `None` when nothing was assigned.
    pub mean: Option<Vec<f64>>,
    /// Per-coordinate (population) variance of the assigned points.
    pub variance: Option<Vec<f64>>,
}

/// Hard-assigns each point to the nearest component mean.
///
/// The returned masses sum to exactly 1 when added in component order.
pub fn component_assignment_stats(batch: &SampleBatch, components: &[GaussianComponent]) -> Result<Vec<ComponentStats>> {
    if components.is_empty() {
        return Err(Error::Config("no components to assign to".into()));
    }
    let d = batch.dim();
    if let Some(c) = components.iter().find(|c| c.dim() != d) {
        return Err(Error::Dimension {
            expected: d,
            found: c.dim(),
        });
    }
    let k = components.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; d]; k];
    let mut sq = vec![vec![0.0; d]; k];
    for p in batch.points() {
        let nearest = components
            .iter()
            .map(|c| {
                p.as_slice()
                    .iter()
                    .zip(c.mean.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .enumerate()
            .fold((0, f64::INFINITY), |best, (j, dist)| if dist < best.1 { (j, dist) } else { best })
            .0;
        counts[nearest] += 1;
        for (j, x) in p.as_slice().iter().enumerate() {
            sums[nearest][j] += x;
            sq[nearest][j] += x * x;
        }
    }

    let n = batch.len() as f64;
    let mut masses: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    // Close the sum: the last assigned component takes the remainder.
    if let Some(last) = counts.iter().rposition(|&c| c > 0) {
        let before: f64 = masses[..last].iter().sum();
        masses[last] = 1.0 - before;
    }

    Ok((0..k)
        .map(|j| {
            let c = counts[j];
            let (mean, variance) = if c == 0 {
                (None, None)
            } else {
                let cf = c as f64;
                let mean: Vec<f64> = sums[j].iter().map(|s| s / cf).collect();
                let var = sq[j]
                    .iter()
                    .zip(&mean)
                    .map(|(s, m)| (s / cf - m * m).max(0.0))
                    .collect();
                (Some(mean), Some(var))
            };
            ComponentStats {
                count: c,
                mass: masses[j],
                mean,
                variance,
            }
        })
        .collect())
}

/// Scalar Gaussian data distribution `N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarGaussian {
    pub mean: f64,
    pub variance: f64,
}

/// Guided velocity built from two scalar Gaussian branches. It is affine in
/// `z`, so the sampling ODE is linear: `dz/dt = a(t) z + b(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineGuidedFlow {
    pub uncond: ScalarGaussian,
    pub cond: ScalarGaussian,
    pub scale: f64,
}

impl AffineGuidedFlow {
    /// A single-Gaussian field, where both branches coincide.
    pub fn single(mean: f64, variance: f64, scale: f64) -> Self {
        let g = ScalarGaussian { mean, variance };
        Self {
            uncond: g,
            cond: g,
            scale,
        }
    }

    fn branch(g: ScalarGaussian, t: f64) -> (f64, f64) {
        let s = 1.0 - t;
        let gain = (t - s * g.variance) / (s * s * g.variance + t * t);
        (gain, -gain * s * g.mean - g.mean)
    }

    /// `(a(t), b(t))` such that the guided velocity is `a z + b`.
    pub fn coefficients(&self, t: f64) -> (f64, f64) {
        let (au, bu) = Self::branch(self.uncond, t);
        let (ac, bc) = Self::branch(self.cond, t);
        let w = self.scale;
        ((1.0 - w) * au + w * ac, (1.0 - w) * bu + w * bc)
    }

    pub fn velocity(&self, z: f64, t: f64) -> f64 {
        let (a, b) = self.coefficients(t);
        a * z + b
    }
}

/// Endpoint of the affine ODE from `(t_start, z0)` to `t_end`, by classical
/// RK4 with `substeps` uniform steps.
pub fn linear_ode_reference_with(z0: f64, t_start: f64, t_end: f64, flow: &AffineGuidedFlow, substeps: usize) -> Result<f64> {
    for t in [t_start, t_end] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain { t });
        }
    }
    if t_start == t_end {
        return Ok(z0);
    }
    let h = (t_end - t_start) / substeps.max(1) as f64;
    let mut z = z0;
    for k in 0..substeps.max(1) {
        let t = t_start + k as f64 * h;
        let k1 = flow.velocity(z, t);
        let k2 = flow.velocity(z + 0.5 * h * k1, t + 0.5 * h);
        let k3 = flow.velocity(z + 0.5 * h * k2, t + 0.5 * h);
        let k4 = flow.velocity(z + h * k3, t + h);
        z += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    Ok(z)
}

pub fn linear_ode_reference(z0: f64, t_start: f64, t_end: f64, flow: &AffineGuidedFlow) -> Result<f64> {
    linear_ode_reference_with(z0, t_start, t_end, flow, REFERENCE_SUBSTEPS)
}
