//! Guided Euler sampling from noise (`t = 1`) to data (`t = 0`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diagnostics::{TraceRow, TrajectoryTrace};
use crate::error::{Error, Result};
use crate::guidance::{cfg_combine, effective_scale, SchedulerParams, StepContext};
use crate::vecmath::{cosine_similarity, LatentVector};
use crate::velocity::{ConditionLabel, VelocityField};

/// States with a component above this magnitude count as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Increasing time points `t_1 < ... < t_N` in `[0, 1]`, indexed from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("time grid needs at least 2 points, got {n}")));
        }
        let last = (n - 1) as f64;
        Ok(Self {
            points: (0..n).map(|k| k as f64 / last).collect(),
        })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config(format!("time grid needs at least 2 points, got {}", points.len())));
        }
        if points[0] < 0.0 || points[points.len() - 1] > 1.0 || points.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("time grid must lie in [0, 1]".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("time grid must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `t_i` for `1 <= i <= N`.
    pub fn t(&self, i: usize) -> f64 {
        self.points[i - 1]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenRunSpec {
    pub condition: ConditionLabel,
    pub scheduler: SchedulerParams,
    pub grid: TimeGrid,
    pub seed: u64,
}

/// Standard-normal vector from the seed's first stream.
pub fn initial_noise(dim: usize, seed: u64) -> Result<LatentVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentVector::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// Maps arithmetic overflow to a divergence at `step` and applies the magnitude guard.
pub(crate) fn guard(step: usize, state: Result<LatentVector>) -> Result<LatentVector> {
    match state {
        Ok(z) if z.max_abs() > DIVERGENCE_LIMIT => Err(Error::Divergence { step }),
        Ok(z) => Ok(z),
        Err(Error::NonFinite { .. }) => Err(Error::Divergence { step }),
        Err(e) => Err(e),
    }
}

pub fn run_label(prefix: &str, scheduler: &str, seed: u64) -> String {
    format!("{prefix}-{scheduler}-{seed}")
}

/// Runs the guided sampler from `z_{t_N} ~ N(0, I)` down to `t_1`.
///
/// Each step makes one unconditional and one conditional evaluation. The
/// alignment `cos(v_uncond, v_cond)` is only computed for schedulers that
/// consume it; others record 0.
pub fn generate<F: VelocityField + ?Sized>(field: &F, spec: &GenRunSpec) -> Result<(LatentVector, TrajectoryTrace)> {
    field.check_condition(spec.condition)?;
    spec.scheduler.validate()?;
    let n = spec.grid.len();
    let label = spec.scheduler.kind.as_str();
    let mut trace = TrajectoryTrace::new(run_label("generate", label, spec.seed), label, spec.seed);
    let mut z = initial_noise(field.dim(), spec.seed)?;

    for i in (2..=n).rev() {
        let t = spec.grid.t(i);
        let v_uncond = guard(i, field.raw_velocity(&z, t, ConditionLabel::Unconditional))?;
        let v_cond = guard(i, field.raw_velocity(&z, t, spec.condition))?;
        let alignment = if spec.scheduler.needs_alignment() {
            Some(cosine_similarity(&v_uncond, &v_cond)?)
        } else {
            None
        };
        let ctx = StepContext::new(i, t, alignment, n)?;
        let scale = effective_scale(&spec.scheduler, &ctx)?;
        let guided = guard(i, cfg_combine(&v_uncond, &v_cond, scale))?;
        let dt = spec.grid.t(i - 1) - t;
        z = guard(i, z.axpy(dt, &guided))?;
        trace.push(TraceRow {
            step_index: i,
            t,
            sigma: ctx.sigma,
            alignment: alignment.unwrap_or(0.0),
            effective_scale: scale,
            state_norm: z.norm(),
        })?;
    }
    trace.endpoint = Some(z.clone());
    Ok((z, trace))
}
