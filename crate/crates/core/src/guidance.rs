//! Guidance-scale schedulers and the classifier-free guidance combination.
//!
//! The adaptive rule scales the nominal guidance `lambda` by
//! `exp(kappa * (2 sigma - 1) * s)` where `sigma = 1 - t` is the signal
//! level and `s` is a cosine alignment in `[-1, 1]`. The multiplier is
//! confined to `[e^-kappa, e^kappa]`, equals 1 at `sigma = 1/2`, and is
//! identically 1 when `kappa = 0`.
//!
//! The remaining kinds are generic baselines for ablations:
//! `Monotone` drops the alignment term, `Interval` guides only inside a
//! time window, and `ZeroInit` switches guidance off for the first
//! high-noise iterations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath::LatentVector;

pub const DEFAULT_INTERVAL: (f64, f64) = (0.2, 0.8);
pub const DEFAULT_ZERO_STEPS: usize = 1;
/// Modulation strength used for generation runs.
pub const DEFAULT_KAPPA_GEN: f64 = 1.0;
/// Modulation strength used for the editing target scale.
pub const DEFAULT_KAPPA_EDIT: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Fixed,
    Vags,
    Monotone,
    Interval,
    ZeroInit,
}

impl SchedulerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Fixed => "fixed",
            SchedulerKind::Vags => "vags",
            SchedulerKind::Monotone => "monotone",
            SchedulerKind::Interval => "interval",
            SchedulerKind::ZeroInit => "zero_init",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_interval() -> (f64, f64) {
    DEFAULT_INTERVAL
}

fn default_zero_steps() -> usize {
    DEFAULT_ZERO_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerParams {
    pub kind: SchedulerKind,
    #[serde(rename = "lambda")]
    pub base_scale: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "default_interval")]
    pub interval: (f64, f64),
    #[serde(default = "default_zero_steps")]
    pub zero_steps: usize,
}

impl SchedulerParams {
    fn with_kind(kind: SchedulerKind, base_scale: f64, kappa: f64) -> Self {
        Self {
            kind,
            base_scale,
            kappa,
            interval: DEFAULT_INTERVAL,
            zero_steps: DEFAULT_ZERO_STEPS,
        }
    }

    pub fn fixed(base_scale: f64) -> Self {
        Self::with_kind(SchedulerKind::Fixed, base_scale, 0.0)
    }

    pub fn vags(base_scale: f64, kappa: f64) -> Self {
        Self::with_kind(SchedulerKind::Vags, base_scale, kappa)
    }

    pub fn monotone(base_scale: f64, kappa: f64) -> Self {
        Self::with_kind(SchedulerKind::Monotone, base_scale, kappa)
    }

    pub fn interval(base_scale: f64, t_lo: f64, t_hi: f64) -> Self {
        Self {
            interval: (t_lo, t_hi),
            ..Self::with_kind(SchedulerKind::Interval, base_scale, 0.0)
        }
    }

    pub fn zero_init(base_scale: f64, zero_steps: usize) -> Self {
        Self {
            zero_steps,
            ..Self::with_kind(SchedulerKind::ZeroInit, base_scale, 0.0)
        }
    }

    /// Whether the rule consumes a velocity alignment.
    pub fn needs_alignment(&self) -> bool {
        self.kind == SchedulerKind::Vags
    }

    /// The interval `[lambda e^-kappa, lambda e^kappa]` the adaptive kinds stay in.
    pub fn scale_bounds(&self) -> (f64, f64) {
        (self.base_scale * (-self.kappa).exp(), self.base_scale * self.kappa.exp())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_scale >= 0.0 && self.base_scale.is_finite()) {
            return Err(Error::validation("lambda", format!("must be finite and >= 0, got {}", self.base_scale)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::validation("kappa", format!("must be finite and >= 0, got {}", self.kappa)));
        }
        let (lo, hi) = self.interval;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::validation(
                "interval",
                format!("need 0 <= t_lo < t_hi <= 1, got [{lo}, {hi}]"),
            ));
        }
        if self.zero_steps < 1 {
            return Err(Error::validation("zero_steps", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-step inputs to a scheduler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    /// 1-based grid index `i`; sampling runs from `n_steps` down to 2.
    pub step_index: usize,
    pub t: f64,
    pub sigma: f64,
    pub alignment: Option<f64>,
    pub n_steps: usize,
}

impl StepContext {
    pub fn new(step_index: usize, t: f64, alignment: Option<f64>, n_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain { t });
        }
        if let Some(s) = alignment {
            if !(-1.0..=1.0).contains(&s) {
                return Err(Error::Contract(format!("alignment {s} outside [-1, 1]")));
            }
        }
        Ok(Self {
            step_index,
            t,
            sigma: 1.0 - t,
            alignment,
            n_steps,
        })
    }
}

/// `exp(kappa * (2 sigma - 1) * s)`.
pub fn vags_multiplier(kappa: f64, sigma: f64, alignment: f64) -> f64 {
    (kappa * (2.0 * sigma - 1.0) * alignment).exp()
}

pub fn effective_scale(params: &SchedulerParams, ctx: &StepContext) -> Result<f64> {
    let lambda = params.base_scale;
    let scale = match params.kind {
        SchedulerKind::Fixed => lambda,
        SchedulerKind::Vags => {
            let s = ctx
                .alignment
                .ok_or_else(|| Error::Contract("vags scheduler needs an alignment signal".into()))?;
            lambda * vags_multiplier(params.kappa, ctx.sigma, s)
        }
        SchedulerKind::Monotone => lambda * vags_multiplier(params.kappa, ctx.sigma, 1.0),
        SchedulerKind::Interval => {
            let (lo, hi) = params.interval;
            if (lo..=hi).contains(&ctx.t) {
                lambda
            } else {
                1.0
            }
        }
        SchedulerKind::ZeroInit => {
            // Iterations run i = N, N-1, ...; the first `zero_steps` of them are skipped.
            let iteration = ctx.n_steps.saturating_sub(ctx.step_index);
            if iteration < params.zero_steps {
                0.0
            } else {
                lambda
            }
        }
    };
    Ok(scale)
}

/// Classifier-free guidance: `v_uncond + scale * (v_cond - v_uncond)`.
///
/// Evaluated as `(1 - scale) v_uncond + scale v_cond` so the endpoints
/// `scale = 0` and `scale = 1` return the inputs bit for bit.
pub fn cfg_combine(v_uncond: &LatentVector, v_cond: &LatentVector, scale: f64) -> Result<LatentVector> {
    let keep = 1.0 - scale;
    v_uncond.zip_map(v_cond, |u, c| keep * u + scale * c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(t: f64, s: Option<f64>) -> StepContext {
        StepContext::new(10, t, s, 25).unwrap()
    }

    fn v(values: &[f64]) -> LatentVector {
        LatentVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn vags_examples() {
        let p = SchedulerParams::vags(7.0, 1.0);
        for s in [-1.0, -0.3, 0.0, 0.8, 1.0] {
            assert_eq!(effective_scale(&p, &ctx(0.5, Some(s))).unwrap(), 7.0);
        }
        let off = SchedulerParams::vags(7.0, 0.0);
        for t in [0.0, 0.13, 0.5, 0.9, 1.0] {
            for s in [-1.0, 0.2, 1.0] {
                assert_eq!(effective_scale(&off, &ctx(t, Some(s))).unwrap(), 7.0);
            }
        }
        let top = effective_scale(&p, &ctx(0.0, Some(1.0))).unwrap();
        assert!((top - 19.027_972_799_213_316).abs() < 1e-12, "{top}");
    }

    #[test]
    fn vags_requires_alignment() {
        let p = SchedulerParams::vags(7.0, 1.0);
        assert!(matches!(effective_scale(&p, &ctx(0.3, None)), Err(Error::Contract(_))));
    }

    #[test]
    fn baseline_kinds() {
        let mono = SchedulerParams::monotone(13.5, 0.9);
        assert_eq!(effective_scale(&mono, &ctx(0.5, None)).unwrap(), 13.5);
        let clean = effective_scale(&mono, &ctx(0.0, None)).unwrap();
        assert!((clean - 13.5 * 0.9f64.exp()).abs() < 1e-12);

        assert_eq!(effective_scale(&SchedulerParams::fixed(4.0), &ctx(0.9, None)).unwrap(), 4.0);

        let iv = SchedulerParams::interval(7.0, 0.2, 0.8);
        assert_eq!(effective_scale(&iv, &ctx(0.5, None)).unwrap(), 7.0);
        assert_eq!(effective_scale(&iv, &ctx(0.2, None)).unwrap(), 7.0);
        assert_eq!(effective_scale(&iv, &ctx(0.95, None)).unwrap(), 1.0);
        assert_eq!(effective_scale(&iv, &ctx(0.1, None)).unwrap(), 1.0);

        let zi = SchedulerParams::zero_init(7.0, 1);
        let first = StepContext::new(25, 1.0, None, 25).unwrap();
        let second = StepContext::new(24, 23.0 / 24.0, None, 25).unwrap();
        assert_eq!(effective_scale(&zi, &first).unwrap(), 0.0);
        assert_eq!(effective_scale(&zi, &second).unwrap(), 7.0);
        let zi3 = SchedulerParams::zero_init(7.0, 3);
        let third = StepContext::new(23, 22.0 / 24.0, None, 25).unwrap();
        let fourth = StepContext::new(22, 21.0 / 24.0, None, 25).unwrap();
        assert_eq!(effective_scale(&zi3, &third).unwrap(), 0.0);
        assert_eq!(effective_scale(&zi3, &fourth).unwrap(), 7.0);
    }

    #[test]
    fn step_context_invariants() {
        let c = StepContext::new(3, 0.3, Some(0.5), 10).unwrap();
        assert!((c.sigma - (1.0 - c.t)).abs() <= 1e-15);
        assert!(StepContext::new(3, 1.2, None, 10).is_err());
        assert!(StepContext::new(3, 0.2, Some(1.5), 10).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(SchedulerParams::vags(7.0, 1.0).validate().is_ok());
        assert!(SchedulerParams::vags(-1.0, 1.0).validate().is_err());
        assert!(SchedulerParams::vags(7.0, -0.1).validate().is_err());
        assert!(SchedulerParams::interval(7.0, 0.8, 0.2).validate().is_err());
        assert!(SchedulerParams::zero_init(7.0, 0).validate().is_err());
    }

    #[test]
    fn params_json() {
        let p: SchedulerParams = serde_json::from_str(r#"{"kind": "vags", "lambda": 7.0, "kappa": 1.0}"#).unwrap();
        assert_eq!(p, SchedulerParams::vags(7.0, 1.0));
        let p: SchedulerParams = serde_json::from_str(r#"{"kind": "zero_init", "lambda": 7.0}"#).unwrap();
        assert_eq!(p.zero_steps, 1);
        let err = serde_json::from_str::<SchedulerParams>(r#"{"kind": "vags", "lambda": 7.0, "kapa": 1.0}"#);
        assert!(err.unwrap_err().to_string().contains("kapa"));
    }

    #[test]
    fn cfg_examples() {
        let u = v(&[0.3, -1.2, 4.0]);
        let c = v(&[-2.5, 0.7, 1.1]);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0]), 7.0).unwrap(), v(&[7.0, 0.0]));
        assert!(matches!(cfg_combine(&u, &v(&[1.0]), 2.0), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn vags_bounded(sigma in 0.0..=1.0f64, s in -1.0..=1.0f64, lambda in 0.0..20.0f64, kappa in 0.0..3.0f64) {
            let p = SchedulerParams::vags(lambda, kappa);
            let c = StepContext::new(5, 1.0 - sigma, Some(s), 10).unwrap();
            let scale = effective_scale(&p, &c).unwrap();
            let (lo, hi) = p.scale_bounds();
            prop_assert!(scale >= lo && scale <= hi);
        }

        #[test]
        fn cfg_linearity(
            u in proptest::collection::vec(-10.0..10.0f64, 4),
            c in proptest::collection::vec(-10.0..10.0f64, 4),
            a in -5.0..15.0f64,
            b in -5.0..15.0f64,
        ) {
            let u = LatentVector::new(u).unwrap();
            let c = LatentVector::new(c).unwrap();
            let lhs = cfg_combine(&u, &c, a).unwrap().add(&cfg_combine(&u, &c, b).unwrap()).unwrap().sub(&u).unwrap();
            let rhs = cfg_combine(&u, &c, a + b).unwrap();
            for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
            }
        }
    }
}
