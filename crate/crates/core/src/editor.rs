//! Inversion-free editing with an alignment-adaptive target scale.
//!
//! At each step the source image is re-noised with fresh noise, the target
//! latent is coupled to it by the current edit offset, and the edit moves
//! along the difference between the target-guided and the source-guided
//! velocities. The source scale never changes. The target scale is
//! modulated by the cosine between the source-guided velocity and a pilot
//! target velocity built with the temporal-only scale
//! `lambda_tar * exp(kappa_tar * (2 sigma - 1))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{TraceRow, TrajectoryTrace};
use crate::error::{Error, Result};
use crate::guidance::{cfg_combine, vags_multiplier};
use crate::sampler::{guard, run_label, TimeGrid};
use crate::vecmath::{cosine_fast, cosine_similarity, LatentVector};
use crate::velocity::{ConditionLabel, VelocityField};

/// How the target guidance scale evolves over the edit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetScaling {
    /// Constant `lambda_tar`; no pilot or alignment is computed.
    Fixed,
    /// Alignment-adaptive target scale.
    #[default]
    Vags,
}

impl TargetScaling {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetScaling::Fixed => "fixed",
            TargetScaling::Vags => "vags",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRunSpec {
    pub x_src: LatentVector,
    pub c_src: ConditionLabel,
    pub c_tar: ConditionLabel,
    pub lambda_src: f64,
    pub lambda_tar: f64,
    pub kappa_tar: f64,
    pub target: TargetScaling,
    pub grid: TimeGrid,
    /// Grid index the edit starts from; steps run `n_max, ..., 2`.
    pub n_max: usize,
    pub seed: u64,
}

impl EditRunSpec {
    pub fn validate<F: VelocityField + ?Sized>(&self, field: &F) -> Result<()> {
        field.check_condition(self.c_src)?;
        field.check_condition(self.c_tar)?;
        if self.x_src.dim() != field.dim() {
            return Err(Error::Dimension {
                expected: field.dim(),
                found: self.x_src.dim(),
            });
        }
        if self.n_max < 2 || self.n_max > self.grid.len() {
            return Err(Error::Config(format!(
                "n_max must be in [2, {}], got {}",
                self.grid.len(),
                self.n_max
            )));
        }
        for (name, value) in [("lambda_src", self.lambda_src), ("lambda_tar", self.lambda_tar)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {value}")));
            }
        }
        if !(self.kappa_tar >= 0.0 && self.kappa_tar.is_finite()) {
            return Err(Error::Config(format!("kappa_tar must be finite and >= 0, got {}", self.kappa_tar)));
        }
        Ok(())
    }
}

/// Raw unconditional (`u`) and conditional (`p`) velocities at the coupled
/// source and target latents.
#[derive(Debug, Clone, PartialEq)]
pub struct EditStepRaw {
    pub u_src: LatentVector,
    pub p_src: LatentVector,
    pub u_tar: LatentVector,
    pub p_tar: LatentVector,
}

/// Returns `(z_src, z_tar)` with `z_src = (1 - t) x_src + t noise` and
/// `z_tar = z_edit + z_src - x_src`.
pub fn couple_latents(
    x_src: &LatentVector,
    z_edit: &LatentVector,
    t: f64,
    noise: &LatentVector,
) -> Result<(LatentVector, LatentVector)> {
    let keep = 1.0 - t;
    let z_src = x_src.zip_map(noise, |x, e| keep * x + t * e)?;
    // Offset first, so z_edit == x_src gives z_tar == z_src bit for bit.
    let z_tar = z_edit.sub(x_src)?.add(&z_src)?;
    Ok((z_src, z_tar))
}

/// Pilot target velocity and the temporal-only scale used to build it.
pub fn pilot_target_velocity(raw: &EditStepRaw, lambda_tar: f64, kappa_tar: f64, sigma: f64) -> Result<(LatentVector, f64)> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Contract(format!("sigma {sigma} outside [0, 1]")));
    }
    let base_scale = lambda_tar * vags_multiplier(kappa_tar, sigma, 1.0);
    let pilot = cfg_combine(&raw.u_tar, &raw.p_tar, base_scale)?;
    Ok((pilot, base_scale))
}

/// Returns `(lambda_tar_i, s_edit)`.
pub fn adaptive_target_scale(
    v_src: &LatentVector,
    pilot: &LatentVector,
    lambda_tar: f64,
    kappa_tar: f64,
    sigma: f64,
) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Contract(format!("sigma {sigma} outside [0, 1]")));
    }
    let s_edit = cosine_similarity(v_src, pilot)?;
    Ok((lambda_tar * vags_multiplier(kappa_tar, sigma, s_edit), s_edit))
}

/// Same result as [`pilot_target_velocity`] followed by
/// [`adaptive_target_scale`], without materializing the pilot when the
/// fast cosine applies.
fn pilot_scale(raw: &EditStepRaw, v_src: &LatentVector, lambda_tar: f64, kappa_tar: f64, sigma: f64) -> Result<(f64, f64)> {
    let base_scale = lambda_tar * vags_multiplier(kappa_tar, sigma, 1.0);
    let keep = 1.0 - base_scale;
    let (u, p) = (raw.u_tar.as_slice(), raw.p_tar.as_slice());
    let fused = (0.0..=1.0).contains(&sigma) && u.len() == v_src.dim() && p.len() == v_src.dim();
    match fused.then(|| cosine_fast(v_src.as_slice(), u, p, |u, p| keep * u + base_scale * p)).flatten() {
        Some(s_edit) => Ok((lambda_tar * vags_multiplier(kappa_tar, sigma, s_edit), s_edit)),
        None => {
            let (pilot, _) = pilot_target_velocity(raw, lambda_tar, kappa_tar, sigma)?;
            adaptive_target_scale(v_src, &pilot, lambda_tar, kappa_tar, sigma)
        }
    }
}

/// Noise for grid step `i`: stream `i` of the run seed, so any step can be
/// replayed on its own.
pub fn step_noise(dim: usize, seed: u64, step: usize) -> Result<LatentVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    LatentVector::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
}

pub fn edit<F: VelocityField + ?Sized>(field: &F, spec: &EditRunSpec) -> Result<(LatentVector, TrajectoryTrace)> {
    spec.validate(field)?;
    let label = spec.target.as_str();
    let mut trace = TrajectoryTrace::new(run_label("edit", label, spec.seed), label, spec.seed);
    let x_src = &spec.x_src;
    let mut z_edit = x_src.clone();

    for i in (2..=spec.n_max).rev() {
        let t = spec.grid.t(i);
        let sigma = 1.0 - t;
        let noise = step_noise(x_src.dim(), spec.seed, i)?;
        let (z_src, z_tar) = couple_latents(x_src, &z_edit, t, &noise)?;

        let raw = EditStepRaw {
            u_src: guard(i, field.raw_velocity(&z_src, t, ConditionLabel::Unconditional))?,
            p_src: guard(i, field.raw_velocity(&z_src, t, spec.c_src))?,
            u_tar: guard(i, field.raw_velocity(&z_tar, t, ConditionLabel::Unconditional))?,
            p_tar: guard(i, field.raw_velocity(&z_tar, t, spec.c_tar))?,
        };
        let v_src = guard(i, cfg_combine(&raw.u_src, &raw.p_src, spec.lambda_src))?;
        let (scale, alignment) = match spec.target {
            TargetScaling::Fixed => (spec.lambda_tar, 0.0),
            TargetScaling::Vags => pilot_scale(&raw, &v_src, spec.lambda_tar, spec.kappa_tar, sigma)?,
        };
        let v_tar = guard(i, cfg_combine(&raw.u_tar, &raw.p_tar, scale))?;
        let dt = spec.grid.t(i - 1) - t;
        let delta = guard(i, v_tar.sub(&v_src))?;
        z_edit = guard(i, z_edit.axpy(dt, &delta))?;

        trace.push(TraceRow {
            step_index: i,
            t,
            sigma,
            alignment,
            effective_scale: scale,
            state_norm: z_edit.sub(x_src)?.norm(),
        })?;
    }
    trace.endpoint = Some(z_edit.clone());
    Ok((z_edit, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::{CountingField, GaussianComponent, MixtureField};
    use rand::Rng;

    fn v(values: &[f64]) -> LatentVector {
        LatentVector::new(values.to_vec()).unwrap()
    }

    fn field() -> MixtureField {
        MixtureField::new(vec![
            GaussianComponent::new(v(&[2.0, 0.0]), 0.5, 0.5).unwrap(),
            GaussianComponent::new(v(&[-2.0, 1.0]), 0.5, 0.5).unwrap(),
        ])
        .unwrap()
    }

    fn spec(seed: u64) -> EditRunSpec {
        EditRunSpec {
            x_src: v(&[1.8, 0.1]),
            c_src: ConditionLabel::Component(0),
            c_tar: ConditionLabel::Component(1),
            lambda_src: 3.5,
            lambda_tar: 13.5,
            kappa_tar: 0.9,
            target: TargetScaling::Vags,
            grid: TimeGrid::uniform(50).unwrap(),
            n_max: 33,
            seed,
        }
    }

    #[test]
    fn fused_pilot_scale_matches_two_step() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for dim in [1, 2, 3, 4, 7, 64] {
            for _ in 0..50 {
                let mut rv = || v(&(0..dim).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>());
                let raw = EditStepRaw {
                    u_src: rv(),
                    p_src: rv(),
                    u_tar: rv(),
                    p_tar: rv(),
                };
                let v_src = rv();
                let sigma = rng.random_range(0.0..=1.0);
                let (pilot, _) = pilot_target_velocity(&raw, 13.5, 0.9, sigma).unwrap();
                let two_step = adaptive_target_scale(&v_src, &pilot, 13.5, 0.9, sigma).unwrap();
                let fused = pilot_scale(&raw, &v_src, 13.5, 0.9, sigma).unwrap();
                assert_eq!(fused.0.to_bits(), two_step.0.to_bits());
                assert_eq!(fused.1.to_bits(), two_step.1.to_bits());
            }
        }
    }

    #[test]
    fn coupling_examples() {
        let x = v(&[0.3, -1.1, 2.0]);
        let e = v(&[-0.4, 0.9, 1.7]);
        let (zs, zt) = couple_latents(&x, &x, 0.37, &e).unwrap();
        assert_eq!(zs, zt);
        let (zs, _) = couple_latents(&x, &x, 0.0, &e).unwrap();
        assert_eq!(zs, x);
        let (zs, _) = couple_latents(&x, &x, 1.0, &e).unwrap();
        assert_eq!(zs, e);
        let shifted = v(&[1.3, -1.1, 2.0]);
        let (zs, zt) = couple_latents(&x, &shifted, 0.5, &e).unwrap();
        let off = zt.sub(&zs).unwrap();
        assert!((off.as_slice()[0] - 1.0).abs() < 1e-15);
        assert!(couple_latents(&x, &v(&[1.0]), 0.5, &e).is_err());
    }

    fn raw(u_tar: &[f64], p_tar: &[f64]) -> EditStepRaw {
        EditStepRaw {
            u_src: v(&[0.0, 0.0]),
            p_src: v(&[0.0, 0.0]),
            u_tar: v(u_tar),
            p_tar: v(p_tar),
        }
    }

    #[test]
    fn pilot_examples() {
        let r = raw(&[0.5, 0.0], &[1.0, 1.0]);
        let (pilot, base) = pilot_target_velocity(&r, 13.5, 0.9, 0.5).unwrap();
        assert_eq!(base, 13.5);
        assert_eq!(pilot, cfg_combine(&r.u_tar, &r.p_tar, 13.5).unwrap());
        for sigma in [0.0, 0.3, 1.0] {
            assert_eq!(pilot_target_velocity(&r, 13.5, 0.0, sigma).unwrap().1, 13.5);
        }
        let (_, top) = pilot_target_velocity(&r, 13.5, 0.9, 1.0).unwrap();
        assert!((top - 33.204_642_000_618_82).abs() < 1e-9, "{top}");
        assert!(pilot_target_velocity(&r, 13.5, 0.9, 1.5).is_err());
    }

    #[test]
    fn adaptive_scale_examples() {
        let a = v(&[0.6, -0.8]);
        let (scale, s) = adaptive_target_scale(&a, &a, 13.5, 0.9, 1.0).unwrap();
        assert_eq!(s, 1.0);
        assert!((scale - 13.5 * 0.9f64.exp()).abs() < 1e-12);
        let (scale, s) = adaptive_target_scale(&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), 13.5, 0.9, 0.9).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(scale, 13.5);
        let (scale, _) = adaptive_target_scale(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0]), 13.5, 0.9, 1.0).unwrap();
        assert!((scale - 5.488_690_406_498_088).abs() < 1e-9, "{scale}");
    }

    #[test]
    fn identity_edit_is_exact() {
        let f = field();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..20 {
            let mut s = spec(seed);
            s.x_src = v(&[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            s.c_tar = s.c_src;
            s.lambda_tar = s.lambda_src;
            s.kappa_tar = 0.0;
            let (z, trace) = edit(&f, &s).unwrap();
            assert_eq!(z, s.x_src);
            assert!(trace.rows.iter().all(|r| r.state_norm <= 1e-12));
        }
    }

    /// Straight-line fixed-target-scale editing loop, written independently
    /// of `edit`.
    fn reference_fixed_edit(f: &MixtureField, s: &EditRunSpec) -> Vec<f64> {
        let d = s.x_src.dim();
        let x = s.x_src.as_slice().to_vec();
        let mut z = x.clone();
        let eval = |p: &[f64], t: f64, c: ConditionLabel| f.raw_velocity(&v(p), t, c).unwrap().into_inner();
        for i in (2..=s.n_max).rev() {
            let t = s.grid.t(i);
            let eps = step_noise(d, s.seed, i).unwrap().into_inner();
            let zs: Vec<f64> = (0..d).map(|k| (1.0 - t) * x[k] + t * eps[k]).collect();
            let zt: Vec<f64> = (0..d).map(|k| z[k] - x[k] + zs[k]).collect();
            let (us, ps) = (eval(&zs, t, ConditionLabel::Unconditional), eval(&zs, t, s.c_src));
            let (ut, pt) = (eval(&zt, t, ConditionLabel::Unconditional), eval(&zt, t, s.c_tar));
            let dt = s.grid.t(i - 1) - t;
            for k in 0..d {
                let vs = us[k] + s.lambda_src * (ps[k] - us[k]);
                let vt = ut[k] + s.lambda_tar * (pt[k] - ut[k]);
                z[k] += dt * (vt - vs);
            }
        }
        z
    }

    #[test]
    fn kappa_zero_reproduces_fixed_scale_baseline() {
        let f = field();
        for seed in 0..5 {
            let mut s = spec(seed);
            s.kappa_tar = 0.0;
            let reference = reference_fixed_edit(&f, &s);
            let (z, trace) = edit(&f, &s).unwrap();
            assert!(trace.rows.iter().all(|r| r.effective_scale == 13.5));
            for (a, b) in z.as_slice().iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
            }
            s.target = TargetScaling::Fixed;
            let (zf, _) = edit(&f, &s).unwrap();
            assert_eq!(z, zf);
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let f = field();
        let s = spec(31);
        let (a, ta) = edit(&f, &s).unwrap();
        let (b, tb) = edit(&f, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let lo = s.lambda_tar * (-s.kappa_tar).exp();
        let hi = s.lambda_tar * s.kappa_tar.exp();
        assert_eq!(ta.len(), s.n_max - 1);
        assert_eq!(ta.rows[0].step_index, 33);
        assert!(ta.rows.iter().all(|r| r.effective_scale >= lo && r.effective_scale <= hi));
    }

    #[test]
    fn evaluation_parity() {
        let f = CountingField::new(field());
        let mut s = spec(2);
        edit(&f, &s).unwrap();
        assert_eq!(f.calls(), 4 * (s.n_max as u64 - 1));
        f.reset();
        s.target = TargetScaling::Fixed;
        edit(&f, &s).unwrap();
        assert_eq!(f.calls(), 4 * (s.n_max as u64 - 1));
    }

    #[test]
    fn step_noise_depends_on_seed_and_step() {
        let a = step_noise(4, 1, 10).unwrap();
        assert_eq!(a, step_noise(4, 1, 10).unwrap());
        assert_ne!(a, step_noise(4, 1, 11).unwrap());
        assert_ne!(a, step_noise(4, 2, 10).unwrap());
    }

    #[test]
    fn spec_validation() {
        let f = field();
        let mut s = spec(0);
        s.n_max = 51;
        assert!(matches!(edit(&f, &s), Err(Error::Config(_))));
        let mut s = spec(0);
        s.c_tar = ConditionLabel::Component(9);
        assert!(matches!(edit(&f, &s), Err(Error::Condition { .. })));
        let mut s = spec(0);
        s.lambda_tar = -1.0;
        assert!(edit(&f, &s).is_err());
    }
}
