//! Monte-Carlo estimate of the conditional velocity `E[eps - x | z_t ~ z]`.
//!
//! This is the kernel-weighted estimate over paired `(x, eps)` draws, where a
//! pair counts in proportion to `exp(-|z_t - z|^2 / 2h^2)`, with the noise
//! integrated out exactly. Given `x`, `z_t + h eta = z` is Gaussian in
//! `eps`, so each data draw gets weight `N(z; (1 - t) x, (t^2 + h^2) I)` and
//! contributes `t (z - (1 - t) x) / (t^2 + h^2) - x`. A bandwidth of 0
//! conditions on `z_t = z` exactly. Nothing here uses the closed forms in the
//! parent module, so the two can check each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ConditionLabel, GaussianComponent};
use crate::error::{Error, Result};
use crate::vecmath::LatentVector;

pub const MIN_SAMPLES: usize = 10_000;
pub const MIN_EFFECTIVE_SAMPLES: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEstimate {
    pub estimate: LatentVector,
    /// Largest per-coordinate standard error.
    pub stderr: f64,
    pub stderr_per_coord: Vec<f64>,
    /// Kish effective sample size of the weights.
    pub effective_samples: f64,
}

pub fn mc_velocity_oracle(
    z: &LatentVector,
    t: f64,
    components: &[GaussianComponent],
    condition: ConditionLabel,
    n_samples: usize,
    bandwidth: f64,
    seed: u64,
) -> Result<OracleEstimate> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Contract(format!("oracle requires t in (0, 1), got {t}")));
    }
    if n_samples < MIN_SAMPLES {
        return Err(Error::Contract(format!("oracle needs at least {MIN_SAMPLES} samples, got {n_samples}")));
    }
    if !(bandwidth >= 0.0 && bandwidth.is_finite()) {
        return Err(Error::Contract(format!("bandwidth must be finite and >= 0, got {bandwidth}")));
    }
    if components.is_empty() {
        return Err(Error::Config("mixture has no components".into()));
    }
    let d = z.dim();
    if let Some(c) = components.iter().find(|c| c.dim() != d) {
        return Err(Error::Dimension {
            expected: d,
            found: c.dim(),
        });
    }
    let pool: Vec<(&GaussianComponent, f64)> = match condition {
        ConditionLabel::Unconditional => components.iter().map(|c| (c, c.weight)).collect(),
        ConditionLabel::Component(k) => match components.get(k) {
            Some(c) => vec![(c, 1.0)],
            None => {
                return Err(Error::Condition {
                    index: k,
                    n_components: components.len(),
                })
            }
        },
    };
    let total_weight: f64 = pool.iter().map(|(_, w)| w).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - t;
    let spread = t * t + bandwidth * bandwidth;
    let inv_two_spread = 0.5 / spread;
    let pull = t / spread;
    let zs = z.as_slice();

    let mut y = vec![0.0; d];
    // Accumulators are kept relative to the largest log-weight seen so far.
    let mut max_log_w = f64::NEG_INFINITY;
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    let mut sum_wy = vec![0.0; d];
    let mut sum_w2y = vec![0.0; d];
    let mut sum_w2y2 = vec![0.0; d];

    for _ in 0..n_samples {
        let comp = if pool.len() == 1 {
            pool[0].0
        } else {
            let mut u = rng.random::<f64>() * total_weight;
            let mut chosen = pool[pool.len() - 1].0;
            for &(c, w) in &pool {
                if u < w {
                    chosen = c;
                    break;
                }
                u -= w;
            }
            chosen
        };
        let sd = comp.variance.sqrt();
        let mut dist2 = 0.0;
        for k in 0..d {
            let xk = comp.mean.as_slice()[k] + sd * rng.sample::<f64, _>(StandardNormal);
            let r = zs[k] - keep * xk;
            dist2 += r * r;
            y[k] = pull * r - xk;
        }
        let log_w = -dist2 * inv_two_spread;
        if log_w > max_log_w {
            let shrink = (max_log_w - log_w).exp();
            let shrink2 = shrink * shrink;
            sum_w *= shrink;
            sum_w2 *= shrink2;
            for k in 0..d {
                sum_wy[k] *= shrink;
                sum_w2y[k] *= shrink2;
                sum_w2y2[k] *= shrink2;
            }
            max_log_w = log_w;
        }
        let w = (log_w - max_log_w).exp();
        if w == 0.0 {
            continue;
        }
        sum_w += w;
        sum_w2 += w * w;
        for k in 0..d {
            sum_wy[k] += w * y[k];
            sum_w2y[k] += w * w * y[k];
            sum_w2y2[k] += w * w * y[k] * y[k];
        }
    }

    let ess = if sum_w2 > 0.0 { sum_w * sum_w / sum_w2 } else { 0.0 };
    if ess < MIN_EFFECTIVE_SAMPLES {
        return Err(Error::OracleInsufficient { ess });
    }
    let mean: Vec<f64> = sum_wy.iter().map(|s| s / sum_w).collect();
    // sum w_i^2 (y_i - mean)^2 expanded so one pass suffices.
    let stderr_per_coord: Vec<f64> = (0..d)
        .map(|k| {
            let m = mean[k];
            let ss = sum_w2y2[k] - 2.0 * m * sum_w2y[k] + m * m * sum_w2;
            ss.max(0.0).sqrt() / sum_w
        })
        .collect();
    let stderr = stderr_per_coord.iter().copied().fold(0.0, f64::max);
    Ok(OracleEstimate {
        estimate: LatentVector::new(mean)?,
        stderr,
        stderr_per_coord,
        effective_samples: ess,
    })
}
