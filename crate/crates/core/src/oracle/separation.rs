//! MAP recovery of the latent-collapse parameter from training states.
//!
//! Only states that show every latent and hide `Y` carry information about
//! the parameter; every other state has the same likelihood under all
//! parameters and drops out of the MAP objective.

use crate::rng::SeededRng;
use crate::state::Token;
use crate::targets::LatentCollapseTarget;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskRegime {
    /// Each sample masks every coordinate independently with probability `q`.
    RandomMask { q: f64 },
    /// Each sample is a reveal trajectory that shows the latents before `Y`.
    OracleTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOutcome {
    pub samples: usize,
    pub theta_hat: usize,
    pub success: bool,
    pub informative: usize,
}

/// Draws one training sample and returns the informative `(latents, y)` pair
/// it contributes, if any.
fn draw_informative(
    target: &LatentCollapseTarget,
    theta: usize,
    regime: MaskRegime,
    rng: &mut SeededRng,
) -> Option<(Vec<Token>, Token)> {
    let d = target.latent_dim();
    match regime {
        MaskRegime::RandomMask { q } => {
            // The mask is independent of the sequence, so the sequence is
            // only drawn for informative masks.
            if !rng.bernoulli(q) || (0..d).any(|_| rng.bernoulli(q)) {
                return None;
            }
            let x = target.sample(theta, rng);
            Some((x[..d].to_vec(), x[d]))
        }
        // The trajectory passes through d + 1 states; exactly one of them
        // (all latents shown, Y hidden) is informative.
        MaskRegime::OracleTrajectory => {
            let x = target.sample(theta, rng);
            Some((x[..d].to_vec(), x[d]))
        }
    }
}

fn map_estimate(log_lik: &[f64], rng: &mut SeededRng) -> usize {
    let best = log_lik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..log_lik.len()).filter(|&k| log_lik[k] >= best - 1e-9).collect();
    ties[rng.below(ties.len())]
}

/// Runs one sample stream and reports the MAP estimate after each count in
/// `grid` (ascending). Ties between parameters are broken uniformly.
pub fn map_recovery_curve(
    target: &LatentCollapseTarget,
    theta: usize,
    regime: MaskRegime,
    grid: &[usize],
    rng: &mut SeededRng,
) -> Vec<RecoveryOutcome> {
    let mut log_lik = vec![0.0; target.n_params()];
    let mut drawn = 0usize;
    let mut informative = 0usize;
    let mut out = Vec::with_capacity(grid.len());
    for &n in grid {
        while drawn < n {
            if let Some((u, y)) = draw_informative(target, theta, regime, rng) {
                informative += 1;
                for (k, l) in log_lik.iter_mut().enumerate() {
                    *l += target.log_likelihood(k, &u, y);
                }
            }
            drawn += 1;
        }
        let theta_hat = map_estimate(&log_lik, rng);
        out.push(RecoveryOutcome {
            samples: n,
            theta_hat,
            success: theta_hat == theta,
            informative,
        });
    }
    out
}

/// MAP recovery from `n` samples.
pub fn map_recovery_trial(
    target: &LatentCollapseTarget,
    theta: usize,
    regime: MaskRegime,
    n: usize,
    rng: &mut SeededRng,
) -> RecoveryOutcome {
    map_recovery_curve(target, theta, regime, &[n], rng).remove(0)
}
