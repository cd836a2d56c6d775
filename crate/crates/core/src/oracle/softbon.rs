//! Stagewise shortlist selection with exact process rewards.
//!
//! Draw `N` candidates i.i.d. from `q0`, then pick one with probability
//! proportional to `exp(beta R*)` among the draws (repeats counted). The
//! expected selection law averages this over shortlist draws; in exact mode
//! the average runs over all multinomial compositions of the `N` draws.

use super::{exact_process_reward, BaseChain, HTable, OracleError};
use crate::rng::SeededRng;
use crate::state::{MaskedState, RevealAction};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SoftBonMode {
    /// Enumerate compositions; fail if there are more than `cap`.
    Exact { cap: u64 },
    /// Average `draws` independent shortlists.
    MonteCarlo { draws: usize },
    /// Exact when the composition count is within `cap`, else Monte Carlo.
    Auto { cap: u64, draws: usize },
}

impl Default for SoftBonMode {
    fn default() -> Self {
        SoftBonMode::Auto {
            cap: 2_000_000,
            draws: 100_000,
        }
    }
}

/// Expected selection probabilities, with standard errors in Monte Carlo mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftBonLaw {
    pub probs: Vec<f64>,
    pub stderr: Vec<f64>,
    pub exact: bool,
}

/// Number of compositions of `n` into `k` nonnegative parts, `C(n+k-1, k-1)`.
fn composition_count(n: usize, k: usize) -> f64 {
    let mut c = 1.0f64;
    for j in 1..k {
        c = c * (n + j) as f64 / j as f64;
    }
    c
}

/// Expected shortlist selection law over actions with base weights `q0` and
/// exact process rewards `rstar`.
pub fn softbon_stagewise_law(
    q0: &[f64],
    rstar: &[f64],
    beta: f64,
    n: usize,
    mode: SoftBonMode,
    rng: Option<&mut SeededRng>,
) -> Result<SoftBonLaw, OracleError> {
    if q0.len() != rstar.len() || q0.is_empty() || n == 0 {
        return Err(OracleError::Invalid("empty action set or zero shortlist".into()));
    }
    let k = q0.len();
    let count = composition_count(n, k);
    let (use_exact, draws) = match mode {
        SoftBonMode::Exact { cap } => {
            if count > cap as f64 {
                return Err(OracleError::TooLarge { cap });
            }
            (true, 0)
        }
        SoftBonMode::MonteCarlo { draws } => (false, draws),
        SoftBonMode::Auto { cap, draws } => (count <= cap as f64, draws),
    };
    let weights: Vec<f64> = rstar.iter().map(|r| (beta * r).exp()).collect();
    if use_exact {
        return Ok(SoftBonLaw {
            probs: exact_law(q0, &weights, n),
            stderr: vec![0.0; k],
            exact: true,
        });
    }
    let rng = rng.ok_or_else(|| OracleError::Invalid("Monte Carlo mode needs an rng".into()))?;
    let draws = draws.max(2);
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for _ in 0..draws {
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..n {
            counts[rng.categorical(q0).unwrap_or(0)] += 1;
        }
        let z: f64 = counts.iter().zip(&weights).map(|(&c, w)| c as f64 * w).sum();
        for j in 0..k {
            let p = counts[j] as f64 * weights[j] / z;
            sum[j] += p;
            sum_sq[j] += p * p;
        }
    }
    let d = draws as f64;
    let probs: Vec<f64> = sum.iter().map(|s| s / d).collect();
    let stderr = sum_sq
        .iter()
        .zip(&probs)
        .map(|(sq, m)| ((sq / d - m * m).max(0.0) * d / (d - 1.0) / d).sqrt())
        .collect();
    Ok(SoftBonLaw {
        probs,
        stderr,
        exact: false,
    })
}

fn exact_law(q0: &[f64], weights: &[f64], n: usize) -> Vec<f64> {
    let k = q0.len();
    let log_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, j| {
            *acc += (j as f64).ln();
            Some(*acc)
        }))
        .collect();
    let log_q: Vec<f64> = q0.iter().map(|q| q.ln()).collect();
    let mut out = vec![0.0; k];
    let mut counts = vec![0usize; k];
    fn walk(
        j: usize,
        left: usize,
        counts: &mut [usize],
        log_fact: &[f64],
        log_q: &[f64],
        weights: &[f64],
        out: &mut [f64],
    ) {
        let k = counts.len();
        if j == k - 1 {
            counts[j] = left;
            let mut lw = log_fact[log_fact.len() - 1];
            for (c, lq) in counts.iter().zip(log_q) {
                if *c > 0 {
                    lw += *c as f64 * lq - log_fact[*c];
                }
            }
            let prob = lw.exp();
            if prob == 0.0 {
                return;
            }
            let z: f64 = counts.iter().zip(weights).map(|(&c, w)| c as f64 * w).sum();
            for i in 0..k {
                if counts[i] > 0 {
                    out[i] += prob * counts[i] as f64 * weights[i] / z;
                }
            }
            return;
        }
        for c in 0..=left {
            counts[j] = c;
            walk(j + 1, left - c, counts, log_fact, log_q, weights, out);
        }
    }
    walk(0, n, &mut counts, &log_fact, &log_q, weights, &mut out);
    out
}

/// One shortlist realization: the index of the selected action.
pub fn softbon_sample(q0: &[f64], rstar: &[f64], beta: f64, n: usize, rng: &mut SeededRng) -> usize {
    let draws: Vec<usize> = (0..n.max(1)).map(|_| rng.categorical(q0).unwrap_or(0)).collect();
    let w: Vec<f64> = draws.iter().map(|&j| (beta * rstar[j]).exp()).collect();
    draws[rng.categorical(&w).unwrap_or(0)]
}

/// Expected Soft-BoN kernel at `s` for a chain, using exact process rewards.
pub fn softbon_kernel(
    chain: &dyn BaseChain,
    h: &HTable,
    s: &MaskedState,
    n: usize,
    mode: SoftBonMode,
    rng: Option<&mut SeededRng>,
) -> Result<Vec<(RevealAction, f64)>, OracleError> {
    let actions = chain.actions(s);
    if actions.is_empty() {
        return Err(OracleError::Terminal(s.to_string()));
    }
    let q0: Vec<f64> = actions.iter().map(|x| x.1).collect();
    let rstar = actions
        .iter()
        .map(|&(a, _)| exact_process_reward(h, s, a))
        .collect::<Result<Vec<f64>, _>>()?;
    let law = softbon_stagewise_law(&q0, &rstar, h.beta(), n, mode, rng)?;
    Ok(actions.into_iter().map(|x| x.0).zip(law.probs).collect())
}
