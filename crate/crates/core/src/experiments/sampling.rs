//! Experiments decided by randomized trials against closed forms.

use super::{bad_params, ols_slope, rep_rng, Check, ExperimentError, Outcome};
use crate::controllers::{BucketTable, GateParams};
use crate::oracle::{
    bernstein_radius, map_recovery_curve, second_moment, top_m, topm_regret as regret_of, union_size, variance_optimal_proposal,
    variance_optimal_reference, MaskRegime,
};
use crate::par::map_indexed;
use crate::rng::SeededRng;
use crate::state::PhaseBin;
use crate::targets::{informative_event_probability, LatentCollapseTarget};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BernsteinParams {
    pub trials: usize,
    pub beta: f64,
    pub deltas: Vec<f64>,
    pub counts: Vec<u64>,
    /// `(phases, bins, horizon)` for the union-bound count; `None` uses 1.
    pub unions: Vec<Option<(usize, usize, usize)>>,
}

impl Default for BernsteinParams {
    fn default() -> Self {
        Self {
            trials: 10_000,
            beta: 1.0,
            deltas: vec![0.05, 0.01],
            counts: vec![4, 16, 64, 256],
            unions: vec![None, Some((8, 16, 32))],
        }
    }
}

/// A reward law on `[0, 1]` with a known `E[exp(beta R)]`.
enum RewardLaw {
    Discrete { points: Vec<f64>, probs: Vec<f64> },
    Uniform { lo: f64, hi: f64 },
}

impl RewardLaw {
    fn random(rng: &mut SeededRng) -> Self {
        if rng.bernoulli(0.25) {
            let a = rng.uniform();
            let b = rng.uniform();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            return RewardLaw::Uniform { lo, hi: hi.max(lo + 1e-3).min(1.0) };
        }
        let k = 2 + rng.below(4);
        let points = (0..k).map(|_| rng.uniform()).collect();
        let raw: Vec<f64> = (0..k).map(|_| 0.05 + rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        RewardLaw::Discrete {
            points,
            probs: raw.into_iter().map(|x| x / total).collect(),
        }
    }

    fn exp_mean(&self, beta: f64) -> f64 {
        match self {
            RewardLaw::Discrete { points, probs } => points.iter().zip(probs).map(|(r, p)| p * (beta * r).exp()).sum(),
            RewardLaw::Uniform { lo, hi } => ((beta * hi).exp() - (beta * lo).exp()) / (beta * (hi - lo)),
        }
    }

    fn sample(&self, rng: &mut SeededRng) -> f64 {
        match self {
            RewardLaw::Discrete { points, probs } => points[rng.categorical(probs).unwrap_or(0)],
            RewardLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.uniform(),
        }
    }
}

pub(super) fn bernstein_coverage(p: &BernsteinParams, seed: u64) -> Result<Outcome, ExperimentError> {
    if !(p.beta > 0.0) || p.counts.is_empty() || p.counts.contains(&0) || p.deltas.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
        return Err(bad_params("bernstein-coverage", "need beta > 0, positive counts and deltas in (0, 1)"));
    }
    let unions: Vec<f64> = p
        .unions
        .iter()
        .map(|u| u.map_or(1.0, |(k, b, t)| union_size(k, b, t)))
        .collect();
    let beta = p.beta;
    let results = map_indexed(p.trials, |i| -> Result<(f64, f64, Vec<bool>), ExperimentError> {
        let mut rng = rep_rng(seed, i);
        let law = RewardLaw::random(&mut rng);
        let n = p.counts[i % p.counts.len()];
        let mu = law.exp_mean(beta);
        let r_bar = mu.ln() / beta;
        let mut table = BucketTable::new(1, 1, beta, GateParams::default())?;
        let cell = PhaseBin { phase: 0, bin: 0 };
        let ys: Vec<f64> = (0..n)
            .map(|_| {
                let r = law.sample(&mut rng);
                table.record(cell, r).map(|_| (beta * r).exp())
            })
            .collect::<Result<_, _>>()?;
        let mean = ys.iter().sum::<f64>() / n as f64;
        let v_hat = if n > 1 {
            ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let err = (table.estimate(cell).r_hat - r_bar).abs();
        let mut misses = Vec::new();
        for &delta in &p.deltas {
            for &u in &unions {
                misses.push(err > bernstein_radius(v_hat, n, beta, mu, delta, u));
            }
        }
        Ok((err, v_hat, misses))
    });
    let mut out = Outcome::default();
    let cells = p.deltas.len() * unions.len();
    let mut miss_counts = vec![0usize; cells];
    for (i, r) in results.into_iter().enumerate() {
        let (err, v_hat, misses) = r?;
        let mut row: Vec<(String, f64)> = vec![
            ("trial".into(), i as f64),
            ("count".into(), p.counts[i % p.counts.len()] as f64),
            ("abs_error".into(), err),
            ("v_hat".into(), v_hat),
        ];
        for (k, &m) in misses.iter().enumerate() {
            miss_counts[k] += m as usize;
            row.push((format!("miss_{k}"), if m { 1.0 } else { 0.0 }));
        }
        out.rows.push(row.into_iter().collect());
    }
    for (di, &delta) in p.deltas.iter().enumerate() {
        for (ui, &u) in unions.iter().enumerate() {
            let rate = miss_counts[di * unions.len() + ui] as f64 / p.trials.max(1) as f64;
            out.checks
                .push(Check::at_most(format!("miscoverage_delta{delta}_union{u}"), rate, delta));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopMParams {
    pub trials: usize,
    pub max_candidates: usize,
}

impl Default for TopMParams {
    fn default() -> Self {
        Self {
            trials: 10_000,
            max_candidates: 12,
        }
    }
}

pub(super) fn topm_regret(p: &TopMParams, seed: u64) -> Result<Outcome, ExperimentError> {
    if p.max_candidates < 2 {
        return Err(bad_params("topm-regret", "need at least two candidates"));
    }
    let results = map_indexed(p.trials, |i| {
        let mut rng = rep_rng(seed, i);
        let n = 2 + rng.below(p.max_candidates - 1);
        let m = 1 + rng.below(n - 1);
        let g: Vec<f64> = (0..n).map(|_| 6.0 * rng.uniform() - 3.0).collect();
        let exact = top_m(&g, m);
        let mut sorted = g.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let margin = sorted[m - 1] - sorted[m];
        // half the trials sit inside the margin regime
        let eps = if i % 2 == 0 { margin * rng.uniform() } else { 2.0 * rng.uniform() };
        let noisy: Vec<f64> = g.iter().map(|x| x + eps * (2.0 * rng.uniform() - 1.0)).collect();
        let chosen = top_m(&noisy, m);
        let regret = regret_of(&g, &chosen, m);
        let mut a = chosen.clone();
        let mut b = exact.clone();
        a.sort_unstable();
        b.sort_unstable();
        (n, m, eps, margin, regret, a == b)
    });
    let mut out = Outcome::default();
    let mut regret_ok = true;
    let mut margin_cases = 0usize;
    let mut margin_ok = true;
    let mut worst_ratio: f64 = 0.0;
    for (i, (n, m, eps, margin, regret, exact)) in results.into_iter().enumerate() {
        let bound = 2.0 * m as f64 * eps;
        regret_ok &= regret <= bound + 1e-12;
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(regret / bound);
        }
        let in_margin = eps < margin / 2.0;
        if in_margin {
            margin_cases += 1;
            margin_ok &= exact;
        }
        out.row(&[
            ("trial", i as f64),
            ("candidates", n as f64),
            ("m", m as f64),
            ("eps", eps),
            ("margin", margin),
            ("regret", regret),
            ("bound", bound),
            ("recovered", if exact { 1.0 } else { 0.0 }),
        ]);
    }
    out.checks.push(Check::flag("regret_within_2m_eps", regret_ok));
    out.checks.push(Check::at_most("worst_regret_to_bound", worst_ratio, 1.0).soft());
    out.checks.push(Check::flag("exact_recovery_inside_margin", margin_ok));
    out.checks
        .push(Check::at_least("margin_cases", margin_cases as f64, 1.0));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarianceParams {
    pub instances: usize,
    pub proposals: usize,
    pub max_orders: usize,
    pub tolerance: f64,
}

impl Default for VarianceParams {
    fn default() -> Self {
        Self {
            instances: 1000,
            proposals: 100,
            max_orders: 10,
            tolerance: 1e-6,
        }
    }
}

fn random_simplex(k: usize, rng: &mut SeededRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.uniform()).ln() + 1e-9).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

pub(super) fn variance_optimal(p: &VarianceParams, seed: u64) -> Result<Outcome, ExperimentError> {
    if p.max_orders < 2 {
        return Err(bad_params("variance-optimal", "need at least two orders"));
    }
    let results = map_indexed(p.instances, |i| -> Result<(usize, f64, f64, bool, bool), ExperimentError> {
        let mut rng = rep_rng(seed, i);
        let k = 2 + rng.below(p.max_orders - 1);
        let u = random_simplex(k, &mut rng);
        let nu: Vec<f64> = (0..k)
            .map(|_| if rng.bernoulli(0.1) { 0.0 } else { 0.1 + 3.0 * rng.uniform() })
            .collect();
        let nu = if nu.iter().all(|&x| x == 0.0) { vec![1.0; k] } else { nu };
        let opt = variance_optimal_proposal(&u, &nu)?;
        let reference = variance_optimal_reference(&u, &nu)?;
        let m_opt = second_moment(&opt, &u, &nu);
        let mut dominated = true;
        for _ in 0..p.proposals {
            let q = random_simplex(k, &mut rng);
            dominated &= m_opt <= second_moment(&q, &u, &nu) * (1.0 + 1e-12);
        }
        let rel = opt
            .iter()
            .zip(&reference)
            .map(|(a, b)| if *a > 0.0 { (a - b).abs() / a } else { b.abs() })
            .fold(0.0f64, f64::max);
        let nonconstant = nu.iter().any(|&x| (x - nu[0]).abs() > 1e-12);
        let strict = !nonconstant || m_opt < second_moment(&u, &u, &nu);
        Ok((k, m_opt, rel, dominated, strict))
    });
    let mut out = Outcome::default();
    let (mut worst_rel, mut dominated, mut strict) = (0.0f64, true, true);
    for (i, r) in results.into_iter().enumerate() {
        let (k, m_opt, rel, dom, st) = r?;
        worst_rel = worst_rel.max(rel);
        dominated &= dom;
        strict &= st;
        out.row(&[
            ("instance", i as f64),
            ("orders", k as f64),
            ("second_moment_opt", m_opt),
            ("relative_gap_to_minimizer", rel),
        ]);
    }
    out.checks.push(Check::flag("optimal_dominates_random_proposals", dominated));
    out.checks
        .push(Check::at_most("max_relative_gap_to_minimizer", worst_rel, p.tolerance));
    out.checks.push(Check::flag("strict_gain_over_reference", strict));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparationParams {
    pub mask_prob: f64,
    pub noise: f64,
    pub dims: Vec<usize>,
    pub repetitions: usize,
    pub failure: f64,
    /// Random-regime grid spans `[1, span / q(1-q)^d]` geometrically.
    pub span: f64,
    pub grid_ratio: f64,
    pub oracle_max: usize,
    pub growth_min: f64,
    pub oracle_ratio_max: f64,
}

impl Default for SeparationParams {
    fn default() -> Self {
        Self {
            mask_prob: 0.5,
            noise: 0.15,
            dims: vec![2, 4, 6, 8],
            repetitions: 2000,
            failure: 0.1,
            span: 20.0,
            grid_ratio: 1.04,
            oracle_max: 64,
            growth_min: 1.7,
            oracle_ratio_max: 1.5,
        }
    }
}

fn geometric_grid(max: usize, ratio: f64) -> Vec<usize> {
    let mut grid = vec![1usize];
    let mut x = 1.0f64;
    while *grid.last().unwrap() < max {
        x *= ratio;
        let n = (x.round() as usize).max(grid.last().unwrap() + 1).min(max);
        grid.push(n);
    }
    grid
}

struct SweepResult {
    required: Option<usize>,
    informative: usize,
    drawn: usize,
}

fn sweep(
    target: &LatentCollapseTarget,
    regime: MaskRegime,
    grid: &[usize],
    reps: usize,
    failure: f64,
    seed: u64,
    tag: u64,
) -> SweepResult {
    let curves = map_indexed(reps, |r| {
        let mut rng = rep_rng(seed, r).fork(tag);
        let theta = rng.below(target.n_params());
        map_recovery_curve(target, theta, regime, grid, &mut rng)
    });
    let mut required = None;
    for (g, &n) in grid.iter().enumerate() {
        let fails = curves.iter().filter(|c| !c[g].success).count();
        if (fails as f64) <= failure * reps as f64 {
            required = Some(n);
            break;
        }
    }
    let last = grid.len() - 1;
    SweepResult {
        required,
        informative: curves.iter().map(|c| c[last].informative).sum(),
        drawn: reps * grid[last],
    }
}

pub(super) fn separation(p: &SeparationParams, seed: u64) -> Result<Outcome, ExperimentError> {
    if !(p.mask_prob > 0.0 && p.mask_prob < 1.0) || p.dims.len() < 2 || p.repetitions == 0 || !(p.grid_ratio > 1.0) {
        return Err(bad_params("separation", "need q in (0, 1), two or more dims, repetitions and a grid ratio > 1"));
    }
    let q = p.mask_prob;
    let mut out = Outcome::default();
    let (mut ds, mut log_req) = (Vec::new(), Vec::new());
    let mut oracle_req: Vec<f64> = Vec::new();
    let mut all_found = true;
    for (di, &d) in p.dims.iter().enumerate() {
        let target = LatentCollapseTarget::binary(d, p.noise)?;
        let pf = informative_event_probability(d, q);
        let grid = geometric_grid((p.span / pf).ceil() as usize, p.grid_ratio);
        let random = sweep(&target, MaskRegime::RandomMask { q }, &grid, p.repetitions, p.failure, seed, 2 * di as u64);
        let oracle_grid: Vec<usize> = (0..=p.oracle_max).collect();
        let oracle = sweep(
            &target,
            MaskRegime::OracleTrajectory,
            &oracle_grid,
            p.repetitions,
            p.failure,
            seed,
            2 * di as u64 + 1,
        );
        let freq = random.informative as f64 / random.drawn as f64;
        let sd = (pf * (1.0 - pf) / random.drawn as f64).sqrt();
        out.checks.push(Check::at_most(
            format!("informative_frequency_z_d{d}"),
            (freq - pf).abs() / sd,
            3.0,
        ));
        match (random.required, oracle.required) {
            (Some(r), Some(o)) => {
                ds.push(d as f64);
                log_req.push((r as f64).ln());
                oracle_req.push(o as f64);
            }
            _ => all_found = false,
        }
        let chernoff_n = ((1.0 / p.failure).ln() / target.kappa()).ceil() as usize;
        out.row(&[
            ("dim", d as f64),
            ("informative_probability", pf),
            ("informative_frequency", freq),
            ("random_required", random.required.map_or(f64::NAN, |x| x as f64)),
            ("oracle_required", oracle.required.map_or(f64::NAN, |x| x as f64)),
            ("oracle_chernoff_count", chernoff_n as f64),
            ("kappa", target.kappa()),
        ]);
        if let Some(o) = oracle.required {
            out.checks.push(Check::at_most(format!("oracle_within_chernoff_d{d}"), o as f64, chernoff_n as f64));
        }
    }
    out.checks.push(Check::flag("required_counts_found", all_found));
    if ds.len() >= 2 {
        let growth = ols_slope(&ds, &log_req).exp();
        out.checks.push(Check::at_least("random_growth_per_dim", growth, p.growth_min));
        let hi = oracle_req.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = oracle_req.iter().cloned().fold(f64::INFINITY, f64::min);
        out.checks
            .push(Check::at_most("oracle_spread_ratio", hi / lo, p.oracle_ratio_max - 1e-12));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_increasing_and_reaches_max() {
        let g = geometric_grid(500, 1.07);
        assert_eq!(g[0], 1);
        assert_eq!(*g.last().unwrap(), 500);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn reward_law_means() {
        let u = RewardLaw::Uniform { lo: 0.2, hi: 0.6 };
        let mut rng = SeededRng::new(1, 0);
        let n = 200_000;
        let mc = (0..n).map(|_| (u.sample(&mut rng)).exp()).sum::<f64>() / n as f64;
        assert!((mc - u.exp_mean(1.0)).abs() < 2e-3);
        let d = RewardLaw::Discrete {
            points: vec![0.0, 1.0],
            probs: vec![0.5, 0.5],
        };
        assert!((d.exp_mean(1.0) - (1.0 + 1f64.exp()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn small_runs_pass() {
        let b = bernstein_coverage(
            &BernsteinParams {
                trials: 500,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        assert!(b.checks.iter().all(|c| c.passed), "{:?}", b.checks);
        let t = topm_regret(&TopMParams { trials: 500, max_candidates: 8 }, 3).unwrap();
        assert!(t.checks.iter().all(|c| c.passed || !c.hard));
        let v = variance_optimal(
            &VarianceParams {
                instances: 50,
                proposals: 20,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        assert!(v.checks.iter().all(|c| c.passed), "{:?}", v.checks);
    }
}
