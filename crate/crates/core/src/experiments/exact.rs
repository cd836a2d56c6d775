//! Experiments decided by exact enumeration.

use super::{bad_params, ols_slope, rep_rng, Check, ExperimentError, Outcome};
use crate::controllers::{
    decode_aligned, dprm_decide, BucketTable, Controller, DecodeConfig, DprmParams, GateClock, GateParams,
    GateSchedule, ProposalMode,
};
use crate::denoiser::FrozenRandomDenoiser;
use crate::oracle::{
    base_kernel, compute_h, enumerate_paths, exact_gibbs_kernel, exact_process_reward, global_tilt_terminal_law,
    kl_keyed, occupancy, pathwise_kl, pathwise_kl_direct, softbon_kernel, softbon_terminal_bound, terminal_law,
    BaseChain, Kernel, OracleError, PositionLaw, RevealChain, SoftBonMode, StateSpace, TokenLaw,
};
use crate::par::map_indexed;
use crate::rng::SeededRng;
use crate::state::{MaskedState, PhaseBin, PhaseMode, RevealAction, Token, Vocab};
use crate::targets::{TableTarget, TerminalReward};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn vocab(n: usize) -> Vocab {
    Vocab::new(n).expect("small vocabularies are valid")
}

fn random_table_reward(v: Vocab, len: usize, rng: &mut SeededRng) -> TerminalReward {
    TerminalReward::Table {
        values: (0..v.size().pow(len as u32)).map(|_| rng.uniform()).collect(),
    }
}

/// Position law of `chain` at `s`, summed over tokens.
fn position_law(chain: &dyn BaseChain, s: &MaskedState) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (a, w) in chain.actions(s) {
        match out.iter_mut().find(|x| x.0 == a.position) {
            Some(x) => x.1 += w,
            None => out.push((a.position, w)),
        }
    }
    out
}

fn tv_keyed(a: &BTreeMap<u64, f64>, b: &BTreeMap<u64, f64>) -> f64 {
    let mut acc = 0.0;
    for (k, &p) in a {
        acc += (p - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, &q) in b {
        if !a.contains_key(k) {
            acc += q;
        }
    }
    0.5 * acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentParams {
    pub instances: usize,
    pub max_len: usize,
    pub max_vocab: usize,
    pub tolerance: f64,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        Self {
            instances: 24,
            max_len: 4,
            max_vocab: 3,
            tolerance: 1e-10,
        }
    }
}

/// Largest total-variation gap over stages and prompts between the
/// teacher-forced state marginals and those of the chain that writes
/// posterior tokens, both under the reveal policy `positions`.
pub fn alignment_gap(target: &TableTarget, positions: PositionLaw<'_>) -> Result<f64, ExperimentError> {
    let v = target.vocab();
    let len = target.response_len();
    let mut worst: f64 = 0.0;
    for q in 0..target.prompts().len() {
        let root = target.initial_state(q)?;
        let policy = RevealChain {
            vocab: v,
            root: root.clone(),
            positions,
            tokens: TokenLaw::Uniform,
            reward: TerminalReward::Constant { value: 0.0 },
        };
        let mut forced: Vec<BTreeMap<u64, f64>> = vec![BTreeMap::new(); len + 1];
        for (o, p) in target.support(q)? {
            let mut clean: Vec<Token> = root.prompt().to_vec();
            clean.extend_from_slice(&o);
            let mut dist: Vec<(MaskedState, f64)> = vec![(root.clone(), p)];
            for (t, layer) in forced.iter_mut().enumerate() {
                for (s, m) in &dist {
                    *layer.entry(s.key(v)).or_insert(0.0) += m;
                }
                if t == len {
                    break;
                }
                let mut next: BTreeMap<u64, (MaskedState, f64)> = BTreeMap::new();
                for (s, m) in &dist {
                    for (i, w) in position_law(&policy, s) {
                        let child = s.apply_action(RevealAction::new(i, clean[i]))?;
                        next.entry(child.key(v)).or_insert((child, 0.0)).1 += m * w;
                    }
                }
                dist = next.into_values().collect();
            }
        }
        let ideal = RevealChain {
            tokens: TokenLaw::Posterior { target, prompt: q },
            ..policy
        };
        let space = StateSpace::enumerate(&ideal)?;
        let occ = occupancy(&space, &*base_kernel(&ideal))?;
        for (t, (states, probs)) in space.layers().iter().zip(&occ).enumerate() {
            let ideal_law: BTreeMap<u64, f64> = states.iter().map(|s| s.key(v)).zip(probs.iter().copied()).collect();
            worst = worst.max(tv_keyed(&forced[t], &ideal_law));
        }
    }
    Ok(worst)
}

pub(super) fn alignment(p: &AlignmentParams, seed: u64) -> Result<Outcome, ExperimentError> {
    if p.max_len == 0 || p.max_vocab < 2 {
        return Err(bad_params("alignment", "need max_len >= 1 and max_vocab >= 2"));
    }
    let results = map_indexed(p.instances, |i| -> Result<Vec<(&'static str, f64)>, ExperimentError> {
        let mut rng = rep_rng(seed, i);
        let len = 1 + rng.below(p.max_len);
        let v = vocab(2 + rng.below(p.max_vocab - 1));
        let n_prompts = 1 + rng.below(2);
        let prompt_len = rng.below(2);
        let target = if i == 0 {
            let o: Vec<Token> = (0..len).map(|_| rng.below(v.size()) as Token).collect();
            TableTarget::point_mass(v, &[], &o)?
        } else {
            TableTarget::random(v, len, n_prompts, prompt_len, 0.7, &mut rng)?
        };
        let model = FrozenRandomDenoiser::new(v, seed ^ (i as u64), 2.0);
        let uniform = alignment_gap(&target, PositionLaw::Uniform)?;
        let conf = alignment_gap(&target, PositionLaw::Confidence(&model))?;
        Ok(vec![
            ("instance", i as f64),
            ("len", len as f64),
            ("vocab", v.size() as f64),
            ("gap_uniform", uniform),
            ("gap_confidence", conf),
        ])
    });
    let mut out = Outcome::default();
    let mut worst: f64 = 0.0;
    for r in results {
        let row = r?;
        worst = worst.max(row[3].1).max(row[4].1);
        out.row(&row);
    }
    out.checks.push(Check::at_most("max_tv_gap", worst, p.tolerance));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoobParams {
    pub instances: usize,
    pub betas: Vec<f64>,
    pub path_tolerance: f64,
    pub residual_tolerance: f64,
    pub bound_slack: f64,
}

impl Default for DoobParams {
    fn default() -> Self {
        Self {
            instances: 24,
            betas: vec![0.5, 1.0, 2.0],
            path_tolerance: 1e-12,
            residual_tolerance: 1e-10,
            bound_slack: 1e-12,
        }
    }
}

struct DoobMetrics {
    path_gap: f64,
    residual: f64,
    partition_gap: f64,
    rstar_min: f64,
    rstar_max: f64,
    terminal_gap: f64,
    kl_chain_gap: f64,
    kl_terminal: f64,
    kl_path: f64,
}

/// Exact checks of the tilted chain on one instance.
fn doob_instance(chain: &dyn BaseChain, beta: f64) -> Result<DoobMetrics, OracleError> {
    let h = compute_h(chain, beta)?;
    let base_paths = enumerate_paths(chain, &*base_kernel(chain))?;
    let z_forward: f64 = base_paths
        .iter()
        .map(|p| p.log_prob.exp() * (beta * chain.reward(&p.terminal)).exp())
        .sum();
    let gibbs = |s: &MaskedState| exact_gibbs_kernel(chain, &h, s);
    let gibbs_paths = enumerate_paths(chain, &gibbs)?;
    let tilted: BTreeMap<&[RevealAction], f64> = base_paths
        .iter()
        .map(|p| {
            (
                p.actions.as_slice(),
                p.log_prob.exp() * (beta * chain.reward(&p.terminal)).exp() / z_forward,
            )
        })
        .collect();
    let mut path_gap: f64 = 0.0;
    for p in &gibbs_paths {
        let want = tilted.get(p.actions.as_slice()).copied().unwrap_or(0.0);
        path_gap = path_gap.max((p.log_prob.exp() - want).abs());
    }
    if gibbs_paths.len() != base_paths.len() {
        path_gap = f64::INFINITY;
    }
    let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (s, _) in h.iter() {
        for (a, _) in chain.actions(s) {
            let r = exact_process_reward(&h, s, a)?;
            rmin = rmin.min(r);
            rmax = rmax.max(r);
        }
    }
    let nu_gibbs = terminal_law(&gibbs_paths, chain.vocab());
    let nu_tilt = global_tilt_terminal_law(chain, beta)?;
    let mut terminal_gap: f64 = 0.0;
    for (k, p) in &nu_tilt {
        terminal_gap = terminal_gap.max((p - nu_gibbs.get(k).copied().unwrap_or(0.0)).abs());
    }
    let base = base_kernel(chain);
    let kl_path = pathwise_kl(h.space(), &gibbs, &*base)?;
    let kl_direct = pathwise_kl_direct(chain, &gibbs, &*base)?;
    let nu_base = terminal_law(&base_paths, chain.vocab());
    Ok(DoobMetrics {
        path_gap,
        residual: h.residual(chain)?,
        partition_gap: (h.partition() - z_forward).abs(),
        rstar_min: rmin,
        rstar_max: rmax,
        terminal_gap,
        kl_chain_gap: (kl_path - kl_direct).abs(),
        kl_terminal: kl_keyed(&nu_tilt, &nu_base),
        kl_path,
    })
}

pub(super) fn doob(p: &DoobParams, seed: u64) -> Result<Outcome, ExperimentError> {
    if p.betas.is_empty() || p.betas.iter().any(|b| !(*b >= 0.0)) {
        return Err(bad_params("doob", "betas must be a nonempty list of nonnegative values"));
    }
    type InstanceResult = Result<(Vec<(&'static str, f64)>, DoobMetrics), ExperimentError>;
    let results = map_indexed(p.instances, |i| -> InstanceResult {
        let mut rng = rep_rng(seed, i);
        let len = 2 + rng.below(2);
        let v = vocab(2 + rng.below(2));
        let beta = p.betas[i % p.betas.len()];
        let model = FrozenRandomDenoiser::new(v, seed.wrapping_add(i as u64), 1.5);
        let target = TableTarget::random(v, len, 1, 0, 0.8, &mut rng)?;
        let positions = match rng.below(3) {
            0 => PositionLaw::Uniform,
            1 => PositionLaw::LeftToRight,
            _ => PositionLaw::Confidence(&model),
        };
        let tokens = match rng.below(3) {
            0 => TokenLaw::Uniform,
            1 => TokenLaw::Model(&model),
            _ => TokenLaw::Posterior {
                target: &target,
                prompt: 0,
            },
        };
        let reward = if rng.bernoulli(0.5) {
            random_table_reward(v, len, &mut rng)
        } else {
            TerminalReward::Hamming {
                reference: (0..len).map(|_| rng.below(v.size()) as Token).collect(),
            }
        };
        let chain = RevealChain {
            vocab: v,
            root: MaskedState::all_masked(&[], len),
            positions,
            tokens,
            reward,
        };
        let m = doob_instance(&chain, beta)?;
        let row = vec![
            ("instance", i as f64),
            ("beta", beta),
            ("path_gap", m.path_gap),
            ("h_residual", m.residual),
            ("partition_gap", m.partition_gap),
            ("rstar_min", m.rstar_min),
            ("rstar_max", m.rstar_max),
            ("terminal_gap", m.terminal_gap),
            ("kl_chain_rule_gap", m.kl_chain_gap),
            ("kl_terminal", m.kl_terminal),
            ("kl_path", m.kl_path),
        ];
        Ok((row, m))
    });
    let mut out = Outcome::default();
    let (mut path, mut res, mut part, mut term, mut chain_gap) = (0f64, 0f64, 0f64, 0f64, 0f64);
    let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut dpi = true;
    for r in results {
        let (row, m) = r?;
        path = path.max(m.path_gap);
        res = res.max(m.residual);
        part = part.max(m.partition_gap);
        term = term.max(m.terminal_gap);
        chain_gap = chain_gap.max(m.kl_chain_gap);
        rmin = rmin.min(m.rstar_min);
        rmax = rmax.max(m.rstar_max);
        dpi &= m.kl_terminal <= m.kl_path + 1e-12;
        out.row(&row);
    }
    out.checks.push(Check::at_most("max_path_gap", path, p.path_tolerance));
    out.checks.push(Check::at_most("max_h_residual", res, p.residual_tolerance));
    out.checks.push(Check::at_most("max_partition_gap", part, p.residual_tolerance));
    out.checks.push(Check::at_most("max_terminal_gap", term, p.path_tolerance));
    out.checks.push(Check::at_most("max_kl_chain_rule_gap", chain_gap, p.residual_tolerance));
    out.checks.push(Check::at_least("min_process_reward", rmin, -p.bound_slack));
    out.checks.push(Check::at_most("max_process_reward", rmax, 1.0 + p.bound_slack));
    out.checks.push(Check::flag("terminal_kl_below_path_kl", dpi));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftBonRateParams {
    pub len: usize,
    pub vocab: usize,
    pub beta: f64,
    pub shortlist: Vec<usize>,
    /// Realized-shortlist draws per `N` for the per-realization KL.
    pub realizations: usize,
    pub slope_lo: f64,
    pub slope_hi: f64,
}

impl Default for SoftBonRateParams {
    fn default() -> Self {
        Self {
            len: 4,
            vocab: 3,
            beta: 1.0,
            shortlist: vec![2, 4, 8, 16, 32, 64],
            realizations: 200,
            slope_lo: -1.3,
            slope_hi: -0.7,
        }
    }
}

/// The rate instance: left-to-right reveals, tokens from a frozen model,
/// random table reward.
fn softbon_chain<'a>(p: &SoftBonRateParams, model: &'a FrozenRandomDenoiser, rng: &mut SeededRng) -> RevealChain<'a> {
    let v = vocab(p.vocab);
    RevealChain {
        vocab: v,
        root: MaskedState::all_masked(&[], p.len),
        positions: PositionLaw::LeftToRight,
        tokens: TokenLaw::Model(model),
        reward: random_table_reward(v, p.len, rng),
    }
}

pub(super) fn softbon_rate(p: &SoftBonRateParams, seed: u64) -> Result<Outcome, ExperimentError> {
    if p.len == 0 || p.vocab < 2 || p.shortlist.contains(&0) || !(p.beta >= 0.0) {
        return Err(bad_params("softbon-rate", "need len >= 1, vocab >= 2, beta >= 0 and positive shortlist sizes"));
    }
    let mut rng = rep_rng(seed, 0);
    let model = FrozenRandomDenoiser::new(vocab(p.vocab), seed, 1.5);
    let chain = softbon_chain(p, &model, &mut rng);
    let h = compute_h(&chain, p.beta)?;
    let space = h.space();
    let max_actions = space
        .layers()
        .iter()
        .flatten()
        .map(|s| chain.actions(s).len())
        .max()
        .unwrap_or(0);
    let nu_beta = global_tilt_terminal_law(&chain, p.beta)?;
    let gibbs = |s: &MaskedState| exact_gibbs_kernel(&chain, &h, s);
    let nu_base = terminal_law(&enumerate_paths(&chain, &*base_kernel(&chain))?, chain.vocab());
    let mode = SoftBonMode::Exact { cap: 2_000_000 };

    let mut sizes = vec![1usize];
    sizes.extend(p.shortlist.iter().copied().filter(|&n| n != 1));
    let rows = map_indexed(sizes.len(), |k| -> Result<Vec<(&'static str, f64)>, ExperimentError> {
        let n = sizes[k];
        let expected = |s: &MaskedState| softbon_kernel(&chain, &h, s, n, mode, None);
        let nu_hat = terminal_law(&enumerate_paths(&chain, &expected)?, chain.vocab());
        let measured = kl_keyed(&nu_beta, &nu_hat);
        let path_kl = pathwise_kl(space, &gibbs, &expected)?;
        let (real_mean, real_inf) = realized_kl(&chain, &h, &nu_beta, n, p.realizations, rep_rng(seed, 1000 + k))?;
        let bound = softbon_terminal_bound(p.len, p.beta, n);
        Ok(vec![
            ("shortlist", n as f64),
            ("kl_terminal", measured),
            ("kl_path", path_kl),
            ("bound", bound),
            ("bound_ok", if measured <= bound { 1.0 } else { 0.0 }),
            ("realized_kl_finite_mean", real_mean),
            ("realized_infinite_fraction", real_inf),
        ])
    });
    let mut out = Outcome::default();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (k, r) in rows.into_iter().enumerate() {
        let row = r?;
        let n = sizes[k];
        let measured = row[1].1;
        if n == 1 {
            let base_kl = kl_keyed(&nu_beta, &nu_base);
            out.checks.push(Check::at_most("n1_matches_base_law", (measured - base_kl).abs(), 1e-12));
        } else {
            out.checks
                .push(Check::at_most(format!("bound_n{n}"), measured, row[3].1));
            if p.shortlist.contains(&n) && measured > 0.0 {
                xs.push((n as f64).ln());
                ys.push(measured.ln());
            }
        }
        out.checks.push(Check::flag(format!("terminal_below_path_n{n}"), measured <= row[2].1 + 1e-12));
        out.row(&row);
    }
    out.checks
        .push(Check::at_most("max_actions_per_state", max_actions as f64, 6.0).soft());
    if xs.len() >= 2 {
        out.checks
            .push(Check::within("loglog_slope", ols_slope(&xs, &ys), p.slope_lo, p.slope_hi));
    }
    Ok(out)
}

/// Mean of the finite values of `KL(nu_beta || nu_hat)` when every state
/// keeps one realized shortlist, and the fraction of realizations where the
/// KL is infinite.
fn realized_kl(
    chain: &RevealChain<'_>,
    h: &crate::oracle::HTable,
    nu_beta: &BTreeMap<u64, f64>,
    n: usize,
    draws: usize,
    mut rng: SeededRng,
) -> Result<(f64, f64), ExperimentError> {
    let beta = h.beta();
    let (mut sum, mut finite, mut infinite) = (0.0, 0usize, 0usize);
    for _ in 0..draws {
        let mut kernels: BTreeMap<u64, Vec<(RevealAction, f64)>> = BTreeMap::new();
        for s in h.space().layers().iter().flatten() {
            let actions = chain.actions(s);
            if actions.is_empty() {
                continue;
            }
            let q0: Vec<f64> = actions.iter().map(|a| a.1).collect();
            let mut weight = vec![0.0; actions.len()];
            for _ in 0..n {
                let j = rng.categorical(&q0).unwrap_or(0);
                weight[j] += (beta * exact_process_reward(h, s, actions[j].0)?).exp();
            }
            let z: f64 = weight.iter().sum();
            kernels.insert(
                s.key(chain.vocab),
                actions.iter().zip(&weight).map(|(a, w)| (a.0, w / z)).collect(),
            );
        }
        let kernel: Box<Kernel<'_>> = Box::new(|s: &MaskedState| {
            kernels
                .get(&s.key(chain.vocab))
                .cloned()
                .ok_or_else(|| OracleError::UnknownState(s.to_string()))
        });
        let law = terminal_law(&enumerate_paths(chain, &*kernel)?, chain.vocab);
        let k = kl_keyed(nu_beta, &law);
        if k.is_finite() {
            sum += k;
            finite += 1;
        } else {
            infinite += 1;
        }
    }
    let mean = if finite > 0 { sum / finite as f64 } else { f64::NAN };
    Ok((mean, infinite as f64 / draws.max(1) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MechanicsParams {
    pub trials: usize,
}

impl Default for MechanicsParams {
    fn default() -> Self {
        Self { trials: 200 }
    }
}

struct MechanicsTrial {
    gate_ok: bool,
    score_ok: bool,
    merge_ok: bool,
    snapshot_ok: bool,
    decode_ok: bool,
}

fn mechanics_trial(seed: u64, i: usize) -> Result<MechanicsTrial, ExperimentError> {
    let mut rng = rep_rng(seed, i);
    let tw = rng.below(1000) as u64;
    let ts = tw + 1 + rng.below(1000) as u64;
    let ready = 1 + rng.below(200) as u64;
    let params = GateParams::new(tw, ts, ready).map_err(|m| bad_params("mechanics", m))?;
    let schedule = GateSchedule::new(params, GateClock::Global);
    let n = rng.below(500) as u64;
    let gate_ok = schedule.gate(tw, n) == 0.0
        && schedule.gate(ts + rng.below(100) as u64, ready + rng.below(100) as u64) == 1.0;

    // score endpoints
    let phases = 1 + rng.below(4);
    let bins = 1 + rng.below(8);
    let beta = 0.1 + 2.0 * rng.uniform();
    let mut table = BucketTable::new(phases, bins, beta, params)?;
    let events: Vec<(PhaseBin, f64)> = (0..rng.below(300))
        .map(|_| {
            (
                PhaseBin {
                    phase: rng.below(phases),
                    bin: rng.below(bins),
                },
                rng.uniform(),
            )
        })
        .collect();
    for &(c, r) in &events {
        table.record(c, r)?;
    }
    let v = vocab(2 + rng.below(3));
    let len = 2 + rng.below(4);
    let model = FrozenRandomDenoiser::new(v, seed ^ i as u64, 2.0);
    let state = MaskedState::all_masked(&[], len);
    let cold = dprm_decide(
        &state,
        &model,
        &table,
        &schedule,
        tw,
        1,
        8,
        ProposalMode::Confidence,
        PhaseMode::Fraction,
        &mut rng,
    )?;
    let full = GateSchedule::new(GateParams::new(tw, ts, 1).expect("valid"), GateClock::ForceFull);
    let warm = dprm_decide(
        &state,
        &model,
        &table,
        &full,
        0,
        1,
        8,
        ProposalMode::Confidence,
        PhaseMode::Fraction,
        &mut rng,
    )?;
    let score_ok = cold.records.iter().all(|r| r.eta == 0.0 && r.score == r.u)
        && warm
            .records
            .iter()
            .all(|r| if r.eta == 1.0 { r.score == r.g } else { table.estimate(PhaseBin { phase: warm.phase, bin: r.bin }).n == 0 });

    // merge over a random partition in a random grouping
    let parts = 1 + rng.below(5);
    let mut shards: Vec<BucketTable> = (0..parts)
        .map(|_| BucketTable::new(phases, bins, beta, params))
        .collect::<Result<_, _>>()?;
    for &(c, r) in &events {
        shards[rng.below(parts)].record(c, r)?;
    }
    while shards.len() > 1 {
        let a = rng.below(shards.len());
        let other = shards.swap_remove(a);
        let b = rng.below(shards.len());
        shards[b].merge(&other)?;
    }
    let merge_ok = shards[0] == table;

    let json = serde_json::to_string(&table.to_snapshot()).expect("snapshots serialize");
    let back: crate::controllers::BucketSnapshot = serde_json::from_str(&json).expect("snapshot json parses");
    let snapshot_ok = BucketTable::from_snapshot(&back)? == table;

    let config = DecodeConfig {
        horizon: len,
        phases: len,
        sampled_tokens: rng.bernoulli(0.5),
        top_up: true,
    };
    let mut c1 = Controller::dprm(DprmParams::default(), table.clone(), GateSchedule::new(params, GateClock::Decode));
    let mut c2 = c1.clone();
    let stream = rng.below(1 << 20) as u64;
    let d1 = decode_aligned(&mut c1, &model, &[], len, &config, &mut SeededRng::new(seed, stream))?;
    let d2 = decode_aligned(&mut c2, &model, &[], len, &config, &mut SeededRng::new(seed, stream))?;
    let decode_ok = d1 == d2 && c1 == c2;
    Ok(MechanicsTrial {
        gate_ok,
        score_ok,
        merge_ok,
        snapshot_ok,
        decode_ok,
    })
}

pub(super) fn mechanics(p: &MechanicsParams, seed: u64) -> Result<Outcome, ExperimentError> {
    let results = map_indexed(p.trials, |i| mechanics_trial(seed, i));
    let mut out = Outcome::default();
    let mut all = [true; 5];
    for (i, r) in results.into_iter().enumerate() {
        let t = r?;
        let flags = [t.gate_ok, t.score_ok, t.merge_ok, t.snapshot_ok, t.decode_ok];
        for (a, f) in all.iter_mut().zip(flags) {
            *a &= f;
        }
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        out.row(&[
            ("trial", i as f64),
            ("gate_endpoints", b(t.gate_ok)),
            ("score_endpoints", b(t.score_ok)),
            ("merge_associative", b(t.merge_ok)),
            ("snapshot_roundtrip", b(t.snapshot_ok)),
            ("decode_deterministic", b(t.decode_ok)),
        ]);
    }
    for (name, ok) in [
        "gate_endpoints",
        "score_endpoints",
        "merge_associative",
        "snapshot_roundtrip",
        "decode_deterministic",
    ]
    .into_iter()
    .zip(all)
    {
        out.checks.push(Check::flag(name, ok));
    }
    Ok(out)
}
