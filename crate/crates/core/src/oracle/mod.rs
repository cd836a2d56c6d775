//! Exact computations on enumerable instances.
//!
//! A [`BaseChain`] describes the untilted reveal process: a root state, the
//! actions available at every state with their base probabilities `q0`, and a
//! terminal reward. From it the oracle computes the harmonic function
//! `h_t(s) = E[exp(beta R) | S_t = s]` by backward recursion, the exact
//! process reward and Gibbs reveal kernel, and full path and terminal laws of
//! any state-dependent kernel.

mod bounds;
mod dump;
mod separation;
mod softbon;

pub use bounds::{
    bernstein_radius, residual_mass_lower_bound, second_moment, softbon_terminal_bound,
    softmax_mass, top_m, topm_regret, union_size, variance_optimal_proposal, variance_optimal_reference,
};
pub use dump::{dump_tables, ActionRow, DumpPositions, DumpTokens, OracleDump, StateRow};
pub use separation::{map_recovery_curve, map_recovery_trial, MaskRegime, RecoveryOutcome};
pub use softbon::{softbon_kernel, softbon_sample, softbon_stagewise_law, SoftBonLaw, SoftBonMode};

use crate::denoiser::{confidence, TokenModel};
use crate::state::{clamp_psi, MaskedState, RevealAction, StateError, Token, Vocab, ENUMERATION_CAP};
use crate::targets::{TableTarget, TerminalReward};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("reachable state space exceeds the cap of {cap} states")]
    TooLarge { cap: u64 },
    #[error("state {0} is not in the enumerated space")]
    UnknownState(String),
    #[error("state {0} has no actions")]
    Terminal(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Untilted reveal process.
pub trait BaseChain: Sync {
    fn vocab(&self) -> Vocab;

    fn root(&self) -> MaskedState;

    /// Actions with positive base probability at `s`, in a fixed order.
    fn actions(&self, s: &MaskedState) -> Vec<(RevealAction, f64)>;

    /// Terminal reward in `[0, 1]`.
    fn reward(&self, s: &MaskedState) -> f64;
}

/// Law of the next position to reveal.
#[derive(Clone, Copy)]
pub enum PositionLaw<'a> {
    Uniform,
    /// Always the leftmost masked position.
    LeftToRight,
    /// Proportional to the model's confidence.
    Confidence(&'a dyn TokenModel),
}

/// Law of the token written at the chosen position.
#[derive(Clone, Copy)]
pub enum TokenLaw<'a> {
    Uniform,
    /// Sampled from the model's predictive distribution.
    Model(&'a dyn TokenModel),
    /// The model's argmax; the chain then branches only over positions.
    Argmax(&'a dyn TokenModel),
    /// The target posterior `p*(O_i | q, z)` (teacher mode).
    Posterior { target: &'a TableTarget, prompt: usize },
}

/// `q0((i, u) | s) = position(i | s) * token(u | s, i)`.
#[derive(Clone)]
pub struct RevealChain<'a> {
    pub vocab: Vocab,
    pub root: MaskedState,
    pub positions: PositionLaw<'a>,
    pub tokens: TokenLaw<'a>,
    pub reward: TerminalReward,
}

impl BaseChain for RevealChain<'_> {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn root(&self) -> MaskedState {
        self.root.clone()
    }

    fn actions(&self, s: &MaskedState) -> Vec<(RevealAction, f64)> {
        let masked = s.masked_positions();
        if masked.is_empty() {
            return Vec::new();
        }
        let pos_w: Vec<f64> = match self.positions {
            PositionLaw::Uniform => vec![1.0; masked.len()],
            PositionLaw::LeftToRight => (0..masked.len()).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect(),
            PositionLaw::Confidence(m) => masked.iter().map(|&i| clamp_psi(confidence(m, s, i).0)).collect(),
        };
        let total: f64 = pos_w.iter().sum();
        let v = self.vocab.size();
        let mut out = Vec::new();
        for (&i, w) in masked.iter().zip(pos_w) {
            let pw = w / total;
            let tok: Vec<(Token, f64)> = match self.tokens {
                TokenLaw::Uniform => (0..v).map(|u| (u as Token, 1.0 / v as f64)).collect(),
                TokenLaw::Model(m) => m.probs(s, i).into_iter().enumerate().map(|(u, p)| (u as Token, p)).collect(),
                TokenLaw::Argmax(m) => vec![(confidence(m, s, i).1, 1.0)],
                TokenLaw::Posterior { target, prompt } => target
                    .posterior_token(prompt, s, i)
                    .unwrap_or_default()
                    .into_iter()
                    .enumerate()
                    .map(|(u, p)| (u as Token, p))
                    .collect(),
            };
            for (u, p) in tok {
                if pw * p > 0.0 {
                    out.push((RevealAction::new(i, u), pw * p));
                }
            }
        }
        out
    }

    fn reward(&self, s: &MaskedState) -> f64 {
        self.reward.eval(s.response(), self.vocab)
    }
}

/// Reachable states grouped by the number of reveals since the root.
#[derive(Debug, Clone)]
pub struct StateSpace {
    root_masked: usize,
    layers: Vec<Vec<MaskedState>>,
    index: Vec<BTreeMap<u64, usize>>,
    vocab: Vocab,
}

impl StateSpace {
    pub fn enumerate(chain: &dyn BaseChain) -> Result<Self, OracleError> {
        let vocab = chain.vocab();
        let root = chain.root();
        let root_masked = root.masked_count();
        let mut layers = vec![vec![root.clone()]];
        let mut index = vec![BTreeMap::from([(root.key(vocab), 0usize)])];
        let mut total = 1u64;
        for _ in 0..root_masked {
            let mut next: Vec<MaskedState> = Vec::new();
            let mut next_index: BTreeMap<u64, usize> = BTreeMap::new();
            for s in layers.last().unwrap() {
                for (a, _) in chain.actions(s) {
                    let child = s.apply_action(a)?;
                    let key = child.key(vocab);
                    if let std::collections::btree_map::Entry::Vacant(e) = next_index.entry(key) {
                        e.insert(next.len());
                        next.push(child);
                        total += 1;
                        if total > ENUMERATION_CAP {
                            return Err(OracleError::TooLarge { cap: ENUMERATION_CAP });
                        }
                    }
                }
            }
            layers.push(next);
            index.push(next_index);
        }
        Ok(Self {
            root_masked,
            layers,
            index,
            vocab,
        })
    }

    pub fn horizon(&self) -> usize {
        self.root_masked
    }

    pub fn layers(&self) -> &[Vec<MaskedState>] {
        &self.layers
    }

    pub fn state_count(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// `(layer, slot)` of `s`.
    pub fn locate(&self, s: &MaskedState) -> Result<(usize, usize), OracleError> {
        let layer = self
            .root_masked
            .checked_sub(s.masked_count())
            .ok_or_else(|| OracleError::UnknownState(s.to_string()))?;
        self.index
            .get(layer)
            .and_then(|m| m.get(&s.key(self.vocab)))
            .map(|&slot| (layer, slot))
            .ok_or_else(|| OracleError::UnknownState(s.to_string()))
    }
}

/// `h_t(s)` and `E[R | s]` over every reachable state.
#[derive(Debug, Clone)]
pub struct HTable {
    beta: f64,
    space: StateSpace,
    h: Vec<Vec<f64>>,
    mean: Vec<Vec<f64>>,
}

/// Backward recursion `h_t(s) = sum_a q0(a|s) h_{t+1}(s^a)` from
/// `h_T = exp(beta R)`.
pub fn compute_h(chain: &dyn BaseChain, beta: f64) -> Result<HTable, OracleError> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(OracleError::Invalid(format!("beta must be finite and nonnegative, got {beta}")));
    }
    let space = StateSpace::enumerate(chain)?;
    let depth = space.layers.len();
    let mut h: Vec<Vec<f64>> = vec![Vec::new(); depth];
    let mut mean: Vec<Vec<f64>> = vec![Vec::new(); depth];
    let last = depth - 1;
    for s in &space.layers[last] {
        let r = chain.reward(s);
        if !(0.0..=1.0).contains(&r) {
            return Err(OracleError::Invalid(format!("reward {r} at {s} outside [0, 1]")));
        }
        h[last].push((beta * r).exp());
        mean[last].push(r);
    }
    for layer in (0..last).rev() {
        let mut hs = Vec::with_capacity(space.layers[layer].len());
        let mut ms = Vec::with_capacity(space.layers[layer].len());
        for s in &space.layers[layer] {
            let (mut acc_h, mut acc_m) = (0.0, 0.0);
            for (a, q) in chain.actions(s) {
                let child = s.apply_action(a)?;
                let slot = space.index[layer + 1][&child.key(space.vocab)];
                acc_h += q * h[layer + 1][slot];
                acc_m += q * mean[layer + 1][slot];
            }
            hs.push(acc_h);
            ms.push(acc_m);
        }
        h[layer] = hs;
        mean[layer] = ms;
    }
    Ok(HTable { beta, space, h, mean })
}

impl HTable {
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn h(&self, s: &MaskedState) -> Result<f64, OracleError> {
        let (l, i) = self.space.locate(s)?;
        Ok(self.h[l][i])
    }

    /// `E_{P0}[R | s]`.
    pub fn mean_reward(&self, s: &MaskedState) -> Result<f64, OracleError> {
        let (l, i) = self.space.locate(s)?;
        Ok(self.mean[l][i])
    }

    /// `Z_beta = h_0(root)`.
    pub fn partition(&self) -> f64 {
        self.h[0][0]
    }

    /// `max |h_t(s) - sum_a q0(a|s) h_{t+1}(s^a)|` over non-terminal states.
    pub fn residual(&self, chain: &dyn BaseChain) -> Result<f64, OracleError> {
        let mut worst: f64 = 0.0;
        for (layer, states) in self.space.layers.iter().enumerate().take(self.space.layers.len() - 1) {
            for (slot, s) in states.iter().enumerate() {
                let mut acc = 0.0;
                for (a, q) in chain.actions(s) {
                    acc += q * self.h(&s.apply_action(a)?)?;
                }
                worst = worst.max((self.h[layer][slot] - acc).abs());
            }
        }
        Ok(worst)
    }

    /// Every `(state, h)` pair, root first.
    pub fn iter(&self) -> impl Iterator<Item = (&MaskedState, f64)> {
        self.space
            .layers
            .iter()
            .zip(&self.h)
            .flat_map(|(states, hs)| states.iter().zip(hs.iter().copied()))
    }
}

/// `R*(a; s) = (1/beta) log h_{t+1}(s^a)`; at `beta = 0` the limit `E[R | s^a]`.
pub fn exact_process_reward(h: &HTable, s: &MaskedState, a: RevealAction) -> Result<f64, OracleError> {
    let child = s.apply_action(a)?;
    if h.beta == 0.0 {
        return h.mean_reward(&child);
    }
    Ok(h.h(&child)?.ln() / h.beta)
}

/// `pi*(a|s) ∝ q0(a|s) h_{t+1}(s^a)`.
pub fn exact_gibbs_kernel(
    chain: &dyn BaseChain,
    h: &HTable,
    s: &MaskedState,
) -> Result<Vec<(RevealAction, f64)>, OracleError> {
    let actions = chain.actions(s);
    if actions.is_empty() {
        return Err(OracleError::Terminal(s.to_string()));
    }
    let mut w = Vec::with_capacity(actions.len());
    for &(a, q) in &actions {
        w.push(q * h.h(&s.apply_action(a)?)?);
    }
    let total: f64 = w.iter().sum();
    Ok(actions.into_iter().zip(w).map(|((a, _), x)| (a, x / total)).collect())
}

/// A state-dependent reveal kernel.
pub type Kernel<'k> = dyn Fn(&MaskedState) -> Result<Vec<(RevealAction, f64)>, OracleError> + Sync + 'k;

/// The base kernel of a chain.
pub fn base_kernel<'k>(chain: &'k dyn BaseChain) -> Box<Kernel<'k>> {
    Box::new(move |s: &MaskedState| Ok(chain.actions(s)))
}

/// One complete reveal path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub actions: Vec<RevealAction>,
    pub terminal: MaskedState,
    pub log_prob: f64,
}

/// Largest number of paths [`enumerate_paths`] will produce.
pub const PATH_CAP: usize = 4_000_000;

/// Every path with positive probability under `kernel`, with log-probabilities.
pub fn enumerate_paths(chain: &dyn BaseChain, kernel: &Kernel<'_>) -> Result<Vec<Path>, OracleError> {
    let mut frontier = vec![Path {
        actions: Vec::new(),
        terminal: chain.root(),
        log_prob: 0.0,
    }];
    let mut done = Vec::new();
    while let Some(p) = frontier.pop() {
        if p.terminal.is_terminal() {
            done.push(p);
            if done.len() > PATH_CAP {
                return Err(OracleError::TooLarge { cap: PATH_CAP as u64 });
            }
            continue;
        }
        for (a, w) in kernel(&p.terminal)? {
            if w <= 0.0 {
                continue;
            }
            let mut actions = p.actions.clone();
            actions.push(a);
            frontier.push(Path {
                actions,
                terminal: p.terminal.apply_action(a)?,
                log_prob: p.log_prob + w.ln(),
            });
        }
    }
    done.sort_by(|a, b| a.actions.cmp(&b.actions));
    Ok(done)
}

/// Terminal law as `(state key, probability)` pairs.
pub fn terminal_law(paths: &[Path], vocab: Vocab) -> BTreeMap<u64, f64> {
    let mut out: BTreeMap<u64, f64> = BTreeMap::new();
    for p in paths {
        *out.entry(p.terminal.key(vocab)).or_insert(0.0) += p.log_prob.exp();
    }
    out
}

/// Occupancy probability of every reachable state under `kernel`, layer by layer.
pub fn occupancy(space: &StateSpace, kernel: &Kernel<'_>) -> Result<Vec<Vec<f64>>, OracleError> {
    let mut occ: Vec<Vec<f64>> = space.layers.iter().map(|l| vec![0.0; l.len()]).collect();
    occ[0][0] = 1.0;
    for (layer, states) in space.layers[..space.layers.len() - 1].iter().enumerate() {
        for (slot, s) in states.iter().enumerate() {
            let mass = occ[layer][slot];
            if mass == 0.0 {
                continue;
            }
            for (a, w) in kernel(s)? {
                let child = s.apply_action(a)?;
                let (cl, cs) = space.locate(&child)?;
                occ[cl][cs] += mass * w;
            }
        }
    }
    Ok(occ)
}

/// `KL(p || q)`; `+inf` when `p` charges a point `q` does not.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            acc += a * (a / b).ln();
        }
    }
    acc.max(0.0)
}

/// [`kl`] over keyed laws.
pub fn kl_keyed(p: &BTreeMap<u64, f64>, q: &BTreeMap<u64, f64>) -> f64 {
    let mut acc = 0.0;
    for (k, &a) in p {
        if a > 0.0 {
            match q.get(k) {
                Some(&b) if b > 0.0 => acc += a * (a / b).ln(),
                _ => return f64::INFINITY,
            }
        }
    }
    acc.max(0.0)
}

fn kernel_map(kernel: &Kernel<'_>, s: &MaskedState) -> Result<BTreeMap<RevealAction, f64>, OracleError> {
    let mut m = BTreeMap::new();
    for (a, w) in kernel(s)? {
        *m.entry(a).or_insert(0.0) += w;
    }
    Ok(m)
}

/// `KL(P_A || P_B)` over reveal paths by the chain rule:
/// `sum_s P_A(s) KL(k_A(.|s) || k_B(.|s))`.
pub fn pathwise_kl(space: &StateSpace, a: &Kernel<'_>, b: &Kernel<'_>) -> Result<f64, OracleError> {
    let occ = occupancy(space, a)?;
    let mut total = 0.0;
    for (states, masses) in space.layers.iter().zip(&occ).take(space.layers.len() - 1) {
        for (s, &mass) in states.iter().zip(masses) {
            if mass == 0.0 {
                continue;
            }
            let ka = kernel_map(a, s)?;
            let kb = kernel_map(b, s)?;
            let mut local = 0.0;
            for (act, &pa) in &ka {
                if pa > 0.0 {
                    match kb.get(act) {
                        Some(&pb) if pb > 0.0 => local += pa * (pa / pb).ln(),
                        _ => return Ok(f64::INFINITY),
                    }
                }
            }
            total += mass * local;
        }
    }
    Ok(total.max(0.0))
}

/// `KL(P_A || P_B)` by direct enumeration of paths.
pub fn pathwise_kl_direct(chain: &dyn BaseChain, a: &Kernel<'_>, b: &Kernel<'_>) -> Result<f64, OracleError> {
    let pa = enumerate_paths(chain, a)?;
    let pb: BTreeMap<Vec<RevealAction>, f64> = enumerate_paths(chain, b)?
        .into_iter()
        .map(|p| (p.actions, p.log_prob))
        .collect();
    let mut total = 0.0;
    for p in &pa {
        match pb.get(&p.actions) {
            Some(&lq) => total += p.log_prob.exp() * (p.log_prob - lq),
            None => return Ok(f64::INFINITY),
        }
    }
    Ok(total.max(0.0))
}

/// `nu_beta(x) ∝ exp(beta R(x)) P0(X_T = x)` by tilting the base terminal law.
pub fn global_tilt_terminal_law(chain: &dyn BaseChain, beta: f64) -> Result<BTreeMap<u64, f64>, OracleError> {
    let paths = enumerate_paths(chain, &*base_kernel(chain))?;
    let vocab = chain.vocab();
    let mut law: BTreeMap<u64, f64> = BTreeMap::new();
    let mut rewards: BTreeMap<u64, f64> = BTreeMap::new();
    for p in &paths {
        let key = p.terminal.key(vocab);
        *law.entry(key).or_insert(0.0) += p.log_prob.exp();
        rewards.insert(key, chain.reward(&p.terminal));
    }
    let z: f64 = law.iter().map(|(k, p)| p * (beta * rewards[k]).exp()).sum();
    Ok(law
        .into_iter()
        .map(|(k, p)| (k, p * (beta * rewards[&k]).exp() / z))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn v(n: usize) -> Vocab {
        Vocab::new(n).unwrap()
    }

    fn uniform_chain(len: usize, vocab: Vocab, reward: TerminalReward) -> RevealChain<'static> {
        RevealChain {
            vocab,
            root: MaskedState::all_masked(&[], len),
            positions: PositionLaw::Uniform,
            tokens: TokenLaw::Uniform,
            reward,
        }
    }

    #[test]
    fn spec_h_example() {
        let chain = uniform_chain(2, v(2), TerminalReward::ExactMatch { reference: vec![0, 0] });
        let h = compute_h(&chain, 1.0).unwrap();
        let e = 1f64.exp();
        assert!((h.partition() - (e + 3.0) / 4.0).abs() < 1e-15);
        assert!((h.partition() - 1.4296).abs() < 1e-4);
        let root = chain.root();
        let r = exact_process_reward(&h, &root, RevealAction::new(0, 0)).unwrap();
        assert!((r - ((e + 1.0) / 2.0).ln()).abs() < 1e-15);
        assert!((r - 0.6201).abs() < 1e-4);
        assert!(h.residual(&chain).unwrap() < 1e-15);
    }

    #[test]
    fn beta_zero_gives_unit_h_and_base_kernel() {
        let chain = uniform_chain(3, v(2), TerminalReward::Hamming { reference: vec![1, 0, 1] });
        let h = compute_h(&chain, 0.0).unwrap();
        assert!(h.iter().all(|(_, x)| (x - 1.0).abs() < 1e-14));
        let root = chain.root();
        let k = exact_gibbs_kernel(&chain, &h, &root).unwrap();
        for ((a, p), (b, q)) in k.iter().zip(chain.actions(&root)) {
            assert_eq!(*a, b);
            assert!((p - q).abs() < 1e-15);
        }
        // beta = 0 limit of R* is the conditional mean
        let r = exact_process_reward(&h, &root, RevealAction::new(0, 1)).unwrap();
        assert!((r - (1.0 + 0.5 + 0.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_reward_gives_constant_process_reward() {
        let chain = uniform_chain(3, v(3), TerminalReward::Constant { value: 0.37 });
        let h = compute_h(&chain, 1.7).unwrap();
        for (s, _) in h.iter() {
            for (a, _) in chain.actions(s) {
                assert!((exact_process_reward(&h, s, a).unwrap() - 0.37).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn terminal_adjacent_process_reward_is_reward() {
        let chain = uniform_chain(2, v(2), TerminalReward::Hamming { reference: vec![1, 1] });
        let h = compute_h(&chain, 2.0).unwrap();
        let s = MaskedState::from_tokens(vec![1, crate::state::MASK], 0, 1).unwrap();
        let r = exact_process_reward(&h, &s, RevealAction::new(1, 0)).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_action_gibbs_example() {
        // one masked position, binary vocabulary: actions (0,0), (0,1)
        let chain = uniform_chain(1, v(2), TerminalReward::ExactMatch { reference: vec![1] });
        let h = compute_h(&chain, 1.0).unwrap();
        let k = exact_gibbs_kernel(&chain, &h, &chain.root()).unwrap();
        let e = 1f64.exp();
        assert!((k[0].1 - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((k[1].1 - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
    }

    fn random_table_reward(vocab: Vocab, len: usize, rng: &mut SeededRng) -> TerminalReward {
        TerminalReward::Table {
            values: (0..vocab.size().pow(len as u32)).map(|_| rng.uniform()).collect(),
        }
    }

    #[test]
    fn doob_consistency_and_path_kl() {
        for seed in 0..6 {
            let mut rng = SeededRng::new(seed, 0);
            let vocab = v(2 + (seed as usize % 2));
            let chain = uniform_chain(3, vocab, random_table_reward(vocab, 3, &mut rng));
            let beta = 0.5 + rng.uniform();
            let h = compute_h(&chain, beta).unwrap();
            let gibbs = |s: &MaskedState| exact_gibbs_kernel(&chain, &h, s);
            let tilted = enumerate_paths(&chain, &gibbs).unwrap();
            let base = enumerate_paths(&chain, &*base_kernel(&chain)).unwrap();
            let z = h.partition();
            let z_fwd: f64 = base.iter().map(|p| p.log_prob.exp() * (beta * chain.reward(&p.terminal)).exp()).sum();
            assert!((z - z_fwd).abs() < 1e-10);
            for (t, b) in tilted.iter().zip(&base) {
                assert_eq!(t.actions, b.actions);
                let want = b.log_prob.exp() * (beta * chain.reward(&b.terminal)).exp() / z;
                assert!((t.log_prob.exp() - want).abs() < 1e-12);
            }
            let chain_rule = pathwise_kl(h.space(), &gibbs, &*base_kernel(&chain)).unwrap();
            let direct = pathwise_kl_direct(&chain, &gibbs, &*base_kernel(&chain)).unwrap();
            assert!((chain_rule - direct).abs() < 1e-10);
            let nu_b = terminal_law(&tilted, vocab);
            let nu_0 = terminal_law(&base, vocab);
            assert!(kl_keyed(&nu_b, &nu_0) <= chain_rule + 1e-12);
            let global = global_tilt_terminal_law(&chain, beta).unwrap();
            for (k, p) in &global {
                assert!((nu_b[k] - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn teacher_chain_root_value_is_tilted_mean() {
        let mut rng = SeededRng::new(3, 0);
        let vocab = v(2);
        let target = TableTarget::random(vocab, 3, 1, 0, 0.8, &mut rng).unwrap();
        let reward = random_table_reward(vocab, 3, &mut rng);
        let chain = RevealChain {
            vocab,
            root: target.initial_state(0).unwrap(),
            positions: PositionLaw::Uniform,
            tokens: TokenLaw::Posterior { target: &target, prompt: 0 },
            reward: reward.clone(),
        };
        let h = compute_h(&chain, 1.0).unwrap();
        let direct: f64 = target
            .support(0)
            .unwrap()
            .iter()
            .map(|(o, p)| p * reward.eval(o, vocab).exp())
            .sum();
        assert!((h.partition() - direct).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let chain = uniform_chain(11, v(3), TerminalReward::Constant { value: 0.0 });
        assert!(matches!(compute_h(&chain, 1.0), Err(OracleError::TooLarge { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn process_reward_bounded(seed in any::<u64>(), beta in 0.01f64..5.0) {
            let mut rng = SeededRng::new(seed, 0);
            let vocab = v(2 + rng.below(2));
            let len = 1 + rng.below(3);
            let chain = uniform_chain(len, vocab, random_table_reward(vocab, len, &mut rng));
            let h = compute_h(&chain, beta).unwrap();
            prop_assert!(h.residual(&chain).unwrap() < 1e-10);
            for (s, hv) in h.iter() {
                prop_assert!(hv >= 1.0 - 1e-12 && hv <= beta.exp() * (1.0 + 1e-12));
                for (a, _) in chain.actions(s) {
                    let r = exact_process_reward(&h, s, a).unwrap();
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(&r));
                }
            }
        }

        #[test]
        fn kl_nonnegative(a in proptest::collection::vec(0.01f64..1.0, 5), b in proptest::collection::vec(0.01f64..1.0, 5)) {
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            let p: Vec<f64> = a.iter().map(|x| x / sa).collect();
            let q: Vec<f64> = b.iter().map(|x| x / sb).collect();
            prop_assert!(kl(&p, &q) >= 0.0);
        }
    }
}
