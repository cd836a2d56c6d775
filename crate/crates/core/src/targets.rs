//! Exactly enumerable clean-sequence laws and terminal rewards.
//!
//! A [`TableTarget`] stores `nu*(q, o) = nu_Q(q) p*(o | q)` as one explicit
//! probability table per prompt, so every conditional the oracle needs can be
//! computed by summation. [`LatentCollapseTarget`] is the latent-variable
//! family in which the observation coordinate carries no information until
//! every latent coordinate is visible.

use crate::rng::SeededRng;
use crate::state::{
    response_from_index, response_index, MaskedState, StateError, Token, Vocab, ENUMERATION_CAP, MASK,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TABLE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("table for prompt {prompt} has {got} entries, expected {expected}")]
    TableSize { prompt: usize, got: usize, expected: usize },
    #[error("table for prompt {prompt} sums to {sum}, expected 1")]
    NotNormalized { prompt: usize, sum: f64 },
    #[error("negative or non-finite probability in table for prompt {prompt}")]
    BadEntry { prompt: usize },
    #[error("prompt weights must be nonnegative and sum to 1 (got {0})")]
    PromptWeights(f64),
    #[error("prompt {prompt} has length {got}, expected {expected}")]
    PromptLength { prompt: usize, got: usize, expected: usize },
    #[error("state space (V+1)^L = {0} exceeds the enumeration cap")]
    TooLarge(u64),
    #[error("no prompts supplied")]
    NoPrompts,
    #[error("unknown prompt index {0}")]
    UnknownPrompt(usize),
    #[error("no response with positive mass is consistent with the state")]
    InconsistentState,
    #[error("position {0} is not a masked response position")]
    NotMaskedResponse(usize),
    #[error("reward {value} at response index {index} is outside [0, 1]")]
    RewardRange { index: usize, value: f64 },
    #[error("reward reference/table has the wrong shape")]
    RewardShape,
    #[error("identifiability constant {0} is below 1e-6")]
    NotIdentifiable(f64),
    #[error("latent family needs d >= 1 and at least two parameters")]
    LatentShape,
    #[error(transparent)]
    State(#[from] StateError),
}

/// One prompt of a [`TableTarget`] with its weight and response table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub tokens: Vec<Token>,
    pub weight: f64,
    /// `p*(o | q)` indexed by the base-V code of `o`.
    pub table: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableTarget {
    vocab: Vocab,
    response_len: usize,
    prompt_len: usize,
    prompts: Vec<PromptEntry>,
}

impl TableTarget {
    pub fn new(vocab: Vocab, response_len: usize, prompts: Vec<PromptEntry>) -> Result<Self, TargetError> {
        if prompts.is_empty() {
            return Err(TargetError::NoPrompts);
        }
        check_enumerable(vocab, response_len)?;
        let expected = vocab.size().pow(response_len as u32);
        let prompt_len = prompts[0].tokens.len();
        let mut weight_sum = 0.0;
        for (q, entry) in prompts.iter().enumerate() {
            if entry.tokens.len() != prompt_len {
                return Err(TargetError::PromptLength {
                    prompt: q,
                    got: entry.tokens.len(),
                    expected: prompt_len,
                });
            }
            if let Some(&t) = entry.tokens.iter().find(|&&t| !vocab.contains(t)) {
                return Err(StateError::TokenOutOfVocab { token: t, vocab: vocab.size() }.into());
            }
            if entry.table.len() != expected {
                return Err(TargetError::TableSize {
                    prompt: q,
                    got: entry.table.len(),
                    expected,
                });
            }
            if entry.table.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(TargetError::BadEntry { prompt: q });
            }
            let sum: f64 = entry.table.iter().sum();
            if (sum - 1.0).abs() > TABLE_TOL {
                return Err(TargetError::NotNormalized { prompt: q, sum });
            }
            if !(entry.weight >= 0.0) {
                return Err(TargetError::PromptWeights(entry.weight));
            }
            weight_sum += entry.weight;
        }
        if (weight_sum - 1.0).abs() > TABLE_TOL {
            return Err(TargetError::PromptWeights(weight_sum));
        }
        Ok(Self {
            vocab,
            response_len,
            prompt_len,
            prompts,
        })
    }

    /// Single prompt whose response is always `response`.
    pub fn point_mass(vocab: Vocab, prompt: &[Token], response: &[Token]) -> Result<Self, TargetError> {
        let mut table = vec![0.0; vocab.size().pow(response.len() as u32)];
        table[response_index(response, vocab)] = 1.0;
        Self::new(
            vocab,
            response.len(),
            vec![PromptEntry {
                tokens: prompt.to_vec(),
                weight: 1.0,
                table,
            }],
        )
    }

    /// Single empty prompt, uniform over the listed responses.
    pub fn uniform_over(vocab: Vocab, responses: &[Vec<Token>]) -> Result<Self, TargetError> {
        let len = responses.first().map(|r| r.len()).unwrap_or(0);
        let mut table = vec![0.0; vocab.size().pow(len as u32)];
        for r in responses {
            table[response_index(r, vocab)] += 1.0 / responses.len() as f64;
        }
        Self::new(
            vocab,
            len,
            vec![PromptEntry {
                tokens: Vec::new(),
                weight: 1.0,
                table,
            }],
        )
    }

    /// Single empty prompt with explicit (unnormalized) weights over all responses.
    pub fn from_weights(vocab: Vocab, len: usize, weights: &[f64]) -> Result<Self, TargetError> {
        let total: f64 = weights.iter().sum();
        let table = normalized(weights.iter().map(|w| w / total).collect());
        Self::new(
            vocab,
            len,
            vec![PromptEntry {
                tokens: Vec::new(),
                weight: 1.0,
                table,
            }],
        )
    }

    /// Random target: each response gets positive mass with probability
    /// `support`, with exponential weights; prompts are random tokens.
    pub fn random(
        vocab: Vocab,
        response_len: usize,
        n_prompts: usize,
        prompt_len: usize,
        support: f64,
        rng: &mut SeededRng,
    ) -> Result<Self, TargetError> {
        let size = vocab.size().pow(response_len as u32);
        let mut prompts = Vec::with_capacity(n_prompts);
        let raw_weights: Vec<f64> = (0..n_prompts).map(|_| 0.5 + rng.uniform()).collect();
        let wsum: f64 = raw_weights.iter().sum();
        for w in raw_weights {
            let tokens = (0..prompt_len)
                .map(|_| rng.below(vocab.size()) as Token)
                .collect();
            let mut raw: Vec<f64> = (0..size)
                .map(|_| {
                    if rng.bernoulli(support) {
                        -(1.0 - rng.uniform()).ln()
                    } else {
                        0.0
                    }
                })
                .collect();
            if raw.iter().all(|&x| x == 0.0) {
                let k = rng.below(size);
                raw[k] = 1.0;
            }
            let total: f64 = raw.iter().sum();
            prompts.push(PromptEntry {
                tokens,
                weight: w / wsum,
                table: normalized(raw.into_iter().map(|x| x / total).collect()),
            });
        }
        let mut target = Self::new(vocab, response_len, prompts)?;
        target.renormalize_prompt_weights();
        Ok(target)
    }

    fn renormalize_prompt_weights(&mut self) {
        let total: f64 = self.prompts.iter().map(|p| p.weight).sum();
        for p in &mut self.prompts {
            p.weight /= total;
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompts(&self) -> &[PromptEntry] {
        &self.prompts
    }

    pub fn prompt(&self, q: usize) -> Result<&PromptEntry, TargetError> {
        self.prompts.get(q).ok_or(TargetError::UnknownPrompt(q))
    }

    /// All-mask response after prompt `q`.
    pub fn initial_state(&self, q: usize) -> Result<MaskedState, TargetError> {
        Ok(MaskedState::all_masked(&self.prompt(q)?.tokens, self.response_len))
    }

    /// `p*(o | q)`.
    pub fn prob(&self, q: usize, response: &[Token]) -> Result<f64, TargetError> {
        Ok(self.prompt(q)?.table[response_index(response, self.vocab)])
    }

    /// Iterate `(response, p*(response | q))` over the support.
    pub fn support(&self, q: usize) -> Result<Vec<(Vec<Token>, f64)>, TargetError> {
        let entry = self.prompt(q)?;
        Ok(entry
            .table
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(idx, &p)| (response_from_index(idx, self.response_len, self.vocab), p))
            .collect())
    }

    /// `p*(O_i = . | Q = q, Z = z)` for a masked response position `i`.
    ///
    /// Sums `p*(o | q)` over responses consistent with the revealed
    /// coordinates of `z`, then marginalizes coordinate `i`.
    pub fn posterior_token(&self, q: usize, z: &MaskedState, position: usize) -> Result<Vec<f64>, TargetError> {
        let entry = self.prompt(q)?;
        let offset = z.prompt_len();
        if position < offset || !z.is_masked(position) || z.response_len() != self.response_len {
            return Err(TargetError::NotMaskedResponse(position));
        }
        let local = position - offset;
        let visible = z.response();
        let mut out = vec![0.0; self.vocab.size()];
        for (idx, &p) in entry.table.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let o = response_from_index(idx, self.response_len, self.vocab);
            if visible.iter().zip(&o).all(|(&zv, &ov)| zv == MASK || zv == ov) {
                out[o[local] as usize] += p;
            }
        }
        let total: f64 = out.iter().sum();
        if !(total > 0.0) {
            return Err(TargetError::InconsistentState);
        }
        Ok(out.into_iter().map(|x| x / total).collect())
    }

    /// Draw `(q, o) ~ nu*`.
    pub fn sample_clean(&self, rng: &mut SeededRng) -> (usize, Vec<Token>) {
        let weights: Vec<f64> = self.prompts.iter().map(|p| p.weight).collect();
        let q = rng.categorical(&weights).unwrap_or(0);
        let idx = rng.categorical(&self.prompts[q].table).unwrap_or(0);
        (q, response_from_index(idx, self.response_len, self.vocab))
    }

    /// Marginal of coordinate `local` (response-relative) under `p*(. | q)`.
    pub fn marginal(&self, q: usize, local: usize) -> Result<Vec<f64>, TargetError> {
        let z = self.initial_state(q)?;
        self.posterior_token(q, &z, z.prompt_len() + local)
    }
}

fn normalized(mut table: Vec<f64>) -> Vec<f64> {
    // absorb the rounding residue into the largest entry
    let sum: f64 = table.iter().sum();
    if let Some((imax, _)) = table
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
    {
        table[imax] += 1.0 - sum;
    }
    table
}

fn check_enumerable(vocab: Vocab, len: usize) -> Result<(), TargetError> {
    let mut states: u64 = 1;
    for _ in 0..len {
        states = states.saturating_mul(vocab.size() as u64 + 1);
    }
    if states > ENUMERATION_CAP {
        return Err(TargetError::TooLarge(states));
    }
    Ok(())
}

/// Terminal reward `R(x)` with range in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TerminalReward {
    /// 1 if the response equals `reference`, else 0.
    ExactMatch { reference: Vec<Token> },
    /// Fraction of coordinates that agree with `reference`.
    Hamming { reference: Vec<Token> },
    /// Explicit value per response, indexed by base-V code.
    Table { values: Vec<f64> },
    /// The same value for every response.
    Constant { value: f64 },
}

impl TerminalReward {
    /// Reward of a completed response (prompt excluded). Tokens are assumed
    /// to be in vocabulary.
    pub fn eval(&self, response: &[Token], vocab: Vocab) -> f64 {
        match self {
            TerminalReward::ExactMatch { reference } => {
                if reference.as_slice() == response {
                    1.0
                } else {
                    0.0
                }
            }
            TerminalReward::Hamming { reference } => {
                if reference.is_empty() {
                    return 1.0;
                }
                let hits = reference.iter().zip(response).filter(|(a, b)| a == b).count();
                hits as f64 / reference.len() as f64
            }
            TerminalReward::Table { values } => values[response_index(response, vocab)],
            TerminalReward::Constant { value } => *value,
        }
    }

    /// Exhaustive range check over all `V^L` responses.
    pub fn validate(&self, vocab: Vocab, len: usize) -> Result<(), TargetError> {
        check_enumerable(vocab, len)?;
        match self {
            TerminalReward::ExactMatch { reference } | TerminalReward::Hamming { reference } => {
                if reference.len() != len || reference.iter().any(|&t| !vocab.contains(t)) {
                    return Err(TargetError::RewardShape);
                }
            }
            TerminalReward::Table { values } => {
                if values.len() != vocab.size().pow(len as u32) {
                    return Err(TargetError::RewardShape);
                }
            }
            TerminalReward::Constant { .. } => {}
        }
        let size = vocab.size().pow(len as u32);
        for index in 0..size {
            let value = self.eval(&response_from_index(index, len, vocab), vocab);
            if !(0.0..=1.0).contains(&value) {
                return Err(TargetError::RewardRange { index, value });
            }
        }
        Ok(())
    }
}

/// Latent-variable family with posterior collapse.
///
/// Latents `U_1..U_d` are i.i.d. uniform on `[V]` and the observation is
/// `Y = (U_1 + ... + U_d + E) mod V` with noise `E ~ noise[theta]`. Any
/// strict subset of latents leaves `Y` uniform, so only states with all
/// latents revealed carry information about `theta`. Latents occupy response
/// positions `0..d` and `Y` sits at position `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCollapseTarget {
    vocab: Vocab,
    latent_dim: usize,
    noise: Vec<Vec<f64>>,
    kappa: f64,
}

impl LatentCollapseTarget {
    pub fn new(vocab: Vocab, latent_dim: usize, noise: Vec<Vec<f64>>) -> Result<Self, TargetError> {
        if latent_dim == 0 || noise.len() < 2 {
            return Err(TargetError::LatentShape);
        }
        for (k, e) in noise.iter().enumerate() {
            if e.len() != vocab.size() {
                return Err(TargetError::TableSize {
                    prompt: k,
                    got: e.len(),
                    expected: vocab.size(),
                });
            }
            let s: f64 = e.iter().sum();
            if e.iter().any(|&p| !(p >= 0.0)) {
                return Err(TargetError::BadEntry { prompt: k });
            }
            if (s - 1.0).abs() > TABLE_TOL {
                return Err(TargetError::NotNormalized { prompt: k, sum: s });
            }
        }
        let mut target = Self {
            vocab,
            latent_dim,
            noise,
            kappa: 0.0,
        };
        let mut kappa = f64::INFINITY;
        let tables: Vec<Vec<f64>> = (0..target.noise.len()).map(|t| target.joint_table(t)).collect();
        for a in 0..tables.len() {
            for b in (a + 1)..tables.len() {
                kappa = kappa.min(chernoff_information(&tables[a], &tables[b]));
            }
        }
        if !(kappa >= 1e-6) {
            return Err(TargetError::NotIdentifiable(kappa));
        }
        target.kappa = kappa;
        Ok(target)
    }

    /// Binary family with flip noise `(1-eps, eps)` against `(eps, 1-eps)`.
    pub fn binary(latent_dim: usize, eps: f64) -> Result<Self, TargetError> {
        let vocab = Vocab::new(2)?;
        Self::new(vocab, latent_dim, vec![vec![1.0 - eps, eps], vec![eps, 1.0 - eps]])
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn response_len(&self) -> usize {
        self.latent_dim + 1
    }

    pub fn n_params(&self) -> usize {
        self.noise.len()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Baseline law of `Y` when some latent is hidden.
    pub fn baseline(&self) -> Vec<f64> {
        vec![1.0 / self.vocab.size() as f64; self.vocab.size()]
    }

    /// `P_theta(u, y)` over the full response, indexed by base-V code.
    pub fn joint_table(&self, theta: usize) -> Vec<f64> {
        let v = self.vocab.size();
        let len = self.response_len();
        let size = v.pow(len as u32);
        let scale = (v as f64).powi(-(self.latent_dim as i32));
        (0..size)
            .map(|idx| {
                let o = response_from_index(idx, len, self.vocab);
                let (u, y) = o.split_at(self.latent_dim);
                scale * self.noise[theta][self.residual(u, y[0])]
            })
            .collect()
    }

    fn residual(&self, latents: &[Token], y: Token) -> usize {
        let v = self.vocab.size();
        let sum: usize = latents.iter().map(|&t| t as usize).sum();
        (y as usize + v * (sum / v + 1) - sum % v) % v
    }

    /// `log P_theta(Y = y | U = u)`.
    pub fn log_likelihood(&self, theta: usize, latents: &[Token], y: Token) -> f64 {
        self.noise[theta][self.residual(latents, y)].ln()
    }

    pub fn as_table_target(&self, theta: usize) -> Result<TableTarget, TargetError> {
        TableTarget::new(
            self.vocab,
            self.response_len(),
            vec![PromptEntry {
                tokens: Vec::new(),
                weight: 1.0,
                table: self.joint_table(theta),
            }],
        )
    }

    pub fn sample(&self, theta: usize, rng: &mut SeededRng) -> Vec<Token> {
        let v = self.vocab.size();
        let mut out: Vec<Token> = (0..self.latent_dim).map(|_| rng.below(v) as Token).collect();
        let sum: usize = out.iter().map(|&t| t as usize).sum();
        let e = rng.categorical(&self.noise[theta]).unwrap_or(0);
        out.push(((sum + e) % v) as Token);
        out
    }

    /// Law of `Y` given the latents in `subset` take the values `assignment`,
    /// by enumeration of the joint table.
    pub fn y_law_given(&self, theta: usize, subset: &[usize], assignment: &[Token]) -> Vec<f64> {
        let v = self.vocab.size();
        let len = self.response_len();
        let joint = self.joint_table(theta);
        let mut law = vec![0.0; v];
        for (idx, &p) in joint.iter().enumerate() {
            let o = response_from_index(idx, len, self.vocab);
            if subset.iter().zip(assignment).all(|(&i, &a)| o[i] == a) {
                law[o[self.latent_dim] as usize] += p;
            }
        }
        let total: f64 = law.iter().sum();
        law.into_iter().map(|x| x / total).collect()
    }

    /// Largest total-variation gap between `law(Y | U_S)` and the baseline
    /// over every parameter, every strict subset `S` and every assignment.
    pub fn collapse_violation(&self) -> f64 {
        let d = self.latent_dim;
        let v = self.vocab.size();
        let base = self.baseline();
        let mut worst: f64 = 0.0;
        for theta in 0..self.n_params() {
            for mask in 0u32..((1u32 << d) - 1) {
                let subset: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
                let combos = v.pow(subset.len() as u32);
                for c in 0..combos {
                    let assignment = response_from_index(c, subset.len(), self.vocab);
                    let law = self.y_law_given(theta, &subset, &assignment);
                    worst = worst.max(total_variation(&law, &base));
                }
            }
        }
        worst
    }
}

/// `q (1 - q)^d`: probability that random masking hides `Y` but shows all `d` latents.
pub fn informative_event_probability(latent_dim: usize, mask_prob: f64) -> f64 {
    mask_prob * (1.0 - mask_prob).powi(latent_dim as i32)
}

/// Chernoff information `C(P, Q) = -min_s log sum_z P(z)^(1-s) Q(z)^s`.
///
/// Returns `f64::INFINITY` for disjoint supports.
pub fn chernoff_information(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions over different supports");
    let pairs: Vec<(f64, f64)> = p
        .iter()
        .zip(q)
        .filter(|(&a, &b)| a > 0.0 && b > 0.0)
        .map(|(&a, &b)| (a.ln(), b.ln()))
        .collect();
    if pairs.is_empty() {
        return f64::INFINITY;
    }
    let f = |s: f64| -> f64 {
        let terms: Vec<f64> = pairs.iter().map(|&(lp, lq)| (1.0 - s) * lp + s * lq).collect();
        log_sum_exp(&terms)
    };
    // f is convex on [0, 1]; golden-section search
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if b - a < 1e-14 {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let best = f(0.5 * (a + b)).min(fc).min(fd).min(f(0.0)).min(f(1.0));
    (-best).max(0.0)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(n: usize) -> Vocab {
        Vocab::new(n).unwrap()
    }

    #[test]
    fn posterior_on_empty_state_is_marginal() {
        let mut rng = SeededRng::new(3, 0);
        let t = TableTarget::random(v(3), 3, 1, 0, 0.7, &mut rng).unwrap();
        let z = t.initial_state(0).unwrap();
        for i in 0..3 {
            let post = t.posterior_token(0, &z, i).unwrap();
            let mut marg = vec![0.0; 3];
            for (o, p) in t.support(0).unwrap() {
                marg[o[i] as usize] += p;
            }
            for (a, b) in post.iter().zip(&marg) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_of_point_mass() {
        let t = TableTarget::point_mass(v(3), &[], &[2, 0, 1]).unwrap();
        let z = MaskedState::from_tokens(vec![2, MASK, MASK], 0, 1).unwrap();
        assert_eq!(t.posterior_token(0, &z, 2).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn posterior_two_mode() {
        let t = TableTarget::uniform_over(v(2), &[vec![0, 0], vec![1, 1]]).unwrap();
        let z = MaskedState::from_tokens(vec![0, MASK], 0, 1).unwrap();
        assert_eq!(t.posterior_token(0, &z, 1).unwrap(), vec![1.0, 0.0]);
        let bad = MaskedState::from_tokens(vec![MASK, MASK], 0, 0).unwrap();
        assert!(t.posterior_token(0, &bad.apply_action(crate::state::RevealAction::new(0, 0)).unwrap(), 0).is_err());
    }

    #[test]
    fn inconsistent_state_errors() {
        let t = TableTarget::point_mass(v(2), &[], &[0, 0]).unwrap();
        let z = MaskedState::from_tokens(vec![1, MASK], 0, 1).unwrap();
        assert_eq!(t.posterior_token(0, &z, 1), Err(TargetError::InconsistentState));
    }

    #[test]
    fn table_validation() {
        let vocab = v(2);
        let bad = PromptEntry {
            tokens: vec![],
            weight: 1.0,
            table: vec![0.5, 0.4, 0.0, 0.0],
        };
        assert!(matches!(
            TableTarget::new(vocab, 2, vec![bad]),
            Err(TargetError::NotNormalized { .. })
        ));
        assert!(matches!(
            TableTarget::point_mass(v(4), &[], &[0; 9]),
            Err(TargetError::TooLarge(_))
        ));
    }

    #[test]
    fn sampling_frequencies() {
        let t = TableTarget::uniform_over(v(2), &[vec![0, 1], vec![1, 0]]).unwrap();
        let mut rng = SeededRng::new(11, 0);
        let n = 100_000;
        let hits = (0..n).filter(|_| t.sample_clean(&mut rng).1 == vec![0, 1]).count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.01, "{f}");
        let pm = TableTarget::point_mass(v(3), &[1], &[2, 2]).unwrap();
        for _ in 0..10 {
            assert_eq!(pm.sample_clean(&mut rng), (0, vec![2, 2]));
        }
    }

    #[test]
    fn informative_probability_values() {
        assert!((informative_event_probability(1, 0.5) - 0.25).abs() < 1e-15);
        assert!((informative_event_probability(8, 0.5) - 1.0 / 512.0).abs() < 1e-15);
        assert!(informative_event_probability(3, 1.0 - 1e-9) < 1e-20);
    }

    fn grid_chernoff(p: &[f64], q: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for k in 1..10_000 {
            let s = k as f64 * 1e-4;
            let val: f64 = p
                .iter()
                .zip(q)
                .map(|(a, b)| a.powf(1.0 - s) * b.powf(s))
                .sum::<f64>()
                .ln();
            best = best.min(val);
        }
        -best
    }

    #[test]
    fn chernoff_matches_grid() {
        let p = [0.9, 0.1];
        let q = [0.1, 0.9];
        let c = chernoff_information(&p, &q);
        assert!((c - grid_chernoff(&p, &q)).abs() < 1e-6);
        assert_eq!(chernoff_information(&p, &p), 0.0);
        assert_eq!(chernoff_information(&[1.0, 0.0], &[0.0, 1.0]), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn chernoff_symmetric(a in proptest::collection::vec(0.01f64..1.0, 4), b in proptest::collection::vec(0.01f64..1.0, 4)) {
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            let p: Vec<f64> = a.iter().map(|x| x / sa).collect();
            let q: Vec<f64> = b.iter().map(|x| x / sb).collect();
            let c1 = chernoff_information(&p, &q);
            let c2 = chernoff_information(&q, &p);
            prop_assert!((c1 - c2).abs() < 1e-10);
            prop_assert!((c1 - grid_chernoff(&p, &q)).abs() < 1e-6);
        }
    }

    #[test]
    fn latent_family_collapses_and_is_identifiable() {
        let t = LatentCollapseTarget::binary(4, 0.2).unwrap();
        assert!(t.collapse_violation() < 1e-12);
        // shared uniform latent factor cancels, leaving the noise laws
        let direct = chernoff_information(&[0.8, 0.2], &[0.2, 0.8]);
        assert!((t.kappa() - direct).abs() < 1e-9);
        let t3 = LatentCollapseTarget::new(v(3), 2, vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.3, 0.6]]).unwrap();
        assert!(t3.collapse_violation() < 1e-12);
        assert!(LatentCollapseTarget::binary(2, 0.5).is_err());
    }

    #[test]
    fn latent_y_given_all_latents_is_noise_law() {
        let t = LatentCollapseTarget::binary(3, 0.2).unwrap();
        // with every latent visible the law of Y is the noise shifted by the sum
        let law = t.y_law_given(0, &[0, 1, 2], &[1, 1, 0]);
        assert!((law[0] - 0.8).abs() < 1e-12 && (law[1] - 0.2).abs() < 1e-12);
        let law1 = t.y_law_given(1, &[0, 1, 2], &[1, 0, 0]);
        assert!((law1[1] - 0.2).abs() < 1e-12);
        // Y marginal equals the noise composed with a uniform latent sum
        let marg = t.y_law_given(0, &[], &[]);
        assert!((marg[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn latent_sampling_matches_table() {
        let t = LatentCollapseTarget::binary(2, 0.25).unwrap();
        let table = t.joint_table(1);
        let mut rng = SeededRng::new(5, 0);
        let mut counts = vec![0usize; table.len()];
        let n = 200_000;
        for _ in 0..n {
            counts[response_index(&t.sample(1, &mut rng), t.vocab())] += 1;
        }
        for (c, p) in counts.iter().zip(&table) {
            let f = *c as f64 / n as f64;
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() < 4.0 * sd + 1e-9);
        }
    }

    #[test]
    fn rewards_validate() {
        let vocab = v(2);
        assert!(TerminalReward::Hamming { reference: vec![0, 1, 1] }.validate(vocab, 3).is_ok());
        assert!(TerminalReward::Table { values: vec![0.0, 1.5, 0.2, 0.3] }
            .validate(vocab, 2)
            .is_err());
        let r = TerminalReward::Hamming { reference: vec![0, 1] };
        assert_eq!(r.eval(&[0, 0], vocab), 0.5);
        assert_eq!(TerminalReward::ExactMatch { reference: vec![0, 1] }.eval(&[0, 1], vocab), 1.0);
    }
}
