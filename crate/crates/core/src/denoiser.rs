//! Conditional token models `p(token | z)` and the progressive training loop.
//!
//! [`TabularDenoiser`] keeps one logit row per `(state key, position)` and is
//! trained with plain SGD on the weighted masked cross-entropy. Training states
//! come from teacher-forced progressive unmasking: a controller picks which
//! masked positions to reveal and the revealed tokens are copied from the clean
//! sample.

use crate::controllers::{reveal_budget, BucketSnapshot, Controller, ControllerError, PendingUpdate};
use crate::rng::SeededRng;
use crate::state::{bin_of, MaskedState, PhaseMode, StateError, Token, Vocab, MASK};
use crate::targets::{TableTarget, TerminalReward};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("state disagrees with its clean sequence at position {0}")]
    Inconsistent(usize),
    #[error("loss became non-finite at step {0}")]
    Diverged(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Anything that can score tokens at a masked position.
pub trait TokenModel: Sync {
    fn vocab(&self) -> Vocab;

    /// Normalized distribution over `[V]` at `position` given `z`.
    fn probs(&self, z: &MaskedState, position: usize) -> Vec<f64>;
}

/// `(psi, argmax token)`; ties go to the lowest token id.
pub fn confidence(model: &dyn TokenModel, z: &MaskedState, position: usize) -> (f64, Token) {
    argmax(&model.probs(z, position))
}

fn argmax(p: &[f64]) -> (f64, Token) {
    let mut best = (f64::NEG_INFINITY, 0 as Token);
    for (v, &x) in p.iter().enumerate() {
        if x > best.0 {
            best = (x, v as Token);
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// How a masked state is mapped to a parameter row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum Keying {
    /// The whole token array; exact for enumerable instances.
    #[default]
    FullState,
    /// Hash of the revealed pattern and a token window around the position.
    FeatureHash { buckets: u64, window: usize },
}


/// Row address `(state key, position)`.
pub type RowKey = (u64, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DenoiserFile", try_from = "DenoiserFile")]
pub struct TabularDenoiser {
    vocab: Vocab,
    keying: Keying,
    rows: BTreeMap<RowKey, Vec<f64>>,
}

/// Serialized form; JSON maps cannot be keyed by tuples.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DenoiserFile {
    vocab: usize,
    keying: Keying,
    rows: Vec<RowFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RowFile {
    key: u64,
    position: usize,
    logits: Vec<f64>,
}

impl From<TabularDenoiser> for DenoiserFile {
    fn from(d: TabularDenoiser) -> Self {
        DenoiserFile {
            vocab: d.vocab.size(),
            keying: d.keying,
            rows: d
                .rows
                .into_iter()
                .map(|((key, position), logits)| RowFile { key, position, logits })
                .collect(),
        }
    }
}

impl TryFrom<DenoiserFile> for TabularDenoiser {
    type Error = String;

    fn try_from(f: DenoiserFile) -> Result<Self, String> {
        let vocab = Vocab::new(f.vocab).map_err(|e| e.to_string())?;
        let mut rows = BTreeMap::new();
        for r in f.rows {
            if r.logits.len() != vocab.size() || r.logits.iter().any(|x| !x.is_finite()) {
                return Err(format!("bad logit row at key {} position {}", r.key, r.position));
            }
            rows.insert((r.key, r.position), r.logits);
        }
        Ok(TabularDenoiser {
            vocab,
            keying: f.keying,
            rows,
        })
    }
}

impl TabularDenoiser {
    /// All rows start at zero logits (uniform predictions).
    pub fn new(vocab: Vocab, keying: Keying) -> Self {
        Self {
            vocab,
            keying,
            rows: BTreeMap::new(),
        }
    }

    pub fn keying(&self) -> Keying {
        self.keying
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// True once a gradient or explicit write has touched the row.
    pub fn has_row(&self, key: RowKey) -> bool {
        self.rows.contains_key(&key)
    }

    pub fn row_key(&self, z: &MaskedState, position: usize) -> RowKey {
        match self.keying {
            Keying::FullState => (z.key(self.vocab), position),
            Keying::FeatureHash { buckets, window } => {
                let mut h = Fnv::new();
                for (i, &t) in z.tokens().iter().enumerate() {
                    h.write(if t == MASK { 1 } else { 0 });
                    if i + window >= position && i <= position + window {
                        h.write(t as u64);
                    }
                }
                h.write(position as u64);
                (h.finish() % buckets.max(1), position)
            }
        }
    }

    pub fn logits(&self, key: RowKey) -> Vec<f64> {
        self.rows
            .get(&key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.size()])
    }

    pub fn set_logits(&mut self, key: RowKey, logits: Vec<f64>) {
        assert_eq!(logits.len(), self.vocab.size());
        self.rows.insert(key, logits);
    }

    /// `theta <- theta - lr * grad`.
    pub fn apply_gradient(&mut self, grad: &Gradient, lr: f64) {
        let v = self.vocab.size();
        for (key, g) in &grad.rows {
            let row = self.rows.entry(*key).or_insert_with(|| vec![0.0; v]);
            for (x, dx) in row.iter_mut().zip(g) {
                *x -= lr * dx;
            }
        }
    }
}

impl TokenModel for TabularDenoiser {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn probs(&self, z: &MaskedState, position: usize) -> Vec<f64> {
        softmax(&self.logits(self.row_key(z, position)))
    }
}

/// Fixed pseudo-random logits derived from `(seed, state, position)`.
///
/// Used as a frozen host model whose confidences are measurable functions of
/// the visible state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrozenRandomDenoiser {
    vocab: Vocab,
    seed: u64,
    scale: f64,
}

impl FrozenRandomDenoiser {
    pub fn new(vocab: Vocab, seed: u64, scale: f64) -> Self {
        Self { vocab, seed, scale }
    }
}

impl TokenModel for FrozenRandomDenoiser {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn probs(&self, z: &MaskedState, position: usize) -> Vec<f64> {
        let mut h = Fnv::new();
        h.write(self.seed);
        h.write(z.key(self.vocab));
        h.write(position as u64);
        let mut rng = SeededRng::new(h.finish(), 0);
        let logits: Vec<f64> = (0..self.vocab.size())
            .map(|_| self.scale * (2.0 * rng.uniform() - 1.0))
            .collect();
        softmax(&logits)
    }
}

/// The exact posterior `p*(O_i | q, z)` of a table target as a token model.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorModel<'a> {
    pub target: &'a TableTarget,
    pub prompt: usize,
}

impl TokenModel for PosteriorModel<'_> {
    fn vocab(&self) -> Vocab {
        self.target.vocab()
    }

    fn probs(&self, z: &MaskedState, position: usize) -> Vec<f64> {
        self.target
            .posterior_token(self.prompt, z, position)
            .unwrap_or_else(|_| vec![1.0 / self.target.vocab().size() as f64; self.target.vocab().size()])
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, x: u64) {
        for b in x.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// One training example: a clean sequence (prompt included), a state
/// consistent with it, and a loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CeExample {
    pub clean: Vec<Token>,
    pub state: MaskedState,
    pub weight: f64,
}

/// Sparse gradient over logit rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub rows: BTreeMap<RowKey, Vec<f64>>,
}

/// `sum_n w_n sum_{i in M(z_n)} -log p(o_{n,i} | z_n)` and its exact gradient.
pub fn weighted_masked_ce(model: &TabularDenoiser, batch: &[CeExample]) -> Result<(f64, Gradient), DenoiserError> {
    let v = model.vocab.size();
    let mut loss = 0.0;
    let mut grad = Gradient::default();
    for ex in batch {
        if let Some(i) = ex
            .state
            .tokens()
            .iter()
            .zip(&ex.clean)
            .position(|(&z, &o)| z != MASK && z != o)
        {
            return Err(DenoiserError::Inconsistent(i));
        }
        if ex.clean.len() != ex.state.len() {
            return Err(DenoiserError::Inconsistent(ex.clean.len().min(ex.state.len())));
        }
        for i in ex.state.masked_positions() {
            let key = model.row_key(&ex.state, i);
            let p = softmax(&model.logits(key));
            let target = ex.clean[i] as usize;
            loss -= ex.weight * p[target].ln();
            let row = grad.rows.entry(key).or_insert_with(|| vec![0.0; v]);
            for (k, g) in row.iter_mut().enumerate() {
                let indicator = if k == target { 1.0 } else { 0.0 };
                *g += ex.weight * (p[k] - indicator);
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Progressive phases `K`.
    pub phases: usize,
    /// Steps between full refreshes of the slot buffer, `U`.
    pub reuse: usize,
    /// Extra reveals of positions whose confidence exceeds this threshold.
    #[serde(default)]
    pub collapse_tau: Option<f64>,
    /// Per-sample loss weight `w(x)`.
    #[serde(default = "one")]
    pub weight: f64,
    /// Bins for the selected-token histogram in telemetry.
    #[serde(default = "sixteen")]
    pub bins: usize,
    /// Record a bucket snapshot every this many steps (0 disables).
    #[serde(default)]
    pub snapshot_every: usize,
    /// Global step of the first step, for resumed runs.
    #[serde(default)]
    pub start_step: usize,
}

fn one() -> f64 {
    1.0
}

fn sixteen() -> usize {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            steps: 1000,
            batch_size: 16,
            phases: 8,
            reuse: 8,
            collapse_tau: None,
            weight: 1.0,
            bins: 16,
            snapshot_every: 0,
            start_step: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: &str| Err(DenoiserError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.phases == 0 || self.reuse == 0 || self.batch_size == 0 || self.bins == 0 {
            return bad("phases, reuse, batch size and bins must be at least 1");
        }
        if let Some(tau) = self.collapse_tau {
            if !(tau > 0.0 && tau <= 1.0) {
                return bad("collapse threshold must lie in (0, 1]");
            }
        }
        if !(self.weight >= 0.0) {
            return bad("loss weight must be nonnegative");
        }
        Ok(())
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub masked_positions: usize,
    /// Histogram of confidence bins of the positions revealed this step.
    pub selected_bins: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub steps: Vec<StepRecord>,
    /// Controller steps taken by each trajectory that reached the terminal state.
    pub trajectory_lengths: Vec<usize>,
    /// `(step, snapshot)` pairs for DPRM controllers.
    pub snapshots: Vec<(usize, BucketSnapshot)>,
}

impl Telemetry {
    /// Selected-bin histogram summed over steps `from..`.
    pub fn selected_bins_since(&self, from: usize) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for rec in self.steps.iter().filter(|r| r.step >= from) {
            if out.len() < rec.selected_bins.len() {
                out.resize(rec.selected_bins.len(), 0);
            }
            for (o, c) in out.iter_mut().zip(&rec.selected_bins) {
                *o += c;
            }
        }
        out
    }
}

struct Slot {
    clean: Vec<Token>,
    state: MaskedState,
    reward: f64,
    pending: PendingUpdate,
}

fn fresh_slot(target: &TableTarget, reward: &TerminalReward, rng: &mut SeededRng) -> Slot {
    let (q, o) = target.sample_clean(rng);
    let prompt = target.prompts()[q].tokens.clone();
    let mut clean = prompt.clone();
    clean.extend_from_slice(&o);
    Slot {
        clean,
        state: MaskedState::all_masked(&prompt, o.len()),
        reward: reward.eval(&o, target.vocab()),
        pending: PendingUpdate::default(),
    }
}

/// Teacher-forced progressive training at toy scale.
///
/// Keeps `batch_size` in-flight trajectories. Each step takes one SGD step on
/// the current states, then asks the controller for a reveal set per slot and
/// copies the clean tokens into it. Completed trajectories flush their pending
/// bucket updates with the terminal reward and restart from a fresh clean
/// draw; every `reuse` steps all slots restart and unfinished pending updates
/// are dropped.
pub fn train_progressive(
    target: &TableTarget,
    reward: &TerminalReward,
    controller: &mut Controller,
    init: TabularDenoiser,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(TabularDenoiser, Telemetry), DenoiserError> {
    config.validate()?;
    let mut model = init;
    let mut telemetry = Telemetry::default();
    let mut slots: Vec<Slot> = Vec::new();
    for local in 0..config.steps {
        let step = config.start_step + local;
        if local % config.reuse == 0 {
            slots = (0..config.batch_size)
                .map(|_| fresh_slot(target, reward, rng))
                .collect();
        }
        let batch: Vec<CeExample> = slots
            .iter()
            .map(|s| CeExample {
                clean: s.clean.clone(),
                state: s.state.clone(),
                weight: config.weight,
            })
            .collect();
        let (loss, grad) = weighted_masked_ce(&model, &batch)?;
        if !loss.is_finite() {
            return Err(DenoiserError::Diverged(step));
        }
        let masked: usize = slots.iter().map(|s| s.state.masked_count()).sum();
        let mut selected_bins = vec![0u64; config.bins];

        for slot in slots.iter_mut() {
            let budget = reveal_budget(&slot.state, config.phases, PhaseMode::Fraction)?;
            let decision = controller.select(&slot.state, &model, budget, step, PhaseMode::Fraction, rng, &mut slot.pending)?;
            let mut next = slot.state.clone();
            for &i in &decision.selected {
                let psi = confidence(&model, &slot.state, i).0;
                selected_bins[bin_of(psi, config.bins)] += 1;
                next.reveal_in_place(crate::state::RevealAction::new(i, slot.clean[i]))?;
            }
            if let Some(tau) = config.collapse_tau {
                for i in next.masked_positions() {
                    if confidence(&model, &slot.state, i).0 > tau {
                        next.reveal_in_place(crate::state::RevealAction::new(i, slot.clean[i]))?;
                    }
                }
            }
            slot.state = next.with_stage(slot.state.stage() + 1);
            if slot.state.is_terminal() {
                controller.flush(&mut slot.pending, slot.reward)?;
                telemetry.trajectory_lengths.push(slot.state.stage());
                *slot = fresh_slot(target, reward, rng);
            }
        }

        model.apply_gradient(&grad, config.learning_rate / config.batch_size as f64);
        telemetry.steps.push(StepRecord {
            step,
            loss,
            masked_positions: masked,
            selected_bins,
        });
        if config.snapshot_every > 0 && (step + 1).is_multiple_of(config.snapshot_every) {
            if let Some(table) = controller.table() {
                telemetry.snapshots.push((step + 1, table.to_snapshot()));
            }
        }
    }
    Ok((model, telemetry))
}
