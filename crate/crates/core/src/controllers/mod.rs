//! Token-ordering policies.
//!
//! A controller looks at a masked state and a host model and returns the set
//! of positions to reveal this step. [`Controller::Random`] and
//! [`Controller::Confidence`] are the usual baselines; [`Controller::Dprm`] is
//! the online bucketized controller with its gate schedule and statistics;
//! [`Controller::Exact`] ranks with externally supplied exact process rewards.

mod buckets;
mod dprm;
mod gate;

pub use buckets::{
    bucket_estimate, BucketEstimate, BucketSnapshot, BucketTable, Cell, CellSnapshot, PendingUpdate, QUANTUM_BITS,
};
pub use dprm::{decode_aligned, dprm_decide, DecodeConfig, DecodeOutput, DprmParams};
pub use gate::{GateClock, GateParams, GateSchedule};

use crate::denoiser::{confidence, TokenModel};
use crate::rng::SeededRng;
use crate::state::{bin_of, clamp_psi, phase_of, MaskedState, PhaseBin, PhaseMode, StateError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("no masked positions to choose from")]
    EmptyCandidates,
    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),
    #[error("cell {0:?} outside the table")]
    CellOutOfRange(PhaseBin),
    #[error("bucket tables have different shapes, beta or gate")]
    Incompatible,
    #[error("bucket sum overflow")]
    Overflow,
    #[error("invalid controller config: {0}")]
    Config(String),
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
    #[error("{remaining} masks remain after a horizon of {horizon} steps")]
    HorizonTooShort { horizon: usize, remaining: usize },
    #[error(transparent)]
    State(#[from] StateError),
}

/// How shortlist candidates are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    Random,
    #[default]
    Confidence,
}

/// `q0(. | s)` over masked positions, as `(position, weight)` pairs.
pub fn base_proposal(
    mode: ProposalMode,
    s: &MaskedState,
    model: &dyn TokenModel,
) -> Result<Vec<(usize, f64)>, ControllerError> {
    let masked = s.masked_positions();
    if masked.is_empty() {
        return Err(ControllerError::EmptyCandidates);
    }
    let raw: Vec<f64> = match mode {
        ProposalMode::Random => vec![1.0; masked.len()],
        ProposalMode::Confidence => masked
            .iter()
            .map(|&i| clamp_psi(confidence(model, s, i).0))
            .collect(),
    };
    let total: f64 = raw.iter().sum();
    Ok(masked.into_iter().zip(raw.into_iter().map(|w| w / total)).collect())
}

/// `m = ceil(|M(z)| / (K - phase))`.
pub fn reveal_budget(s: &MaskedState, phases: usize, mode: PhaseMode) -> Result<usize, ControllerError> {
    let masked = s.masked_count();
    if masked == 0 {
        return Err(ControllerError::EmptyCandidates);
    }
    let phases = phases.max(1);
    let remaining = phases - phase_of(s, phases, mode);
    Ok(masked.div_ceil(remaining))
}

/// Shortlist size `N_t` as a function of the budget `m_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShortlistRule {
    Fixed { n: usize },
    /// `min(max, max(min, 4 m))`.
    Adaptive { min: usize, max: usize },
}

impl Default for ShortlistRule {
    fn default() -> Self {
        ShortlistRule::Adaptive { min: 8, max: 64 }
    }
}

impl ShortlistRule {
    pub fn size(&self, budget: usize) -> usize {
        match *self {
            ShortlistRule::Fixed { n } => n.max(1),
            ShortlistRule::Adaptive { min, max } => (4 * budget).max(min).min(max).max(1),
        }
    }
}

/// Scoring record of one shortlisted position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub position: usize,
    pub token: crate::state::Token,
    pub psi: f64,
    pub bin: usize,
    pub eta: f64,
    pub r_hat: f64,
    /// `log psi`.
    pub u: f64,
    /// `log psi + beta R_hat`.
    pub g: f64,
    /// `(1 - eta) u + eta g`.
    pub score: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerDecision {
    pub stage: usize,
    pub phase: usize,
    pub budget: usize,
    /// Selected positions in rank order.
    pub selected: Vec<usize>,
    /// One record per distinct shortlisted position, in rank order.
    pub records: Vec<CandidateRecord>,
    /// Raw shortlist draws (with repetition).
    pub shortlist: Vec<usize>,
}

/// Settings of the online DPRM controller.
#[derive(Debug, Clone, PartialEq)]
pub struct DprmController {
    pub params: DprmParams,
    pub table: BucketTable,
    pub schedule: GateSchedule,
}

/// Exact per-state scores used by [`Controller::Exact`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExactScores {
    /// State key to `(position, R*)` pairs.
    pub rewards: HashMap<u64, Vec<(usize, f64)>>,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExactMode {
    /// Top-m by `log psi + beta R*`.
    TopM,
    /// Shortlist of `n` draws from the base proposal, then selection with
    /// probability proportional to `exp(beta R*)`.
    SoftBon { n: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    Random,
    Confidence,
    Dprm(Box<DprmController>),
    Exact {
        scores: ExactScores,
        mode: ExactMode,
        proposal: ProposalMode,
    },
}

impl Controller {
    pub fn dprm(params: DprmParams, table: BucketTable, schedule: GateSchedule) -> Self {
        Controller::Dprm(Box::new(DprmController {
            params,
            table,
            schedule,
        }))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Controller::Random => "random",
            Controller::Confidence => "confidence",
            Controller::Dprm(_) => "dprm",
            Controller::Exact { .. } => "exact",
        }
    }

    pub fn table(&self) -> Option<&BucketTable> {
        match self {
            Controller::Dprm(d) => Some(&d.table),
            _ => None,
        }
    }

    /// Choose the reveal set for one step.
    ///
    /// `global_step` feeds the gate under [`GateClock::Global`]; the decode
    /// clock uses the state's stage. Cells of the positions that should be
    /// credited at trajectory end are appended to `pending`.
    #[allow(clippy::too_many_arguments)]
    pub fn select(
        &mut self,
        s: &MaskedState,
        model: &dyn TokenModel,
        budget: usize,
        global_step: usize,
        phase_mode: PhaseMode,
        rng: &mut SeededRng,
        pending: &mut PendingUpdate,
    ) -> Result<ControllerDecision, ControllerError> {
        let masked = s.masked_positions();
        if masked.is_empty() {
            return Err(ControllerError::EmptyCandidates);
        }
        let budget = budget.max(1);
        match self {
            Controller::Random => {
                let mut pool = masked.clone();
                let take = budget.min(pool.len());
                for k in 0..take {
                    let j = k + rng.below(pool.len() - k);
                    pool.swap(k, j);
                }
                pool.truncate(take);
                Ok(plain_decision(s, model, budget, pool, masked))
            }
            Controller::Confidence => {
                let mut scored: Vec<(usize, f64)> =
                    masked.iter().map(|&i| (i, clamp_psi(confidence(model, s, i).0))).collect();
                scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let chosen = scored.iter().take(budget).map(|x| x.0).collect();
                Ok(plain_decision(s, model, budget, chosen, masked))
            }
            Controller::Dprm(d) => {
                let t = match d.schedule.clock {
                    GateClock::Global => global_step as u64,
                    GateClock::Decode | GateClock::ForceFull => s.stage() as u64,
                };
                let n_t = d.params.shortlist.size(budget);
                let decision = dprm_decide(
                    s,
                    model,
                    &d.table,
                    &d.schedule,
                    t,
                    budget,
                    n_t,
                    d.params.proposal,
                    phase_mode,
                    rng,
                )?;
                for rec in &decision.records {
                    if rec.selected || d.params.off_policy {
                        pending.push(PhaseBin {
                            phase: decision.phase,
                            bin: rec.bin,
                        });
                    }
                }
                Ok(decision)
            }
            Controller::Exact {
                scores,
                mode,
                proposal,
            } => exact_select(s, model, budget, scores, *mode, *proposal, rng),
        }
    }

    /// Trajectory finished with terminal reward `reward`.
    pub fn flush(&mut self, pending: &mut PendingUpdate, reward: f64) -> Result<(), ControllerError> {
        match self {
            Controller::Dprm(d) => d.table.flush_terminal(pending, reward),
            _ => {
                if !(0.0..=1.0).contains(&reward) {
                    return Err(ControllerError::RewardOutOfRange(reward));
                }
                pending.clear();
                Ok(())
            }
        }
    }
}

fn record_for(s: &MaskedState, model: &dyn TokenModel, i: usize, bins: usize) -> CandidateRecord {
    let (psi, token) = confidence(model, s, i);
    let psi = clamp_psi(psi);
    let u = psi.ln();
    CandidateRecord {
        position: i,
        token,
        psi,
        bin: bin_of(psi, bins),
        eta: 0.0,
        r_hat: 0.0,
        u,
        g: u,
        score: u,
        selected: false,
    }
}

fn plain_decision(
    s: &MaskedState,
    model: &dyn TokenModel,
    budget: usize,
    selected: Vec<usize>,
    candidates: Vec<usize>,
) -> ControllerDecision {
    let mut records: Vec<CandidateRecord> = candidates.iter().map(|&i| record_for(s, model, i, 1)).collect();
    for r in &mut records {
        r.selected = selected.contains(&r.position);
    }
    ControllerDecision {
        stage: s.stage(),
        phase: 0,
        budget,
        selected,
        records,
        shortlist: candidates,
    }
}

fn exact_select(
    s: &MaskedState,
    model: &dyn TokenModel,
    budget: usize,
    scores: &ExactScores,
    mode: ExactMode,
    proposal: ProposalMode,
    rng: &mut SeededRng,
) -> Result<ControllerDecision, ControllerError> {
    let vocab = model.vocab();
    let rewards = scores
        .rewards
        .get(&s.key(vocab))
        .ok_or_else(|| ControllerError::Config(format!("no exact scores for state {s}")))?;
    let rstar = |i: usize| rewards.iter().find(|(p, _)| *p == i).map(|x| x.1).unwrap_or(0.0);
    let masked = s.masked_positions();
    let mut records: Vec<CandidateRecord> = masked.iter().map(|&i| record_for(s, model, i, 1)).collect();
    for r in &mut records {
        r.r_hat = rstar(r.position);
        r.eta = 1.0;
        r.g = r.u + scores.beta * r.r_hat;
        r.score = r.g;
    }
    let (selected, shortlist) = match mode {
        ExactMode::TopM => {
            records.sort_by(rank_cmp);
            let sel: Vec<usize> = records.iter().take(budget).map(|r| r.position).collect();
            (sel, masked.clone())
        }
        ExactMode::SoftBon { n } => {
            let q0 = base_proposal(proposal, s, model)?;
            let weights: Vec<f64> = q0.iter().map(|x| x.1).collect();
            let draws: Vec<usize> = (0..n.max(1))
                .map(|_| q0[rng.categorical(&weights).unwrap_or(0)].0)
                .collect();
            let mut pool = draws.clone();
            let mut sel = Vec::new();
            while sel.len() < budget && !pool.is_empty() {
                let w: Vec<f64> = pool.iter().map(|&i| (scores.beta * rstar(i)).exp()).collect();
                let k = rng.categorical(&w).unwrap_or(0);
                let chosen = pool[k];
                sel.push(chosen);
                pool.retain(|&i| i != chosen);
            }
            (sel, draws)
        }
    };
    for r in &mut records {
        r.selected = selected.contains(&r.position);
    }
    Ok(ControllerDecision {
        stage: s.stage(),
        phase: 0,
        budget,
        selected,
        records,
        shortlist,
    })
}

/// Descending score, then higher psi, then lower position.
pub(crate) fn rank_cmp(a: &CandidateRecord, b: &CandidateRecord) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.psi.total_cmp(&a.psi))
        .then(a.position.cmp(&b.position))
}
