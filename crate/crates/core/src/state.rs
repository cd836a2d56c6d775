//! Value types for masked sequences, reveal actions, phases and confidence bins.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// A token id in `[0, V)`, or [`MASK`].
pub type Token = u16;

/// The mask sentinel. Never a member of `[V]`.
pub const MASK: Token = Token::MAX;

/// Lower clamp applied to proposal scores before taking logs or binning.
pub const PSI_MIN: f64 = 1e-12;

/// Largest enumerable state space, `(V+1)^L`.
pub const ENUMERATION_CAP: u64 = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("position {position} is not masked")]
    PositionNotMasked { position: usize },
    #[error("position {position} out of range for length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: Token, vocab: usize },
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("prompt position {0} cannot be masked")]
    MaskedPrompt(usize),
}

/// Vocabulary `[V]` plus the mask symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self, StateError> {
        if size < 2 || size >= MASK as usize {
            return Err(StateError::VocabTooSmall(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, token: Token) -> bool {
        (token as usize) < self.size
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        0..self.size as Token
    }
}

/// Replace one masked coordinate with a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RevealAction {
    pub position: usize,
    pub token: Token,
}

impl RevealAction {
    pub fn new(position: usize, token: Token) -> Self {
        Self { position, token }
    }
}

/// A partially revealed sequence `z` with its stage counter.
///
/// The first `prompt_len` coordinates form a fixed, always-revealed prompt.
/// `stage` counts controller decision steps since the all-mask response, so a
/// step that reveals several positions advances it by one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskedState {
    tokens: Vec<Token>,
    stage: usize,
    prompt_len: usize,
}

impl MaskedState {
    /// Prompt followed by `response_len` masks, at stage 0.
    pub fn all_masked(prompt: &[Token], response_len: usize) -> Self {
        let mut tokens = prompt.to_vec();
        tokens.extend(std::iter::repeat_n(MASK, response_len));
        Self {
            tokens,
            stage: 0,
            prompt_len: prompt.len(),
        }
    }

    /// Build a state from raw tokens. Prompt positions must be revealed.
    pub fn from_tokens(tokens: Vec<Token>, prompt_len: usize, stage: usize) -> Result<Self, StateError> {
        if let Some(i) = tokens[..prompt_len.min(tokens.len())]
            .iter()
            .position(|&t| t == MASK)
        {
            return Err(StateError::MaskedPrompt(i));
        }
        Ok(Self {
            tokens,
            stage,
            prompt_len,
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt(&self) -> &[Token] {
        &self.tokens[..self.prompt_len]
    }

    pub fn response(&self) -> &[Token] {
        &self.tokens[self.prompt_len..]
    }

    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.tokens.get(position) == Some(&MASK)
    }

    /// `M(z)`, in increasing order.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == MASK)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == MASK).count()
    }

    pub fn revealed_response_count(&self) -> usize {
        self.response_len() - self.masked_count()
    }

    pub fn is_terminal(&self) -> bool {
        self.masked_count() == 0
    }

    /// Fraction of non-prompt positions already revealed.
    pub fn revealed_fraction(&self) -> f64 {
        let n = self.response_len();
        if n == 0 {
            return 1.0;
        }
        self.revealed_response_count() as f64 / n as f64
    }

    /// `s^a`: reveal one position and advance the stage by one.
    pub fn apply_action(&self, action: RevealAction) -> Result<Self, StateError> {
        self.apply_step(std::slice::from_ref(&action))
    }

    /// Reveal every action of one controller step; the stage advances once.
    pub fn apply_step(&self, actions: &[RevealAction]) -> Result<Self, StateError> {
        let mut next = self.clone();
        for a in actions {
            next.reveal_in_place(*a)?;
        }
        next.stage += 1;
        Ok(next)
    }

    /// Reveal without touching the stage counter.
    pub fn reveal_in_place(&mut self, action: RevealAction) -> Result<(), StateError> {
        let len = self.tokens.len();
        match self.tokens.get_mut(action.position) {
            None => Err(StateError::PositionOutOfRange {
                position: action.position,
                len,
            }),
            Some(slot) if *slot != MASK => Err(StateError::PositionNotMasked {
                position: action.position,
            }),
            Some(_) if action.token == MASK => Err(StateError::TokenOutOfVocab {
                token: action.token,
                vocab: MASK as usize,
            }),
            Some(slot) => {
                *slot = action.token;
                Ok(())
            }
        }
    }

    pub fn with_stage(mut self, stage: usize) -> Self {
        self.stage = stage;
        self
    }

    /// True if every revealed coordinate agrees with `full` (prompt included).
    pub fn consistent_with(&self, full: &[Token]) -> bool {
        full.len() == self.tokens.len()
            && self
                .tokens
                .iter()
                .zip(full)
                .all(|(&z, &o)| z == MASK || z == o)
    }

    /// Injective code of the token array in base `V+1`.
    ///
    /// The stage is not part of the key; under unit budgets it is implied by
    /// the number of masks.
    pub fn key(&self, vocab: Vocab) -> u64 {
        encode_tokens(&self.tokens, vocab)
    }
}

impl fmt::Display for MaskedState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &t) in self.tokens.iter().enumerate() {
            if i == self.prompt_len && self.prompt_len > 0 {
                f.write_str("|")?;
            }
            if t == MASK {
                f.write_str("_")?;
            } else {
                write!(f, "{t}")?;
            }
        }
        Ok(())
    }
}

/// Base-`(V+1)` code with the mask as digit `V`.
pub fn encode_tokens(tokens: &[Token], vocab: Vocab) -> u64 {
    let base = vocab.size() as u64 + 1;
    tokens.iter().fold(0u64, |acc, &t| {
        let digit = if t == MASK { vocab.size() as u64 } else { t as u64 };
        acc * base + digit
    })
}

/// Base-`V` index of a clean response, as used by probability tables.
pub fn response_index(response: &[Token], vocab: Vocab) -> usize {
    let base = vocab.size();
    response.iter().fold(0usize, |acc, &t| acc * base + t as usize)
}

/// Inverse of [`response_index`].
pub fn response_from_index(mut index: usize, len: usize, vocab: Vocab) -> Vec<Token> {
    let base = vocab.size();
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = (index % base) as Token;
        index /= base;
    }
    out
}

/// `(phase, bin)` decision cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhaseBin {
    pub phase: usize,
    pub bin: usize,
}

/// Clamp a proposal score into `[PSI_MIN, 1]`.
pub fn clamp_psi(psi: f64) -> f64 {
    if psi.is_nan() {
        PSI_MIN
    } else {
        psi.clamp(PSI_MIN, 1.0)
    }
}

/// Confidence bin `min(floor(psi * B), B - 1)`.
pub fn bin_of(psi: f64, bins: usize) -> usize {
    let bins = bins.max(1);
    let psi = clamp_psi(psi);
    ((psi * bins as f64).floor() as usize).min(bins - 1)
}

/// How a state maps to a phase index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PhaseMode {
    /// From the revealed fraction of non-prompt positions.
    Fraction,
    /// From the stage counter over a decode horizon.
    Step { horizon: usize },
}

pub fn phase_of(state: &MaskedState, phases: usize, mode: PhaseMode) -> usize {
    let phases = phases.max(1);
    let raw = match mode {
        PhaseMode::Fraction => {
            (state.revealed_response_count() * phases)
                .checked_div(state.response_len())
                .unwrap_or(phases - 1)
        }
        PhaseMode::Step { horizon } => (state.stage() * phases).checked_div(horizon).unwrap_or(phases - 1),
    };
    raw.min(phases - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(n: usize) -> Vocab {
        Vocab::new(n).unwrap()
    }

    #[test]
    fn apply_action_substitutes_one_coordinate() {
        let s = MaskedState::all_masked(&[], 2);
        let next = s.apply_action(RevealAction::new(0, 1)).unwrap();
        assert_eq!(next.tokens(), &[1, MASK]);
        assert_eq!(next.stage(), 1);
        assert_eq!(s.tokens(), &[MASK, MASK]);
    }

    #[test]
    fn reveal_twice_errors() {
        let s = MaskedState::all_masked(&[], 3);
        let s1 = s.apply_action(RevealAction::new(1, 0)).unwrap();
        assert_eq!(
            s1.apply_action(RevealAction::new(1, 1)),
            Err(StateError::PositionNotMasked { position: 1 })
        );
    }

    #[test]
    fn exhaustion_in_any_order() {
        let orders = [[0, 1, 2], [2, 0, 1], [1, 2, 0]];
        for order in orders {
            let mut s = MaskedState::all_masked(&[], 3);
            for &p in &order {
                s = s.apply_action(RevealAction::new(p, 0)).unwrap();
            }
            assert!(s.masked_positions().is_empty());
            assert_eq!(s.stage(), 3);
        }
    }

    #[test]
    fn step_counts_once() {
        let s = MaskedState::all_masked(&[4], 3);
        let s1 = s
            .apply_step(&[RevealAction::new(1, 0), RevealAction::new(3, 1)])
            .unwrap();
        assert_eq!(s1.stage(), 1);
        assert_eq!(s1.masked_positions(), vec![2]);
        assert!(s1.apply_action(RevealAction::new(0, 1)).is_err());
    }

    #[test]
    fn bins_at_edges() {
        assert_eq!(bin_of(0.0, 16), 0);
        assert_eq!(bin_of(1.0, 16), 15);
        assert_eq!(bin_of(0.5, 16), 8);
        assert_eq!(bin_of(f64::NAN, 16), 0);
        assert_eq!(bin_of(0.7, 1), 0);
    }

    #[test]
    fn phases() {
        let s = MaskedState::all_masked(&[], 8);
        assert_eq!(phase_of(&s, 8, PhaseMode::Fraction), 0);
        let mut half = s.clone();
        for p in 0..4 {
            half = half.apply_action(RevealAction::new(p, 0)).unwrap();
        }
        assert_eq!(phase_of(&half, 8, PhaseMode::Fraction), 4);
        let mut full = half.clone();
        for p in 4..8 {
            full = full.apply_action(RevealAction::new(p, 0)).unwrap();
        }
        assert_eq!(phase_of(&full, 8, PhaseMode::Fraction), 7);
        assert_eq!(phase_of(&half, 8, PhaseMode::Step { horizon: 8 }), 4);
        assert_eq!(phase_of(&full, 8, PhaseMode::Step { horizon: 4 }), 7);
    }

    #[test]
    fn index_roundtrip() {
        let vocab = v(3);
        for idx in 0..27 {
            let r = response_from_index(idx, 3, vocab);
            assert_eq!(response_index(&r, vocab), idx);
        }
    }

    proptest! {
        #[test]
        fn bin_monotone_and_cells_narrow(a in 0.0f64..=1.0, b in 0.0f64..=1.0, bins in 1usize..64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bin_of(lo, bins) <= bin_of(hi, bins));
            if bin_of(lo, bins) == bin_of(hi, bins) {
                prop_assert!(hi - lo < 1.0 / bins as f64 + 1e-12);
            }
        }

        #[test]
        fn distinct_actions_give_distinct_states(len in 1usize..6, vsize in 2usize..4, seed in any::<u64>()) {
            let vocab = v(vsize);
            let s = MaskedState::all_masked(&[], len);
            let mut seen = std::collections::HashSet::new();
            for i in 0..len {
                for u in vocab.tokens() {
                    let next = s.apply_action(RevealAction::new(i, u)).unwrap();
                    prop_assert!(seen.insert(next.key(vocab)));
                    let diff = next.tokens().iter().zip(s.tokens()).filter(|(a, b)| a != b).count();
                    prop_assert_eq!(diff, 1);
                }
            }
            let _ = seed;
        }

        #[test]
        fn fraction_phase_nondecreasing(perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(), k in 1usize..10) {
            let mut s = MaskedState::all_masked(&[1], 6);
            let mut last = phase_of(&s, k, PhaseMode::Fraction);
            for p in perm {
                s = s.apply_action(RevealAction::new(p + 1, 0)).unwrap();
                let ph = phase_of(&s, k, PhaseMode::Fraction);
                prop_assert!(ph >= last);
                last = ph;
            }
        }
    }
}
