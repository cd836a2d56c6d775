//! Flat dumps of harmonic tables and tilted kernels for inspection.

use super::{compute_h, exact_gibbs_kernel, exact_process_reward, BaseChain, OracleError, PositionLaw, RevealChain, TokenLaw};
use crate::state::Token;
use crate::targets::{TableTarget, TerminalReward};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpPositions {
    #[default]
    Uniform,
    LeftToRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpTokens {
    Uniform,
    #[default]
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    pub position: usize,
    pub token: Token,
    pub base: f64,
    pub process_reward: f64,
    pub tilted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRow {
    pub state: String,
    pub layer: usize,
    pub h: f64,
    pub mean_reward: f64,
    /// Empty at terminal states.
    pub actions: Vec<ActionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDump {
    pub beta: f64,
    pub prompt: usize,
    pub partition: f64,
    pub states: Vec<StateRow>,
}

/// Enumerate the reveal chain of `target` for `prompt` and tabulate `h`,
/// `E[R | s]` and, per action, `q0`, `R*` and the tilted kernel.
pub fn dump_tables(
    target: &TableTarget,
    reward: &TerminalReward,
    prompt: usize,
    beta: f64,
    positions: DumpPositions,
    tokens: DumpTokens,
) -> Result<OracleDump, OracleError> {
    let root = target
        .initial_state(prompt)
        .map_err(|e| OracleError::Invalid(e.to_string()))?;
    let chain = RevealChain {
        vocab: target.vocab(),
        root,
        positions: match positions {
            DumpPositions::Uniform => PositionLaw::Uniform,
            DumpPositions::LeftToRight => PositionLaw::LeftToRight,
        },
        tokens: match tokens {
            DumpTokens::Uniform => TokenLaw::Uniform,
            DumpTokens::Posterior => TokenLaw::Posterior { target, prompt },
        },
        reward: reward.clone(),
    };
    let h = compute_h(&chain, beta)?;
    let mut states = Vec::with_capacity(h.space().state_count());
    for (layer, layer_states) in h.space().layers().iter().enumerate() {
        for s in layer_states {
            let mut actions = Vec::new();
            if !s.is_terminal() {
                let tilted = exact_gibbs_kernel(&chain, &h, s)?;
                for ((a, q), (_, pi)) in chain.actions(s).into_iter().zip(tilted) {
                    actions.push(ActionRow {
                        position: a.position,
                        token: a.token,
                        base: q,
                        process_reward: exact_process_reward(&h, s, a)?,
                        tilted: pi,
                    });
                }
            }
            states.push(StateRow {
                state: s.to_string(),
                layer,
                h: h.h(s)?,
                mean_reward: h.mean_reward(s)?,
                actions,
            });
        }
    }
    Ok(OracleDump {
        beta,
        prompt,
        partition: h.partition(),
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::Vocab;

    #[test]
    fn point_mass_dump_is_flat() {
        let t = TableTarget::point_mass(Vocab::new(2).unwrap(), &[], &[1, 0]).unwrap();
        let r = TerminalReward::ExactMatch { reference: vec![1, 0] };
        let d = dump_tables(&t, &r, 0, 2.0, DumpPositions::Uniform, DumpTokens::Posterior).unwrap();
        assert!((d.partition - 2f64.exp()).abs() < 1e-12);
        for row in &d.states {
            let mass: f64 = row.actions.iter().map(|a| a.tilted).sum();
            if !row.actions.is_empty() {
                assert!((mass - 1.0).abs() < 1e-12);
            }
            assert!(row.actions.iter().all(|a| (a.process_reward - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn tilted_kernel_favors_reward() {
        let t = TableTarget::uniform_over(Vocab::new(2).unwrap(), &[vec![0, 0], vec![1, 1]]).unwrap();
        let r = TerminalReward::ExactMatch { reference: vec![1, 1] };
        let d = dump_tables(&t, &r, 0, 1.0, DumpPositions::LeftToRight, DumpTokens::Posterior).unwrap();
        let root = &d.states[0];
        let one = root.actions.iter().find(|a| a.token == 1).unwrap();
        // pi* = q0 e / (q0 e + q0) with q0 = 1/2
        assert!((one.tilted - 1f64.exp() / (1f64.exp() + 1.0)).abs() < 1e-12);
    }
}
