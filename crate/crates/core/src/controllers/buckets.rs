//! Online `(phase, bin)` statistics of exponentiated terminal rewards.
//!
//! Sums are kept as integer multiples of `2^-24`: each event adds
//! `floor(exp(beta R) * 2^24)` quanta. Integer addition makes merges exactly
//! associative and commutative, and snapshot values stay exactly
//! representable in JSON while `S < 2^29`.

use super::gate::GateParams;
use super::ControllerError;
use crate::state::PhaseBin;
use serde::{Deserialize, Serialize};

/// Fixed-point resolution of the stored sums.
pub const QUANTUM_BITS: u32 = 24;
const QUANTUM: f64 = (1u64 << QUANTUM_BITS) as f64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub n: u64,
    /// Sum of `exp(beta R)` in units of `2^-24`.
    pub s_quanta: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketTable {
    phases: usize,
    bins: usize,
    beta: f64,
    gate: GateParams,
    cells: Vec<Cell>,
}

/// Cells touched by the selected actions of an in-flight trajectory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingUpdate {
    pub cells: Vec<PhaseBin>,
}

impl PendingUpdate {
    pub fn push(&mut self, cell: PhaseBin) {
        self.cells.push(cell);
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn clear(&mut self) {
        self.cells.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketEstimate {
    pub n: u64,
    /// `(1/beta) log(S/N)`, or 0 for an empty cell.
    pub r_hat: f64,
    /// `log(S/N)`, or 0 for an empty cell.
    pub tau_hat: f64,
}

/// On-disk estimator snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSnapshot {
    pub phases: usize,
    pub bins: usize,
    pub beta: f64,
    pub gate: GateParams,
    pub cells: Vec<CellSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSnapshot {
    pub phase: usize,
    pub bin: usize,
    pub n: u64,
    pub s: f64,
}

fn quanta_of(beta: f64, reward: f64) -> u64 {
    ((beta * reward).exp() * QUANTUM).floor() as u64
}

impl BucketTable {
    pub fn new(phases: usize, bins: usize, beta: f64, gate: GateParams) -> Result<Self, ControllerError> {
        if phases == 0 || bins == 0 {
            return Err(ControllerError::Config("phases and bins must be positive".into()));
        }
        if !(beta > 0.0) || !beta.is_finite() || beta > 20.0 {
            return Err(ControllerError::Config(format!("beta must lie in (0, 20], got {beta}")));
        }
        Ok(Self {
            phases,
            bins,
            beta,
            gate,
            cells: vec![Cell { n: 0, s_quanta: 0 }; phases * bins],
        })
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gate_params(&self) -> GateParams {
        self.gate
    }

    fn index(&self, cell: PhaseBin) -> Result<usize, ControllerError> {
        if cell.phase >= self.phases || cell.bin >= self.bins {
            return Err(ControllerError::CellOutOfRange(cell));
        }
        Ok(cell.phase * self.bins + cell.bin)
    }

    pub fn cell(&self, cell: PhaseBin) -> Result<&Cell, ControllerError> {
        Ok(&self.cells[self.index(cell)?])
    }

    pub fn count(&self, cell: PhaseBin) -> u64 {
        self.cell(cell).map(|c| c.n).unwrap_or(0)
    }

    /// `S_{phase,bin}` as a real number.
    pub fn sum(&self, cell: PhaseBin) -> f64 {
        self.cell(cell).map(|c| c.s_quanta as f64 / QUANTUM).unwrap_or(0.0)
    }

    /// Add one event with terminal reward `reward` to `cell`.
    pub fn record(&mut self, cell: PhaseBin, reward: f64) -> Result<(), ControllerError> {
        check_reward(reward)?;
        let q = quanta_of(self.beta, reward);
        let i = self.index(cell)?;
        let c = &mut self.cells[i];
        c.n += 1;
        c.s_quanta = c.s_quanta.checked_add(q).ok_or(ControllerError::Overflow)?;
        Ok(())
    }

    /// Credit every pending cell with one event of reward `reward`, then clear.
    pub fn flush_terminal(&mut self, pending: &mut PendingUpdate, reward: f64) -> Result<(), ControllerError> {
        check_reward(reward)?;
        for &cell in &pending.cells {
            self.index(cell)?;
        }
        for &cell in &pending.cells {
            self.record(cell, reward)?;
        }
        pending.clear();
        Ok(())
    }

    pub fn estimate(&self, cell: PhaseBin) -> BucketEstimate {
        bucket_estimate(self, cell)
    }

    /// Cellwise `(N1 + N2, S1 + S2)`.
    pub fn merge(&mut self, other: &BucketTable) -> Result<(), ControllerError> {
        if self.phases != other.phases
            || self.bins != other.bins
            || self.beta.to_bits() != other.beta.to_bits()
            || self.gate != other.gate
        {
            return Err(ControllerError::Incompatible);
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.n = a.n.checked_add(b.n).ok_or(ControllerError::Overflow)?;
            a.s_quanta = a.s_quanta.checked_add(b.s_quanta).ok_or(ControllerError::Overflow)?;
        }
        Ok(())
    }

    /// Total events across all cells.
    pub fn total_count(&self) -> u64 {
        self.cells.iter().map(|c| c.n).sum()
    }

    pub fn to_snapshot(&self) -> BucketSnapshot {
        let mut cells = Vec::new();
        for phase in 0..self.phases {
            for bin in 0..self.bins {
                let c = &self.cells[phase * self.bins + bin];
                if c.n > 0 {
                    cells.push(CellSnapshot {
                        phase,
                        bin,
                        n: c.n,
                        s: c.s_quanta as f64 / QUANTUM,
                    });
                }
            }
        }
        BucketSnapshot {
            phases: self.phases,
            bins: self.bins,
            beta: self.beta,
            gate: self.gate,
            cells,
        }
    }

    pub fn from_snapshot(snap: &BucketSnapshot) -> Result<Self, ControllerError> {
        let mut table = Self::new(snap.phases, snap.bins, snap.beta, snap.gate)?;
        let per_event_max = quanta_of(snap.beta, 1.0);
        for c in &snap.cells {
            let i = table.index(PhaseBin {
                phase: c.phase,
                bin: c.bin,
            })?;
            let scaled = c.s * QUANTUM;
            if c.n == 0 || scaled.fract() != 0.0 || !scaled.is_finite() || scaled >= u64::MAX as f64 {
                return Err(ControllerError::Snapshot(format!(
                    "cell ({}, {}) has invalid n/s",
                    c.phase, c.bin
                )));
            }
            let quanta = scaled as u64;
            if quanta < c.n << QUANTUM_BITS || quanta > c.n.saturating_mul(per_event_max) {
                return Err(ControllerError::Snapshot(format!(
                    "cell ({}, {}) violates N <= S <= N e^beta",
                    c.phase, c.bin
                )));
            }
            if table.cells[i].n != 0 {
                return Err(ControllerError::Snapshot(format!("duplicate cell ({}, {})", c.phase, c.bin)));
            }
            table.cells[i] = Cell { n: c.n, s_quanta: quanta };
        }
        Ok(table)
    }
}

fn check_reward(reward: f64) -> Result<(), ControllerError> {
    if !(0.0..=1.0).contains(&reward) {
        return Err(ControllerError::RewardOutOfRange(reward));
    }
    Ok(())
}

/// `(R_hat, tau_hat)` for one cell; both zero when the cell is empty.
pub fn bucket_estimate(table: &BucketTable, cell: PhaseBin) -> BucketEstimate {
    let n = table.count(cell);
    if n == 0 {
        return BucketEstimate {
            n,
            r_hat: 0.0,
            tau_hat: 0.0,
        };
    }
    let tau_hat = (table.sum(cell) / n as f64).ln();
    BucketEstimate {
        n,
        r_hat: tau_hat / table.beta,
        tau_hat,
    }
}
