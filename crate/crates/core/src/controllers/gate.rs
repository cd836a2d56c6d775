//! Warmup/readiness gate.

use serde::{Deserialize, Serialize};

/// `(T_warm, T_switch, N_ready)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateParams {
    pub t_warm: u64,
    pub t_switch: u64,
    pub n_ready: u64,
}

impl GateParams {
    pub fn new(t_warm: u64, t_switch: u64, n_ready: u64) -> Result<Self, String> {
        if t_warm >= t_switch {
            return Err(format!("t_warm ({t_warm}) must be below t_switch ({t_switch})"));
        }
        if n_ready == 0 {
            return Err("n_ready must be positive".to_string());
        }
        Ok(Self {
            t_warm,
            t_switch,
            n_ready,
        })
    }
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            t_warm: 500,
            t_switch: 2000,
            n_ready: 128,
        }
    }
}

/// Which clock drives the time factor of the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateClock {
    /// Global optimization step.
    #[default]
    Global,
    /// Per-trajectory decode step.
    Decode,
    /// Time factor fixed at 1; only bucket readiness applies.
    ForceFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GateSchedule {
    pub params: GateParams,
    pub clock: GateClock,
}

impl GateSchedule {
    pub fn new(params: GateParams, clock: GateClock) -> Self {
        Self { params, clock }
    }

    /// `eta = clip((t - T_warm) / (T_switch - T_warm), 0, 1) * min(N / N_ready, 1)`.
    pub fn gate(&self, t: u64, n_cell: u64) -> f64 {
        let ready = (n_cell as f64 / self.params.n_ready as f64).min(1.0);
        match self.clock {
            GateClock::ForceFull => ready,
            GateClock::Global | GateClock::Decode => {
                let span = (self.params.t_switch - self.params.t_warm) as f64;
                let time = ((t as f64 - self.params.t_warm as f64) / span).clamp(0.0, 1.0);
                time * ready
            }
        }
    }
}
