//! Run configuration, checkpoints and checkpointed decoding.
//!
//! A checkpoint holds the trained denoiser, the controller's bucket snapshot
//! (if any), the run configuration and its hash. Decoding rebuilds the
//! controller from the configuration and the snapshot.

use crate::controllers::{
    decode_aligned, BucketSnapshot, BucketTable, Controller, ControllerDecision, ControllerError, DecodeConfig,
    DprmParams, GateClock, GateParams, GateSchedule,
};
use crate::denoiser::{train_progressive, DenoiserError, Keying, TabularDenoiser, Telemetry, TrainConfig};
use crate::rng::SeededRng;
use crate::state::Token;
use crate::targets::{LatentCollapseTarget, TableTarget, TargetError, TerminalReward};
use crate::ARTIFACT_VERSION;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("checkpoint {path} was written by {found}, expected {expected}")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("checkpoint {path} does not match its config hash")]
    Hash { path: PathBuf },
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Declarative description of the clean-sequence law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetSpec {
    /// A single response with probability one.
    PointMass {
        vocab: usize,
        #[serde(default)]
        prompt: Vec<Token>,
        response: Vec<Token>,
    },
    /// Drawn from the run seed with [`TableTarget::random`].
    Random {
        vocab: usize,
        response_len: usize,
        #[serde(default = "one")]
        prompts: usize,
        #[serde(default)]
        prompt_len: usize,
        #[serde(default = "half")]
        support: f64,
    },
    /// Latent-collapse family with binary symmetric noise.
    LatentCollapse { latent_dim: usize, eps: f64, theta: usize },
    /// Fully explicit table.
    Table { target: TableTarget },
}

fn one() -> usize {
    1
}

fn half() -> f64 {
    0.5
}

impl TargetSpec {
    /// Random targets draw from stream 1 of `seed`.
    pub fn build(&self, seed: u64) -> Result<TableTarget, TargetError> {
        match self {
            TargetSpec::PointMass {
                vocab,
                prompt,
                response,
            } => TableTarget::point_mass(vocab_of(*vocab)?, prompt, response),
            TargetSpec::Random {
                vocab,
                response_len,
                prompts,
                prompt_len,
                support,
            } => TableTarget::random(
                vocab_of(*vocab)?,
                *response_len,
                *prompts,
                *prompt_len,
                *support,
                &mut SeededRng::new(seed, 1),
            ),
            TargetSpec::LatentCollapse { latent_dim, eps, theta } => {
                LatentCollapseTarget::binary(*latent_dim, *eps)?.as_table_target(*theta)
            }
            TargetSpec::Table { target } => Ok(target.clone()),
        }
    }
}

fn vocab_of(n: usize) -> Result<crate::state::Vocab, TargetError> {
    Ok(crate::state::Vocab::new(n)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Random,
    #[default]
    Confidence,
    Dprm,
}

/// Controller settings; the DPRM fields are ignored by the other kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub dprm: DprmParams,
    pub bins: usize,
    pub beta: f64,
    pub gate: GateParams,
    pub clock: GateClock,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Confidence,
            dprm: DprmParams::default(),
            bins: 16,
            beta: 1.0,
            gate: GateParams::default(),
            clock: GateClock::Global,
        }
    }
}

impl ControllerSpec {
    /// A fresh controller with `phases` phase slots, or one restored from
    /// `snapshot`.
    pub fn build(
        &self,
        phases: usize,
        snapshot: Option<&BucketSnapshot>,
        clock: GateClock,
    ) -> Result<Controller, ControllerError> {
        Ok(match self.kind {
            ControllerKind::Random => Controller::Random,
            ControllerKind::Confidence => Controller::Confidence,
            ControllerKind::Dprm => {
                let table = match snapshot {
                    Some(s) => BucketTable::from_snapshot(s)?,
                    None => BucketTable::new(phases, self.bins, self.beta, self.gate)?,
                };
                let gate = table.gate_params();
                Controller::dprm(self.dprm, table, GateSchedule::new(gate, clock))
            }
        })
    }
}

/// Everything `train` reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub target: TargetSpec,
    pub reward: TerminalReward,
    #[serde(default)]
    pub keying: Keying,
    #[serde(default)]
    pub controller: ControllerSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Decode schedule; defaults to one reveal per step over the response.
    #[serde(default)]
    pub decode: Option<DecodeConfig>,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn decode_config(&self, response_len: usize) -> DecodeConfig {
        self.decode.unwrap_or(DecodeConfig {
            horizon: response_len,
            phases: response_len,
            sampled_tokens: false,
            top_up: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub model: TabularDenoiser,
    pub snapshot: Option<BucketSnapshot>,
}

/// Train from scratch. Training uses stream 2 of `seed`.
pub fn train_run(config: &RunConfig, seed: u64) -> Result<(Checkpoint, Telemetry), CheckpointError> {
    let target = config.target.build(seed)?;
    config.reward.validate(target.vocab(), target.response_len())?;
    let mut controller = config
        .controller
        .build(config.train.phases, None, config.controller.clock)?;
    let model = TabularDenoiser::new(target.vocab(), config.keying);
    let (model, telemetry) = train_progressive(
        &target,
        &config.reward,
        &mut controller,
        model,
        &config.train,
        &mut SeededRng::new(seed, 2),
    )?;
    let checkpoint = Checkpoint {
        version: ARTIFACT_VERSION.to_string(),
        config_hash: config.hash(),
        seed,
        config: config.clone(),
        model,
        snapshot: controller.table().map(|t| t.to_snapshot()),
    };
    Ok((checkpoint, telemetry))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        std::fs::write(path, json + "\n").map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Load and verify version and config hash.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|source| CheckpointError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if ckpt.version != ARTIFACT_VERSION {
            return Err(CheckpointError::Version {
                path: path.to_path_buf(),
                found: ckpt.version,
                expected: ARTIFACT_VERSION.to_string(),
            });
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(CheckpointError::Hash { path: path.to_path_buf() });
        }
        Ok(ckpt)
    }

    /// Controller for decoding. `force_full` switches a DPRM controller to
    /// the readiness-only gate.
    pub fn controller(&self, force_full: bool) -> Result<Controller, ControllerError> {
        let clock = if force_full {
            GateClock::ForceFull
        } else {
            self.config.controller.clock
        };
        self.config
            .controller
            .build(self.config.train.phases, self.snapshot.as_ref(), clock)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedSample {
    pub sample: usize,
    /// Rng stream id of this sample.
    pub stream: u64,
    pub prompt: usize,
    pub tokens: Vec<Token>,
    pub response: Vec<Token>,
    pub reward: f64,
    pub trace: Vec<ControllerDecision>,
}

/// Decode `samples` sequences. Sample `i` draws its prompt and all its
/// randomness from its own stream, so samples are independent of each other
/// and of the worker count. The bucket table is read only.
pub fn decode_samples(
    ckpt: &Checkpoint,
    samples: usize,
    seed: u64,
    force_full: bool,
) -> Result<Vec<DecodedSample>, CheckpointError> {
    let target = ckpt.config.target.build(ckpt.seed)?;
    let decode = ckpt.config.decode_config(target.response_len());
    let base = ckpt.controller(force_full)?;
    let root = SeededRng::new(seed, 3);
    let out = crate::par::map_indexed(samples, |i| -> Result<DecodedSample, CheckpointError> {
        let mut rng = root.fork(i as u64);
        let stream = rng.stream();
        let weights: Vec<f64> = target.prompts().iter().map(|p| p.weight).collect();
        let q = rng.categorical(&weights).unwrap_or(0);
        let prompt = target.prompt(q)?.tokens.clone();
        let mut controller = base.clone();
        let out = decode_aligned(&mut controller, &ckpt.model, &prompt, target.response_len(), &decode, &mut rng)?;
        let response = out.response().to_vec();
        Ok(DecodedSample {
            sample: i,
            stream,
            prompt: q,
            reward: ckpt.config.reward.eval(&response, target.vocab()),
            tokens: out.tokens,
            response,
            trace: out.trace,
        })
    });
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ControllerKind) -> RunConfig {
        RunConfig {
            target: TargetSpec::Random {
                vocab: 3,
                response_len: 3,
                prompts: 2,
                prompt_len: 1,
                support: 0.6,
            },
            reward: TerminalReward::Hamming { reference: vec![0, 1, 2] },
            keying: Keying::FullState,
            controller: ControllerSpec {
                kind,
                gate: GateParams::new(5, 20, 4).unwrap(),
                ..ControllerSpec::default()
            },
            train: TrainConfig {
                steps: 60,
                batch_size: 4,
                phases: 3,
                reuse: 4,
                ..TrainConfig::default()
            },
            decode: None,
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (ckpt, _) = train_run(&tiny(ControllerKind::Dprm), 7).unwrap();
        assert!(ckpt.snapshot.as_ref().unwrap().cells.iter().any(|c| c.n > 0));
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn tampered_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (mut ckpt, _) = train_run(&tiny(ControllerKind::Confidence), 7).unwrap();
        ckpt.config.train.steps += 1;
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Hash { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_run(&tiny(ControllerKind::Dprm), 3).unwrap();
        let b = train_run(&tiny(ControllerKind::Dprm), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_samples_have_distinct_streams_and_full_traces() {
        let (ckpt, _) = train_run(&tiny(ControllerKind::Dprm), 5).unwrap();
        let out = decode_samples(&ckpt, 4, 9, true).unwrap();
        assert_eq!(out.len(), 4);
        let mut streams: Vec<u64> = out.iter().map(|s| s.stream).collect();
        streams.dedup();
        assert_eq!(streams.len(), 4);
        for s in &out {
            assert_eq!(s.trace.len(), 3);
            assert!(!s.response.contains(&crate::state::MASK));
        }
        assert_eq!(out, decode_samples(&ckpt, 4, 9, true).unwrap());
    }

    #[test]
    fn force_full_switches_the_clock() {
        let (ckpt, _) = train_run(&tiny(ControllerKind::Dprm), 5).unwrap();
        match ckpt.controller(true).unwrap() {
            Controller::Dprm(d) => assert_eq!(d.schedule.clock, GateClock::ForceFull),
            _ => panic!("expected a dprm controller"),
        }
    }

    #[test]
    fn config_defaults_fill_in() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"target": {"kind": "point_mass", "vocab": 2, "response": [1, 0]},
                "reward": {"kind": "constant", "value": 1.0},
                "train": {"steps": 10}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.controller.kind, ControllerKind::Confidence);
    }
}
