//! JSON checkpoints with every float stored as its IEEE-754 bit pattern.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mfresnet_core::training::epoch_rng;
use mfresnet_core::{Ensemble, EpochRecord, Matrix, Particle, RngState, TrainState};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_VERSION: &str = "mfresnet-checkpoint/1";

/// `f64` as `"0x"` followed by 16 hex digits of `to_bits()`.
pub mod hexf {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn encode(v: f64) -> String {
        format!("0x{:016x}", v.to_bits())
    }

    pub fn decode(s: &str) -> Result<f64, String> {
        let digits = s
            .strip_prefix("0x")
            .ok_or_else(|| format!("expected 0x-prefixed bit pattern, got {s:?}"))?;
        if digits.len() != 16 {
            return Err(format!("expected 16 hex digits, got {s:?}"));
        }
        u64::from_str_radix(digits, 16)
            .map(f64::from_bits)
            .map_err(|e| format!("{s:?}: {e}"))
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(&String::deserialize(d)?).map_err(D::Error::custom)
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&encode(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| decode(s).map_err(D::Error::custom))
                .collect()
        }
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => s.serialize_some(&encode(*x)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|s| decode(&s).map_err(D::Error::custom))
                .transpose()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    #[serde(with = "hexf::vec")]
    data: Vec<f64>,
}

impl MatrixRecord {
    fn from_matrix(m: &Matrix) -> Self {
        MatrixRecord {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<Matrix, String> {
        Matrix::from_vec(self.rows, self.cols, self.data.clone()).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParticleRecord {
    id: u64,
    #[serde(with = "hexf")]
    tau: f64,
    theta: MatrixRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HistoryRecord {
    epoch: u64,
    step: u64,
    #[serde(with = "hexf")]
    lr: f64,
    #[serde(with = "hexf")]
    train_loss: f64,
    #[serde(with = "hexf::opt")]
    eval_loss: Option<f64>,
}

/// Generator position, with the 128-bit word counter as a decimal string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngRecord {
    seed: u64,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    version: String,
    pub config: RunConfig,
    pub epoch: u64,
    pub step: u64,
    particles: Vec<ParticleRecord>,
    vel_theta: Vec<MatrixRecord>,
    #[serde(with = "hexf::vec")]
    vel_tau: Vec<f64>,
    history: Vec<HistoryRecord>,
    /// Generator that will shuffle the next epoch.
    rng: RngRecord,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, state: &TrainState) -> Self {
        let rng: RngState = epoch_rng(config.train.seed, state.epoch).state();
        Checkpoint {
            version: CHECKPOINT_VERSION.into(),
            config: config.clone(),
            epoch: state.epoch,
            step: state.step,
            particles: state
                .ensemble
                .particles()
                .iter()
                .map(|p| ParticleRecord {
                    id: p.id,
                    tau: p.tau,
                    theta: MatrixRecord::from_matrix(&p.theta),
                })
                .collect(),
            vel_theta: state.vel_theta.iter().map(MatrixRecord::from_matrix).collect(),
            vel_tau: state.vel_tau.clone(),
            history: state
                .history
                .iter()
                .map(|r| HistoryRecord {
                    epoch: r.epoch,
                    step: r.step,
                    lr: r.lr,
                    train_loss: r.train_loss,
                    eval_loss: r.eval_loss,
                })
                .collect(),
            rng: RngRecord {
                seed: rng.seed,
                stream: rng.stream,
                word_pos: rng.word_pos.to_string(),
            },
        }
    }

    /// Rebuilds the training state, checking internal consistency.
    pub fn restore(&self) -> Result<TrainState, String> {
        if self.version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {:?}", self.version));
        }
        let n = self.particles.len();
        if self.vel_theta.len() != n || self.vel_tau.len() != n {
            return Err(format!(
                "{n} particles but {} / {} velocity buffers",
                self.vel_theta.len(),
                self.vel_tau.len()
            ));
        }
        let expected = epoch_rng(self.config.train.seed, self.epoch).state();
        let word_pos: u128 = self.rng.word_pos.parse().map_err(|e| format!("rng.word_pos: {e}"))?;
        if (self.rng.seed, self.rng.stream, word_pos) != (expected.seed, expected.stream, expected.word_pos) {
            return Err("rng state does not match the recorded seed and epoch".into());
        }
        let particles = self
            .particles
            .iter()
            .map(|p| Ok(Particle::new(p.id, p.theta.to_matrix()?, p.tau)))
            .collect::<Result<Vec<_>, String>>()?;
        let mut state = TrainState::new(Ensemble::new(particles));
        state.vel_theta = self
            .vel_theta
            .iter()
            .map(MatrixRecord::to_matrix)
            .collect::<Result<_, _>>()?;
        state.vel_tau = self.vel_tau.clone();
        state.epoch = self.epoch;
        state.step = self.step;
        state.history = self
            .history
            .iter()
            .map(|r| EpochRecord {
                epoch: r.epoch,
                step: r.step,
                lr: r.lr,
                train_loss: r.train_loss,
                eval_loss: r.eval_loss,
            })
            .collect();
        Ok(state)
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| CliError::Checkpoint {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        ck.config.validate()?;
        ck.restore().map_err(|reason| CliError::Checkpoint {
            path: path.to_owned(),
            reason,
        })?;
        Ok(ck)
    }
}
