//! Experiment configuration and the data/train/eval/sweep commands.

mod commands;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use commands::{
    cmd_data, cmd_eval, cmd_inspect_trace, cmd_sweep, cmd_train, run_stage1, run_stage2, DataReport, Envelope,
    SweepReport, SweepRow, SweepSummary, TrainReport, REPORT_SCHEMA_VERSION, SINGLE_SEED_BANNER,
};

use crate::curriculum::CoverageMix;
use crate::engine::{EvalMode, GenerateLimits, TrainConfig};
use crate::error::{Error, Result};
use crate::model::BackboneConfig;

pub const ENV_OUTPUT_ROOT: &str = "GLIMPSE_OUT";
pub const ENV_WORKERS: &str = "GLIMPSE_WORKERS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub stage1_samples: usize,
    pub stage2_samples: usize,
    pub test_samples: usize,
    pub mix: CoverageMix,
    pub slots: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            stage1_samples: 2000,
            stage2_samples: 2000,
            test_samples: 500,
            mix: CoverageMix::default(),
            slots: crate::grammar::DEFAULT_SLOT_COUNT,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub limits: GenerateLimits,
    pub dump_traces: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Eta,
    Slots,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// Seeds per value, counted up from the root seed.
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            param: SweepParam::Eta,
            values: vec![0.0, 0.1, 0.5],
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`; tables merge, everything else
/// replaces.
fn overlay(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl ExperimentConfig {
    /// Parses a possibly partial TOML document over the defaults. Keys the
    /// schema does not know are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let patch: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        overlay(&mut base, patch);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.data.mix.validate()?;
        if self.data.stage1_samples == 0 || self.data.stage2_samples == 0 {
            return Err(Error::Config("corpus sizes must be at least 1".into()));
        }
        if self.stage1.stage != 1 || self.stage2.stage != 2 {
            return Err(Error::Config("stage1/stage2 tables must carry stage 1 and 2".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        let slots = self.data.slots;
        if slots == 0 || self.stage1.slots != slots || self.stage2.slots != slots {
            return Err(Error::Config(format!(
                "slot counts disagree: data {slots}, stage1 {}, stage2 {}",
                self.stage1.slots, self.stage2.slots
            )));
        }
        Ok(())
    }

    /// Sets the observation slot count everywhere it appears.
    pub fn set_slots(&mut self, slots: usize) {
        self.data.slots = slots;
        self.stage1.slots = slots;
        self.stage2.slots = slots;
    }

    /// SHA-256 of the canonical JSON form: fields in declaration order,
    /// maps sorted, floats in shortest round-trip notation.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Output root from the environment, defaulting to `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(ENV_OUTPUT_ROOT).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Evaluation worker count from the environment, defaulting to 1.
pub fn worker_count() -> Result<usize> {
    match std::env::var(ENV_WORKERS) {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{ENV_WORKERS} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Process exit code for an error: 2 usage, 3 validation, 4 runtime.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MalformedChain { .. }
        | Error::LayoutMismatch(_)
        | Error::InvalidScene(_)
        | Error::UnsupportedTask { .. }
        | Error::UnknownToken(_)
        | Error::DataSchemaMismatch(_)
        | Error::MissingStage1Init
        | Error::Checkpoint(_) => 3,
        _ => 4,
    }
}
