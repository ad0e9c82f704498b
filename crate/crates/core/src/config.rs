//! Run configuration: presets, file and flag overrides, echo and hash.
//!
//! A config is resolved as preset, then a JSON file merged over it, then
//! `key.path=value` overrides. Unknown keys are rejected at every level.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapters::LoraConfig;
use crate::crossmodal::CrossConfig;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::probe::{ProbeConfig, ScreenConfig};
use crate::synth::{GeneratorConfig, EVENT_TASK};
use crate::unimodal::{EncoderConfig, TrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "TIMEFUSE_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "paper-scale")]
    PaperScale,
    #[serde(rename = "desk")]
    Desk,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-scale" => Ok(Self::PaperScale),
            "desk" => Ok(Self::Desk),
            _ => Err(Error::InvalidConfig(format!("preset: unknown value {s:?} (expected paper-scale or desk)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PaperScale => "paper-scale",
            Self::Desk => "desk",
        })
    }
}

/// Adapter fine-tuning of a Stage-2 model on a new corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    /// Full passes over the training split.
    pub passes: usize,
    pub warmup_passes: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lora: LoraConfig,
}

impl FinetuneConfig {
    /// Iteration schedule for a training split of `n` windows.
    pub fn schedule(&self, n: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            iters_per_epoch: n.div_ceil(self.batch_size).max(1),
            max_epochs: self.passes,
            warmup_epochs: self.warmup_passes,
            patience: 0,
            lr: self.lr,
            adam: AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::default() },
            lambda_ramp_epochs: 0,
            val_size: 64,
        }
    }
}

/// What the probe and screening commands evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub task: String,
    /// Modality pair for probing; empty means the top screened pair.
    pub pair: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: String,
    pub checkpoints: String,
    pub reports: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub stage1: TrainConfig,
    pub cross: CrossConfig,
    pub stage2: TrainConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeConfig,
    pub screen: ScreenConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

fn adam(weight_decay: f64) -> AdamConfig {
    AdamConfig { weight_decay, ..AdamConfig::default() }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::PaperScale => Self::paper_scale(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn paper_scale() -> Self {
        let encoder = EncoderConfig::paper_scale();
        Self {
            preset: Preset::PaperScale,
            seeds: vec![0, 1, 2],
            generator: GeneratorConfig { epoch_len: encoder.epoch_len, ..GeneratorConfig::desk() },
            encoder,
            stage1: TrainConfig {
                batch_size: 128,
                iters_per_epoch: 2000,
                max_epochs: 850,
                warmup_epochs: 24,
                patience: 100,
                lr: 1e-4,
                adam: adam(1e-5),
                lambda_ramp_epochs: 24,
                val_size: 1024,
            },
            cross: CrossConfig::paper_scale(),
            stage2: TrainConfig {
                batch_size: 64,
                iters_per_epoch: 4000,
                max_epochs: 200,
                warmup_epochs: 24,
                patience: 0,
                lr: 1e-4,
                adam: adam(1e-5),
                lambda_ramp_epochs: 24,
                val_size: 1024,
            },
            finetune: FinetuneConfig {
                batch_size: 128,
                passes: 50,
                warmup_passes: 2,
                lr: 3e-4,
                weight_decay: 1e-5,
                lora: LoraConfig::finetune(),
            },
            probe: ProbeConfig::paper_scale(),
            screen: ScreenConfig::paper_scale(),
            eval: EvalConfig { task: EVENT_TASK.into(), pair: vec!["spo2".into(), "resp".into()] },
            paths: PathsConfig::default(),
        }
    }

    /// CPU-sized preset: 300 Stage-1 steps per modality, 600 Stage-2 steps
    /// and 1500 probe steps.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            seeds: vec![0, 1, 2],
            generator: GeneratorConfig::desk(),
            encoder: EncoderConfig::desk(),
            stage1: TrainConfig {
                batch_size: 16,
                iters_per_epoch: 30,
                max_epochs: 10,
                warmup_epochs: 1,
                patience: 0,
                lr: 1e-4,
                adam: adam(1e-5),
                lambda_ramp_epochs: 3,
                val_size: 64,
            },
            cross: CrossConfig::desk(),
            stage2: TrainConfig {
                batch_size: 16,
                iters_per_epoch: 60,
                max_epochs: 10,
                warmup_epochs: 1,
                patience: 0,
                lr: 1e-3,
                adam: adam(1e-5),
                lambda_ramp_epochs: 3,
                val_size: 64,
            },
            finetune: FinetuneConfig {
                batch_size: 16,
                passes: 1,
                warmup_passes: 0,
                lr: 3e-4,
                weight_decay: 1e-5,
                lora: LoraConfig::finetune(),
            },
            probe: ProbeConfig::desk(),
            screen: ScreenConfig::desk(),
            eval: EvalConfig { task: EVENT_TASK.into(), pair: vec!["spo2".into(), "resp".into()] },
            paths: PathsConfig::default(),
        }
    }

    /// Preset, then the JSON file (if any), then `key.path=value` overrides.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(Self::preset(preset))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("config file {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("config file {}: {e}", path.display())))?;
            merge(&mut v, patch, "")?;
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        self.cross.validate(self.encoder.embed_dim)?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.probe.validate()?;
        self.finetune.lora.validate()?;
        if self.generator.epoch_len != self.encoder.epoch_len {
            return Err(Error::InvalidConfig(format!(
                "generator.epoch_len {} differs from encoder.epoch_len {}",
                self.generator.epoch_len, self.encoder.epoch_len
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        if !self.eval.pair.is_empty() {
            if self.eval.pair.len() != 2 || self.eval.pair[0] == self.eval.pair[1] {
                return Err(Error::InvalidConfig("eval.pair must name two distinct modalities".into()));
            }
            let names = self.generator.modality_names();
            if let Some(p) = self.eval.pair.iter().find(|p| !names.contains(p)) {
                return Err(Error::InvalidConfig(format!("eval.pair: unknown modality {p}")));
            }
        }
        if self.finetune.batch_size < 2 || self.finetune.passes == 0 || self.finetune.warmup_passes >= self.finetune.passes {
            return Err(Error::InvalidConfig("finetune: batch_size >= 2, passes > warmup_passes required".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { corpus: "corpus".into(), checkpoints: "checkpoints".into(), reports: "reports".into() }
    }
}

/// Output root from the environment, or `runs` under the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn merge(base: &mut Value, patch: Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(Error::InvalidConfig(format!("unknown key {path}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, else taken as a string.
pub fn apply_override(v: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = v;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown key {path}")))?;
    }
    *slot = value;
    Ok(())
}
