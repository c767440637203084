//! Run configuration (TOML) and shipped presets.

use std::path::{Path, PathBuf};

use conjflow_core::conjugation::{ConjugationCoefficients, LevelCoefficients};
use conjflow_core::contrastive::ContrastiveParams;
use conjflow_core::hierarchy::{chain_specs, LevelSpec};
use conjflow_core::optim::OptimizerKind;
use conjflow_core::stream::{toy_spec, SyntheticSpec};
use conjflow_core::trainer::{AugmentConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StreamConfig {
    Synthetic(SyntheticSpec),
    Directory {
        path: PathBuf,
        /// Frames per lap; laps are the unit of warm-up and of the protocol.
        lap_frames: u64,
        /// Number of object classes (background excluded).
        objects: usize,
        /// 1 for greyscale frames, 3 for colour.
        #[serde(default = "three")]
        channels: usize,
    },
}

fn three() -> usize {
    3
}

impl StreamConfig {
    pub fn lap_frames(&self) -> u64 {
        match self {
            StreamConfig::Synthetic(s) => s.lap_frames() as u64,
            StreamConfig::Directory { lap_frames, .. } => *lap_frames,
        }
    }

    pub fn objects(&self) -> usize {
        match self {
            StreamConfig::Synthetic(s) => s.objects.len(),
            StreamConfig::Directory { objects, .. } => *objects,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub levels: usize,
    pub feature_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerSection {
    pub flow_lr: f64,
    pub feature_lr: f64,
    pub ema: f64,
    pub warmup_laps: u64,
    pub flow_optimizer: OptimizerKind,
    pub feature_optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default)]
    pub bootstrap_first_pair: bool,
    #[serde(default)]
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tau_abstain: f64,
    pub templates_per_object: usize,
    pub template_spacing: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Unsupervised laps; templates are collected at the end of this phase.
    pub train_laps: u64,
    /// Laps held out for evaluation after training.
    pub eval_laps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Checkpoint every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Log every this many steps.
    #[serde(default = "one")]
    pub log_every: u64,
}

fn one() -> u64 {
    1
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub conjugation: ConjugationCoefficients,
    pub contrastive: ContrastiveParams,
    pub trainer: TrainerSection,
    pub eval: EvalConfig,
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// The part of the configuration a checkpoint depends on.
#[derive(Serialize)]
struct Hashed<'a> {
    stream: &'a StreamConfig,
    model: &'a ModelConfig,
    conjugation: &'a ConjugationCoefficients,
    contrastive: &'a ContrastiveParams,
    trainer: &'a TrainerSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let StreamConfig::Synthetic(s) = &self.stream {
            s.validate()?;
        }
        if !matches!(self.image_channels(), 1 | 3) {
            return Err(Error::Config("frames need 1 or 3 channels".into()));
        }
        if self.stream.lap_frames() == 0 {
            return Err(Error::Config("lap_frames must be positive".into()));
        }
        if self.eval.templates_per_object == 0 || !(0.0..=2.0).contains(&self.eval.tau_abstain) {
            return Err(Error::Config("invalid eval section".into()));
        }
        self.train_config().validate(self.model.levels)?;
        conjflow_core::hierarchy::Hierarchy::new(self.level_specs())?;
        Ok(())
    }

    pub fn image_channels(&self) -> usize {
        match &self.stream {
            StreamConfig::Synthetic(s) => s.channels,
            StreamConfig::Directory { channels, .. } => *channels,
        }
    }

    pub fn level_specs(&self) -> Vec<LevelSpec> {
        chain_specs(
            self.model.levels,
            self.image_channels(),
            self.model.feature_channels,
            self.model.base_width,
            self.model.depth,
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            flow_lr: self.trainer.flow_lr,
            feature_lr: self.trainer.feature_lr,
            ema: self.trainer.ema,
            warmup_frames: self.trainer.warmup_laps * self.stream.lap_frames(),
            flow_optimizer: self.trainer.flow_optimizer,
            feature_optimizer: self.trainer.feature_optimizer,
            conjugation: self.conjugation.clone(),
            contrastive: self.contrastive.clone(),
            augment: self.trainer.augment,
            seed: self.trainer.seed,
            bootstrap_first_pair: self.trainer.bootstrap_first_pair,
        }
    }

    /// SHA-256 of the sections that determine the meaning of a checkpoint.
    pub fn hash(&self) -> [u8; 32] {
        let hashed = Hashed {
            stream: &self.stream,
            model: &self.model,
            conjugation: &self.conjugation,
            contrastive: &self.contrastive,
            trainer: &self.trainer,
        };
        let text = toml::to_string(&hashed).expect("configuration is always serializable");
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn total_train_frames(&self) -> u64 {
        self.protocol.train_laps * self.stream.lap_frames()
    }
}

/// Per-stream hyperparameters of a preset.
struct PresetRow {
    name: &'static str,
    channels: usize,
    keep: f64,
    feature_lr: f64,
    flow_lr: f64,
    eta: usize,
    low: [f64; 2],
    cur: [f64; 2],
    skip: [f64; 2],
    tau: f64,
    tau_m: f64,
    tau_n: f64,
    tau_p: f64,
    ema: f64,
    magnitude: f64,
    smoothness: f64,
    warmup: u64,
    adaptive: bool,
    feature_adam: bool,
}

const PRESETS: [PresetRow; 7] = [
    PresetRow { name: "emptyspace-bw", channels: 1, keep: 0.7, feature_lr: 1e-3, flow_lr: 1e-4, eta: 100, low: [1.0, 0.1], cur: [1e-4, 1e-2], skip: [0.0, 0.0], tau: 0.5, tau_m: 1.5, tau_n: 0.0, tau_p: 0.9, ema: 0.99, magnitude: 1e-3, smoothness: 1e-4, warmup: 10, adaptive: false, feature_adam: true },
    PresetRow { name: "emptyspace-rgb", channels: 3, keep: 1.0, feature_lr: 1e-3, flow_lr: 1e-4, eta: 100, low: [1.0, 1.0], cur: [1e-4, 1e-4], skip: [0.0, 0.0], tau: 0.1, tau_m: 1.5, tau_n: 0.0, tau_p: 0.7, ema: 0.5, magnitude: 5e-3, smoothness: 1e-4, warmup: 0, adaptive: false, feature_adam: true },
    PresetRow { name: "solid-bw", channels: 1, keep: 1.0, feature_lr: 1e-2, flow_lr: 1e-4, eta: 100, low: [1.0, 1.0], cur: [1e-2, 1e-3], skip: [0.0, 0.0], tau: 0.5, tau_m: 2.0, tau_n: -0.3, tau_p: 0.7, ema: 0.99, magnitude: 1e-3, smoothness: 1e-4, warmup: 0, adaptive: false, feature_adam: false },
    PresetRow { name: "livingroom-bw", channels: 1, keep: 1.0, feature_lr: 1e-3, flow_lr: 1e-4, eta: 200, low: [1.0, 1.0], cur: [1e-4, 1e-2], skip: [0.2, 0.2], tau: 0.1, tau_m: 0.7, tau_n: -0.5, tau_p: 0.9, ema: 0.99, magnitude: 1e-2, smoothness: 1e-4, warmup: 0, adaptive: false, feature_adam: false },
    PresetRow { name: "livingroom-rgb", channels: 3, keep: 1.0, feature_lr: 1e-3, flow_lr: 1e-4, eta: 200, low: [1.0, 1.0], cur: [1e-4, 1e-2], skip: [0.2, 0.2], tau: 0.1, tau_m: 0.7, tau_n: -0.5, tau_p: 0.9, ema: 0.99, magnitude: 1e-2, smoothness: 1e-4, warmup: 0, adaptive: false, feature_adam: false },
    PresetRow { name: "rat", channels: 3, keep: 0.7, feature_lr: 1e-3, flow_lr: 5e-4, eta: 200, low: [1.0, 0.01], cur: [1e-4, 1e-4], skip: [2e-5, 2e-5], tau: 0.5, tau_m: 1.3, tau_n: 0.5, tau_p: 0.8, ema: 0.99, magnitude: 1e-2, smoothness: 1e-3, warmup: 10, adaptive: true, feature_adam: false },
    PresetRow { name: "horse", channels: 3, keep: 1.0, feature_lr: 1e-4, flow_lr: 1e-4, eta: 200, low: [1.0, 0.01], cur: [1e-2, 1e-2], skip: [2e-3, 2e-3], tau: 0.5, tau_m: 1.3, tau_n: 0.5, tau_p: 0.8, ema: 0.99, magnitude: 1e-2, smoothness: 1e-4, warmup: 2, adaptive: true, feature_adam: false },
];

pub fn preset_names() -> Vec<&'static str> {
    let mut names: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
    names.push("desk");
    names
}

/// Two-level coefficients from per-level arrays.
fn coefficients(low: [f64; 2], cur: [f64; 2], skip: [f64; 2], smoothness: f64, magnitude: f64) -> ConjugationCoefficients {
    ConjugationCoefficients {
        levels: (0..2)
            .map(|l| LevelCoefficients {
                cur: cur[l],
                skip: skip[l],
                low: low[l],
            })
            .collect(),
        smoothness,
        magnitude,
    }
}

/// Named presets keep the full-size two-level shape; the `desk`
/// preset is the small configuration used by the end-to-end acceptance run.
pub fn preset(name: &str) -> Option<RunConfig> {
    if name == "desk" {
        return Some(desk());
    }
    let row = PRESETS.iter().find(|p| p.name == name)?;
    let mut stream = toy_spec(60, 0);
    stream.channels = row.channels;
    stream.textured_background = name.starts_with("livingroom");
    Some(RunConfig {
        stream: StreamConfig::Synthetic(stream),
        model: ModelConfig {
            levels: 2,
            feature_channels: 32,
            base_width: 16,
            depth: 3,
            seed: 1234,
        },
        conjugation: coefficients(row.low, row.cur, row.skip, row.smoothness, row.magnitude),
        contrastive: ContrastiveParams {
            tau: row.tau,
            tau_p: row.tau_p,
            tau_n: row.tau_n,
            tau_m: row.tau_m,
            adaptive_tau_m: row.adaptive,
            eta: row.eta,
            keep_fraction: row.keep,
        },
        trainer: TrainerSection {
            flow_lr: row.flow_lr,
            feature_lr: row.feature_lr,
            ema: row.ema,
            warmup_laps: row.warmup,
            flow_optimizer: OptimizerKind::Adam,
            feature_optimizer: if row.feature_adam { OptimizerKind::Adam } else { OptimizerKind::Sgd },
            seed: 1234,
            bootstrap_first_pair: false,
            augment: AugmentConfig {
                crop: true,
                flip: true,
                color: true,
            },
        },
        eval: EvalConfig {
            tau_abstain: 0.1,
            templates_per_object: 3,
            template_spacing: 100,
        },
        protocol: ProtocolConfig {
            train_laps: 60,
            eval_laps: 2,
        },
        output: OutputConfig {
            checkpoint_every: 500,
            log_every: 10,
        },
    })
}

pub fn desk() -> RunConfig {
    let laps = 100;
    RunConfig {
        stream: StreamConfig::Synthetic(toy_spec(laps + 2, 0)),
        model: ModelConfig {
            levels: 2,
            feature_channels: 32,
            base_width: 8,
            depth: 2,
            seed: 1234,
        },
        conjugation: coefficients([1.0, 1.0], [1e-2, 1e-2], [0.0, 0.0], 1e-2, 1e-4),
        contrastive: ContrastiveParams {
            tau: 0.1,
            tau_p: 0.7,
            tau_n: 0.0,
            tau_m: 1.5,
            adaptive_tau_m: false,
            eta: 100,
            keep_fraction: 1.0,
        },
        trainer: TrainerSection {
            flow_lr: 1e-3,
            feature_lr: 1e-2,
            ema: 0.9,
            warmup_laps: 0,
            flow_optimizer: OptimizerKind::Adam,
            feature_optimizer: OptimizerKind::Sgd,
            seed: 1,
            bootstrap_first_pair: false,
            augment: AugmentConfig::default(),
        },
        eval: EvalConfig {
            tau_abstain: 0.1,
            templates_per_object: 3,
            template_spacing: 100,
        },
        protocol: ProtocolConfig {
            train_laps: laps as u64,
            eval_laps: 2,
        },
        output: OutputConfig {
            checkpoint_every: 0,
            log_every: 10,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in preset_names() {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg, "{name}");
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn hash_tracks_training_sections_only() {
        let a = desk();
        let mut b = a.clone();
        b.output.log_every = 99;
        assert_eq!(a.hash(), b.hash());
        b.trainer.flow_lr *= 2.0;
        assert_ne!(a.hash(), b.hash());
    }
}
