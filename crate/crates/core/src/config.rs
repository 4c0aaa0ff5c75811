//! Flat, human-editable run configuration (TOML).
//!
//! Every key is optional; a missing key takes its default. Unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{Strategy, StrategyKind, Weighting};
use crate::benchmark::{BoundKind, Classifier, ProbeConfig};
use crate::error::{Error, Result};
use crate::mae::MaeShape;
use crate::orchestrator::{FaultConfig, FederationConfig, SplitMode};
use crate::synth::SynthSpec;
use crate::trainer::TrainerConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Homogeneous,
    Heterogeneous,
}

/// Which model `pretrain` trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Lower,
    Upper,
    Fedfound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub run: RunKind,

    // federation
    pub rounds: usize,
    pub num_clients: usize,
    pub split: SplitKind,
    /// Homogeneous split only.
    pub per_client: usize,
    /// Heterogeneous split only.
    pub a_clients: usize,
    pub b_clients: usize,
    pub server_size: usize,
    pub init_scale: f64,
    pub eval_per_class: usize,
    pub drop_prob: f64,
    pub corrupt_prob: f64,

    // server optimizer
    pub strategy: StrategyKind,
    /// Omitted means the strategy's default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server_lr: Option<f64>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weighting: Weighting,
    pub literal_signs: bool,

    // local training
    pub local_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_ratio: f64,

    // model
    pub patch: usize,
    pub hidden: usize,
    pub latent: usize,

    // synthetic data
    pub classes: usize,
    pub per_class_a: usize,
    pub per_class_b: usize,
    pub height: usize,
    pub width: usize,
    pub support: usize,
    pub bright_patches: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub shift_b: f64,
    pub contrast_b: f64,

    // benchmark
    pub classifier: Classifier,
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
    pub probe_hidden: usize,
    pub probe_per_class_a: usize,
    pub probe_per_class_b: usize,
    /// Write `round-NNNN.ckpt` after every this many completed rounds; 0 writes only `final.ckpt`.
    pub checkpoint_every: u64,
    /// Rounds probed by `sweep`.
    pub sweep_rounds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_parts(&FederationConfig::default(), &ProbeConfig::default())
    }
}

impl RunConfig {
    /// Flattens a federation and probe config. A custom split becomes the
    /// default heterogeneous one.
    pub fn from_parts(fed: &FederationConfig, probe: &ProbeConfig) -> Self {
        let (split, per_client, a_clients, b_clients, server_size) = match fed.split {
            SplitMode::Homogeneous { per_client, server } => (SplitKind::Homogeneous, per_client, 3, 2, server),
            SplitMode::Heterogeneous {
                a_clients,
                b_clients,
                server,
            } => (SplitKind::Heterogeneous, 380, a_clients, b_clients, server),
            SplitMode::Custom(_) => (SplitKind::Heterogeneous, 380, 3, 2, 190),
        };
        let s = &fed.strategy;
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: fed.seed,
            run: RunKind::Fedfound,
            rounds: fed.rounds,
            num_clients: fed.num_clients,
            split,
            per_client,
            a_clients,
            b_clients,
            server_size,
            init_scale: fed.init_scale,
            eval_per_class: fed.eval_per_class,
            drop_prob: fed.faults.drop_prob,
            corrupt_prob: fed.faults.corrupt_prob,
            strategy: s.kind,
            server_lr: (s.server_lr != s.kind.default_server_lr()).then_some(s.server_lr),
            momentum: s.momentum,
            beta1: s.beta1,
            beta2: s.beta2,
            epsilon: s.epsilon,
            weighting: s.weighting,
            literal_signs: s.literal_signs,
            local_steps: fed.trainer.local_steps,
            learning_rate: fed.trainer.learning_rate,
            batch_size: fed.trainer.batch_size,
            mask_ratio: fed.trainer.mask_ratio,
            patch: fed.model.patch,
            hidden: fed.model.hidden,
            latent: fed.model.latent,
            classes: fed.synth.classes,
            per_class_a: fed.synth.per_class[0],
            per_class_b: fed.synth.per_class[1],
            height: fed.synth.height,
            width: fed.synth.width,
            support: fed.synth.support,
            bright_patches: fed.synth.bright_patches,
            amplitude: fed.synth.amplitude,
            noise: fed.synth.noise,
            shift_b: fed.synth.shift_b,
            contrast_b: fed.synth.contrast_b,
            classifier: probe.classifier,
            probe_epochs: probe.epochs,
            probe_learning_rate: probe.learning_rate,
            probe_hidden: probe.hidden,
            probe_per_class_a: probe.per_class[0],
            probe_per_class_b: probe.per_class[1],
            checkpoint_every: 0,
            sweep_rounds: (0..=fed.rounds as u64).step_by((fed.rounds / 10).max(1)).collect(),
        }
    }

    pub fn strategy(&self) -> Strategy {
        Strategy {
            kind: self.strategy,
            server_lr: self.server_lr.unwrap_or_else(|| self.strategy.default_server_lr()),
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weighting: self.weighting,
            literal_signs: self.literal_signs,
        }
    }

    pub fn bound(&self) -> BoundKind {
        match self.run {
            RunKind::Lower => BoundKind::Lower,
            RunKind::Upper => BoundKind::Upper,
            RunKind::Fedfound => BoundKind::FedFound(self.strategy()),
        }
    }

    pub fn federation(&self) -> Result<FederationConfig> {
        self.check_version()?;
        let split = match self.split {
            SplitKind::Homogeneous => SplitMode::Homogeneous {
                per_client: self.per_client,
                server: self.server_size,
            },
            SplitKind::Heterogeneous => SplitMode::Heterogeneous {
                a_clients: self.a_clients,
                b_clients: self.b_clients,
                server: self.server_size,
            },
        };
        let cfg = FederationConfig {
            num_clients: self.num_clients,
            rounds: self.rounds,
            strategy: self.strategy(),
            trainer: TrainerConfig {
                local_steps: self.local_steps,
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                mask_ratio: self.mask_ratio,
            },
            split,
            model: MaeShape {
                patch: self.patch,
                hidden: self.hidden,
                latent: self.latent,
            },
            synth: SynthSpec {
                classes: self.classes,
                per_class: [self.per_class_a, self.per_class_b],
                height: self.height,
                width: self.width,
                patch: self.patch,
                support: self.support,
                bright_patches: self.bright_patches,
                amplitude: self.amplitude,
                noise: self.noise,
                shift_b: self.shift_b,
                contrast_b: self.contrast_b,
                seed: self.seed,
            },
            seed: self.seed,
            init_scale: self.init_scale,
            eval_per_class: self.eval_per_class,
            faults: FaultConfig {
                drop_prob: self.drop_prob,
                corrupt_prob: self.corrupt_prob,
            },
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn probe(&self) -> Result<ProbeConfig> {
        let p = ProbeConfig {
            classifier: self.classifier,
            epochs: self.probe_epochs,
            learning_rate: self.probe_learning_rate,
            hidden: self.probe_hidden,
            per_class: [self.probe_per_class_a, self.probe_per_class_b],
        };
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.federation()?;
        self.probe()?;
        if let Some(r) = self.sweep_rounds.iter().find(|&&r| r > self.rounds as u64) {
            return Err(Error::Config(format!(
                "sweep round {r} exceeds rounds = {}",
                self.rounds
            )));
        }
        Ok(())
    }

    fn check_version(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check_version()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        RunConfig::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::report::write_atomic(path, self.to_toml().as_bytes())
    }
}
