//! Run configuration: a single TOML file drives every command.
//!
//! Parsing is strict. Unknown keys anywhere in the file are rejected so a
//! typo like `tau = 0.1` under the wrong section fails loudly instead of
//! silently training with defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{dense_baseline_mode, DenseVariant, GrowthPolicy};
use crate::gate::{GateConfig, GateMode};
use crate::taskgen::StreamConfig;
use crate::{MoraError, Result};

/// Adapter protocol for a whole run: how pools grow and how units are mixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// One shared trainable pool, dense mixing, updated by every task.
    SeqLora,
    /// Frozen per-task groups, dense mixing.
    IncLora,
    /// Frozen per-task groups, learned router with one weight per group.
    RouterLora,
    /// Frozen per-task groups, learned router with one weight per unit.
    RouterRank,
    /// Self-activated softmax over all units, no budget, no pruning.
    SelfRaw,
    /// Self-activated with top-k budget and temperature.
    SelfSparse,
    /// Self-activated with budget, temperature, and threshold pruning.
    SelfAdaptive,
}

impl RunMode {
    pub fn all() -> [RunMode; 7] {
        [
            RunMode::SeqLora,
            RunMode::IncLora,
            RunMode::RouterLora,
            RunMode::RouterRank,
            RunMode::SelfRaw,
            RunMode::SelfSparse,
            RunMode::SelfAdaptive,
        ]
    }

    pub fn gate_mode(self) -> GateMode {
        match self {
            RunMode::SeqLora => dense_baseline_mode(DenseVariant::SeqLora).0,
            RunMode::IncLora => dense_baseline_mode(DenseVariant::IncLora).0,
            RunMode::RouterLora => GateMode::RouterLora,
            RunMode::RouterRank => GateMode::RouterRank,
            RunMode::SelfRaw => GateMode::SelfRaw,
            RunMode::SelfSparse => GateMode::SelfSparse,
            RunMode::SelfAdaptive => GateMode::SelfAdaptive,
        }
    }

    pub fn growth_policy(self) -> GrowthPolicy {
        match self {
            RunMode::SeqLora => dense_baseline_mode(DenseVariant::SeqLora).1,
            _ => GrowthPolicy::GrowAndFreeze,
        }
    }

    pub fn uses_router(self) -> bool {
        self.gate_mode().is_router()
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RunMode::SeqLora => "seq_lora",
            RunMode::IncLora => "inc_lora",
            RunMode::RouterLora => "router_lora",
            RunMode::RouterRank => "router_rank",
            RunMode::SelfRaw => "self_raw",
            RunMode::SelfSparse => "self_sparse",
            RunMode::SelfAdaptive => "self_adaptive",
        };
        f.write_str(s)
    }
}

impl FromStr for RunMode {
    type Err = MoraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq_lora" => Ok(RunMode::SeqLora),
            "inc_lora" => Ok(RunMode::IncLora),
            "router_lora" => Ok(RunMode::RouterLora),
            "router_rank" => Ok(RunMode::RouterRank),
            "self_raw" => Ok(RunMode::SelfRaw),
            "self_sparse" => Ok(RunMode::SelfSparse),
            "self_adaptive" => Ok(RunMode::SelfAdaptive),
            other => Err(MoraError::InvalidConfig(format!(
                "unknown mode '{other}' (expected one of seq_lora, inc_lora, router_lora, \
                 router_rank, self_raw, self_sparse, self_adaptive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub trunk_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            trunk_layers: 2,
        }
    }
}

/// Gate hyperparameters without the mode, which is a run-level choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSettings {
    pub tau: f64,
    pub budget_k: usize,
    pub delta: f64,
    pub eps: f64,
    pub raw_scores_as_weights: bool,
}

impl Default for GateSettings {
    fn default() -> Self {
        Self {
            tau: 0.1,
            budget_k: 16,
            delta: 0.2,
            eps: 1e-12,
            raw_scores_as_weights: false,
        }
    }
}

impl GateSettings {
    pub fn to_gate_config(&self, mode: GateMode) -> GateConfig {
        GateConfig {
            mode,
            tau: self.tau,
            budget_k: self.budget_k,
            delta: self.delta,
            eps: self.eps,
            raw_scores_as_weights: self.raw_scores_as_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSettings {
    /// Units appended to every adapted layer per task.
    pub r_per_task: usize,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        Self { r_per_task: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub iters_per_task: usize,
    pub batch_size: usize,
    pub pretrain_iters: usize,
    pub pretrain_classes: usize,
    pub pretrain_lr: f64,
    /// Also report the step-mean aggregate (mean accuracy of each task over
    /// every checkpoint at or after it) next to the default aggregate.
    pub report_step_mean_average: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            iters_per_task: 500,
            batch_size: 32,
            pretrain_iters: 400,
            pretrain_classes: 16,
            pretrain_lr: 5e-3,
            report_step_mean_average: false,
        }
    }
}

/// Everything a run needs. One file, strict keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub model: ModelConfig,
    pub gate: GateSettings,
    pub adapter: AdapterSettings,
    pub optim: OptimConfig,
    pub train: TrainSettings,
    pub stream: StreamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            mode: RunMode::SelfAdaptive,
            model: ModelConfig::default(),
            gate: GateSettings::default(),
            adapter: AdapterSettings::default(),
            optim: OptimConfig::default(),
            train: TrainSettings::default(),
            stream: StreamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| MoraError::InvalidConfig(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serializes")
    }

    pub fn gate_config(&self) -> GateConfig {
        self.gate.to_gate_config(self.mode.gate_mode())
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.gate.to_gate_config(GateMode::SelfAdaptive).validate()?;
        if self.model.hidden_dim == 0 || self.model.trunk_layers == 0 {
            return Err(MoraError::InvalidConfig(
                "model needs at least one trunk layer and a positive hidden_dim".into(),
            ));
        }
        if self.adapter.r_per_task == 0 {
            return Err(MoraError::InvalidConfig("r_per_task must be positive".into()));
        }
        if !(self.optim.lr > 0.0) || !(self.train.pretrain_lr > 0.0) {
            return Err(MoraError::InvalidConfig("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(MoraError::InvalidConfig(
                "adam betas must lie in [0, 1)".into(),
            ));
        }
        if self.train.batch_size == 0 || self.train.iters_per_task == 0 {
            return Err(MoraError::InvalidConfig(
                "batch_size and iters_per_task must be positive".into(),
            ));
        }
        if self.train.pretrain_classes < 2 {
            return Err(MoraError::InvalidConfig(
                "pretrain_classes must be at least 2".into(),
            ));
        }
        Ok(())
    }
}
