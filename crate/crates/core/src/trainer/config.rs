//! Experiment configuration, loaded from TOML.
//!
//! Unknown keys are rejected. Overrides use dotted paths into the document,
//! with array elements addressed by stage name (`stages.grpo.steps = 80`) or
//! by index (`stages.1.steps = 80`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::ClipConfig;
use crate::mpo::MpoWeights;
use crate::policy::{FreezeConfig, ModelConfig};
use crate::ssb::BufferConfig;
use crate::world::{RewardConfig, TaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Sft,
    Mpo,
    Grpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient step.
    Sgd,
    /// Adaptive-moment update.
    Adam,
}

fn default_lr() -> f64 {
    1e-2
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_optimizer_kind() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_optimizer_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    /// Rescale gradients whose norm exceeds this.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: default_optimizer_kind(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            max_grad_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{path}.lr"), "must be finite and > 0"));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{path}.{k}"), "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("{path}.eps"), "must be > 0"));
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return Err(Error::config(format!("{path}.max_grad_norm"), "must be > 0"));
            }
        }
        Ok(())
    }
}

fn default_delta_decay() -> f64 {
    0.9
}
fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpoSection {
    #[serde(default)]
    pub weights: MpoWeights,
    /// Minimum rule + model score margin for a preference pair.
    #[serde(default)]
    pub threshold: f64,
    /// Decay of the moving average behind the quality-loss offset.
    #[serde(default = "default_delta_decay")]
    pub delta_decay: f64,
    /// Gradient steps per pair-building round.
    #[serde(default = "default_one")]
    pub inner_steps: usize,
}

impl Default for MpoSection {
    fn default() -> Self {
        MpoSection {
            weights: MpoWeights::default(),
            threshold: 0.0,
            delta_decay: default_delta_decay(),
            inner_steps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoSection {
    #[serde(default)]
    pub clip: ClipConfig,
    /// Inner epochs per collection; `θ_old` is refreshed after each collection.
    #[serde(default = "default_one")]
    pub epochs: usize,
    /// Size of the finite training prompt pool; 0 draws a fresh task every time.
    #[serde(default)]
    pub pool_size: usize,
    /// Drop pool prompts whose rollout group has no variance before training.
    #[serde(default)]
    pub pool_filter: bool,
}

impl Default for GrpoSection {
    fn default() -> Self {
        GrpoSection {
            clip: ClipConfig::default(),
            epochs: 1,
            pool_size: 0,
            pool_filter: false,
        }
    }
}

fn default_prompts() -> usize {
    16
}
fn default_group_size() -> usize {
    8
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_len() -> usize {
    12
}
fn default_adapter_only() -> FreezeConfig {
    FreezeConfig::AdapterOnly
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub kind: StageKind,
    pub steps: u64,
    #[serde(default = "default_adapter_only")]
    pub freeze: FreezeConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Prompts per optimizer step.
    #[serde(default = "default_prompts")]
    pub prompts_per_step: usize,
    /// Responses per prompt (rollout group size, or samples per preference round).
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Offset mixed into this stage's task and sampling seeds.
    #[serde(default)]
    pub seed_offset: u64,
    #[serde(default)]
    pub mpo: MpoSection,
    #[serde(default)]
    pub grpo: GrpoSection,
    #[serde(default)]
    pub buffer: BufferConfig,
}

impl StageConfig {
    pub fn new(name: &str, kind: StageKind, steps: u64) -> Self {
        StageConfig {
            name: name.to_string(),
            kind,
            steps,
            freeze: default_adapter_only(),
            optimizer: OptimizerConfig::default(),
            prompts_per_step: default_prompts(),
            group_size: default_group_size(),
            temperature: default_temperature(),
            max_len: default_max_len(),
            seed_offset: 0,
            mpo: MpoSection::default(),
            grpo: GrpoSection::default(),
            buffer: BufferConfig::default(),
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config(format!("{path}.name"), "must not be empty"));
        }
        if self.freeze == FreezeConfig::Frozen {
            return Err(Error::config(
                format!("{path}.freeze"),
                "a training stage needs a trainable block",
            ));
        }
        self.optimizer.validate(&format!("{path}.optimizer"))?;
        if self.prompts_per_step < 1 {
            return Err(Error::config(format!("{path}.prompts_per_step"), "must be >= 1"));
        }
        if self.kind != StageKind::Sft && self.group_size < 2 {
            return Err(Error::config(format!("{path}.group_size"), "must be >= 2"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("{path}.temperature"), "must be finite and > 0"));
        }
        if self.max_len < 1 {
            return Err(Error::config(format!("{path}.max_len"), "must be >= 1"));
        }
        match self.kind {
            StageKind::Sft => {}
            StageKind::Mpo => {
                self.mpo.weights.validate(&format!("{path}.mpo.weights"))?;
                if !(self.mpo.threshold >= 0.0) {
                    return Err(Error::config(format!("{path}.mpo.threshold"), "must be >= 0"));
                }
                if !(self.mpo.delta_decay > 0.0 && self.mpo.delta_decay < 1.0) {
                    return Err(Error::config(
                        format!("{path}.mpo.delta_decay"),
                        "must lie in (0, 1)",
                    ));
                }
                if self.mpo.inner_steps < 1 {
                    return Err(Error::config(format!("{path}.mpo.inner_steps"), "must be >= 1"));
                }
            }
            StageKind::Grpo => {
                self.grpo.clip.validate(&format!("{path}.grpo.clip"))?;
                if self.grpo.epochs < 1 {
                    return Err(Error::config(format!("{path}.grpo.epochs"), "must be >= 1"));
                }
                if self.grpo.pool_filter && self.grpo.pool_size == 0 {
                    return Err(Error::config(
                        format!("{path}.grpo.pool_filter"),
                        "needs a finite pool (pool_size > 0)",
                    ));
                }
                self.buffer.validate(&format!("{path}.buffer"))?;
            }
        }
        Ok(())
    }
}

fn default_pretrain_steps() -> u64 {
    2000
}
fn default_pretrain_batch() -> usize {
    32
}
fn default_pretrain_lr() -> f64 {
    3e-2
}

/// Text-only training of the language head before any multimodal stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_pretrain_steps")]
    pub steps: u64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    /// Share of prompts carrying only the query marker, paired with a random answer.
    #[serde(default = "default_blank_fraction")]
    pub blank_fraction: f64,
    /// Standard deviation of Gaussian noise added to the context per example.
    #[serde(default = "default_context_noise")]
    pub context_noise: f64,
}

fn default_blank_fraction() -> f64 {
    0.25
}
fn default_context_noise() -> f64 {
    0.5
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: default_pretrain_steps(),
            batch_size: default_pretrain_batch(),
            lr: default_pretrain_lr(),
            blank_fraction: default_blank_fraction(),
            context_noise: default_context_noise(),
        }
    }
}

fn default_held_out() -> usize {
    512
}
fn default_eval_interval() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    /// Evaluate every this many steps within a stage (and at its last step).
    #[serde(default = "default_eval_interval")]
    pub interval: u64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            held_out: default_held_out(),
            interval: default_eval_interval(),
            max_len: default_max_len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    /// Check every K-th optimizer step against finite differences; 0 disables.
    #[serde(default)]
    pub every: u64,
    #[serde(default = "default_check_coords")]
    pub coords: usize,
    #[serde(default = "default_check_tolerance")]
    pub tolerance: f64,
}

fn default_check_coords() -> usize {
    12
}
fn default_check_tolerance() -> f64 {
    1e-4
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            every: 0,
            coords: default_check_coords(),
            tolerance: default_check_tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub check: CheckConfig,
    pub stages: Vec<StageConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model.init_scale <= 0.0 || !self.model.init_scale.is_finite() {
            return Err(Error::config("model.init_scale", "must be finite and > 0"));
        }
        if self.pretrain.batch_size < 1 {
            return Err(Error::config("pretrain.batch_size", "must be >= 1"));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(Error::config("pretrain.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.pretrain.blank_fraction) {
            return Err(Error::config("pretrain.blank_fraction", "must lie in [0, 1)"));
        }
        if !(self.pretrain.context_noise >= 0.0) || !self.pretrain.context_noise.is_finite() {
            return Err(Error::config("pretrain.context_noise", "must be finite and >= 0"));
        }
        if self.eval.held_out < 1 {
            return Err(Error::config("eval.held_out", "must be >= 1"));
        }
        if self.eval.max_len < 1 {
            return Err(Error::config("eval.max_len", "must be >= 1"));
        }
        if self.eval.interval < 1 {
            return Err(Error::config("eval.interval", "must be >= 1"));
        }
        if self.check.every > 0 && self.check.coords < 1 {
            return Err(Error::config("check.coords", "must be >= 1"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("stages", "at least one stage is required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(&format!("stages[{i}]"))?;
            if self.stages[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::config(
                    format!("stages[{i}].name"),
                    format!("duplicate stage name `{}`", s.name),
                ));
            }
        }
        let world = crate::world::World::new(self.task.clone(), self.reward.clone())?;
        self.model.dims(&world).validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Runtime(format!("serializing config: {e}")))
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        Self::from_value(parse_document(text, origin)?)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let config: TrainConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file and applies `key=value` overrides before validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value = parse_document(&text, path)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }
}

/// Applies one `dotted.key=value` override to a TOML document.
///
/// The value is parsed as a TOML literal when possible and taken as a bare
/// string otherwise.
pub fn apply_override(doc: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_literal(raw);
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(items) => {
                let idx = match part.parse::<usize>() {
                    Ok(i) => i,
                    Err(_) => items
                        .iter()
                        .position(|v| v.get("name").and_then(|n| n.as_str()) == Some(part))
                        .ok_or_else(|| {
                            Error::config(key, format!("no array element named `{part}`"))
                        })?,
                };
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    Error::config(key, format!("index {idx} out of range ({len} elements)"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::config(
                    key,
                    format!("`{}` is not a table", parts[..i].join(".")),
                ))
            }
        };
    }
    Ok(())
}

fn parse_document(text: &str, origin: &Path) -> Result<toml::Value> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(toml::Value::Table(table))
}

fn parse_literal(raw: &str) -> toml::Value {
    raw.parse::<toml::Value>()
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
