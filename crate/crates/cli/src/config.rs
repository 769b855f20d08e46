//! Experiment configuration: defaults, JSON files, `key=value` overrides
//! and the `ZSD_ALIGN_SEED` environment override.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use zsd_align_core::embedding::{TemperatureParam, MAX_EFFECTIVE_SCALE};
use zsd_align_core::inference::InferenceConfig;
use zsd_align_core::optim::TrainConfig;
use zsd_align_core::train::WeakConfig;
use zsd_align_core::world::SyntheticWorldConfig;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "ZSD_ALIGN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden_dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureConfig {
    /// Initial `log_scale`; the default gives an effective scale of 1/0.07.
    pub init_log_scale: f64,
    pub max_scale: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self {
            init_log_scale: TemperatureParam::initial().log_scale,
            max_scale: MAX_EFFECTIVE_SCALE,
        }
    }
}

impl TemperatureConfig {
    pub fn param(&self) -> TemperatureParam {
        TemperatureParam {
            log_scale: self.init_log_scale,
            max_effective_scale: self.max_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Detections per image counted by average recall.
    pub recall_k: usize,
    /// Evaluate on the held-out sets every this many training epochs; 0
    /// disables evaluation during training.
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            recall_k: 100,
            every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Model initialization seed.
    pub seed: u64,
    pub world: SyntheticWorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weak: WeakConfig,
    pub inference: InferenceConfig,
    pub temperature: TemperatureConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.weak.validate()?;
        self.inference.validate()?;
        if self.model.hidden_dim == 0 {
            return Err(CliError::usage("model.hidden_dim must be positive"));
        }
        let t = &self.temperature;
        if !t.init_log_scale.is_finite() || !(t.max_scale > 0.0) || !t.max_scale.is_finite() {
            return Err(CliError::usage(
                "temperature settings must be finite with a positive max_scale",
            ));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) || self.eval.recall_k == 0 {
            return Err(CliError::usage(
                "eval.iou_threshold must lie in [0, 1] and eval.recall_k be positive",
            ));
        }
        Ok(())
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.world.seed = seed;
        self.train.seed = seed;
    }

    /// Defaults, then the file, then `key=value` overrides, then the seed
    /// environment variable.
    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
        env_seed: Option<&str>,
    ) -> CliResult<Self> {
        let mut value = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            let cfg: Self = serde_json::from_value(file)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            value = serde_json::to_value(cfg).expect("config serializes");
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = serde_json::from_value(value)
            .map_err(|e| CliError::usage(format!("invalid override: {e}")))?;
        if let Some(s) = env_seed {
            let seed = s.trim().parse().map_err(|_| {
                CliError::usage(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))
            })?;
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies `section.key=value`. The value is parsed as JSON, falling back
/// to a plain string. Only existing keys may be set.
pub fn apply_override(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::usage(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let mut node = &mut *doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::usage(format!("`{}` is not a section", keys[..i].join(".")))
        })?;
        node = obj
            .get_mut(*key)
            .ok_or_else(|| CliError::usage(format!("unknown configuration key `{path}`")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Stable digest of everything a checkpoint's parameters depend on: the
/// world, the model shape and the seed. Optimizer and schedule settings
/// are left out so that a run can resume under a new phase.
pub fn config_hash(world: &SyntheticWorldConfig, model: &ModelConfig, seed: u64) -> String {
    let doc = serde_json::json!({ "world": world, "model": model, "seed": seed });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
