//! Run configuration: a JSON document checked against a published schema,
//! then semantically.

use std::path::{Path, PathBuf};

use jsonschema::JSONSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{Generator, SplitSpec, SyntheticTaskConfig};
use crate::error::{DsclError, Result};
use crate::eval::AngularMode;
use crate::losses::{LabelKernelConfig, LossWeights};
use crate::model::{Activation, EncoderConfig, RegressorConfig, RegressorDepth};
use crate::pipeline::{MaskPolicy, TrainConfig, TrainSchedule, DEFAULT_LAMBDA};

/// JSON schema every run configuration must satisfy.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../schema/run_config.schema.json");

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DSCL_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub num_samples: usize,
    pub input_dim: usize,
    pub num_targets: usize,
    pub generator: Generator,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub normalize: bool,
}

impl SyntheticTask {
    pub fn generator_config(&self) -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            num_samples: self.num_samples,
            input_dim: self.input_dim,
            num_targets: self.num_targets,
            generator: self.generator,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularTask {
    pub path: PathBuf,
    pub inputs: Vec<String>,
    pub targets: Vec<String>,
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskConfig {
    Synthetic(SyntheticTask),
    Tabular(TabularTask),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub regressor: RegressorDepth,
    pub regressor_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            feature_dim: 32,
            activation: Activation::Relu,
            regressor: RegressorDepth::TwoLayer,
            regressor_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            activation: self.activation,
        }
    }

    pub fn regressor_config(&self, num_targets: usize) -> RegressorConfig {
        RegressorConfig {
            feature_dim: self.feature_dim,
            num_targets,
            depth: self.regressor,
            hidden_dim: self.regressor_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub label_rate: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { label_rate: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub kernel: LabelKernelConfig,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub mask_policy: MaskPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angular: Option<AngularMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl RunConfig {
    /// Schema check, then deserialization, then semantic checks.
    pub fn from_json(value: &Value) -> Result<Self> {
        let schema: Value = serde_json::from_str(RUN_CONFIG_SCHEMA).expect("bundled schema parses");
        let compiled = JSONSchema::compile(&schema).expect("bundled schema compiles");
        if let Err(errors) = compiled.validate(value) {
            let msgs: Vec<String> = errors
                .map(|e| {
                    let path = e.instance_path.to_string();
                    let at = if path.is_empty() { "/".to_string() } else { path };
                    format!("{at}: {e}")
                })
                .collect();
            return Err(DsclError::Config(format!("schema violation: {}", msgs.join("; "))));
        }
        let cfg: Self = serde_json::from_value(value.clone()).map_err(|e| DsclError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| DsclError::Config(format!("invalid JSON: {e}")))?;
        Self::from_json(&value)
    }

    /// Reads a config file. Relative tabular paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DsclError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_str(&text)?;
        if let TaskConfig::Tabular(t) = &mut cfg.task {
            if t.path.is_relative() {
                if let Some(dir) = path.parent() {
                    t.path = dir.join(&t.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        SplitSpec::new(self.split.label_rate, self.seed)?;
        self.train_config().validate().map_err(|e| match e {
            DsclError::Contract(m) => DsclError::Config(m),
            other => other,
        })?;
        if self.model.feature_dim < self.num_targets() {
            return Err(DsclError::Config(format!(
                "feature_dim {} is smaller than the {} targets",
                self.model.feature_dim,
                self.num_targets()
            )));
        }
        match (&self.angular, self.num_targets()) {
            (Some(AngularMode::Euler2), m) if m != 2 => {
                Err(DsclError::Config("euler2 angular error needs 2 targets".into()))
            }
            (Some(AngularMode::Vec3), m) if m != 3 => {
                Err(DsclError::Config("vec3 angular error needs 3 targets".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn num_targets(&self) -> usize {
        match &self.task {
            TaskConfig::Synthetic(s) => s.num_targets,
            TaskConfig::Tabular(t) => t.targets.len(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule.clone(),
            weights: self.weights,
            kernel: self.kernel,
            lambda: self.lambda,
            mask_policy: self.mask_policy,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        SplitSpec::new(self.split.label_rate, self.seed)
    }

    /// Applies the seed precedence: explicit flag, then `DSCL_SEED`, then the
    /// file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| DsclError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
