//! Run configuration: one JSON document covering dataset generation, graph
//! construction, model shape, and training. Unknown keys are rejected and
//! every field is bounds-checked before a run starts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasynth::{DatasynthError, GeneratorConfig};
use crate::graphs::StatsDescriptor;
use crate::model::{FusionMode, GraphMode, ModelHyper, StreamWeights};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {field}: must satisfy {bound}, got {got}")]
    Invalid {
        field: String,
        bound: String,
        got: String,
    },
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(field: &str, bound: &str, got: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        bound: bound.to_string(),
        got: got.to_string(),
    }
}

/// Which task heads are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Multitask,
    MorphologyOnly,
    DistributionOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Neighbors per node for the KNN topology.
    pub k: usize,
    /// Radius threshold in normalized [0, 1] coordinates.
    pub r: f64,
    /// Add reverse edges to the (directed) KNN graph.
    pub symmetrize: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: 5,
            r: 0.15,
            symmetrize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Residual GENConv blocks per stream.
    pub depth: usize,
    pub hidden: usize,
    /// Softmax aggregation temperature.
    pub beta: f64,
    /// Message floor added after the ReLU.
    pub epsilon: f64,
    pub fusion: FusionMode,
    pub stream_weights: StreamWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 8,
            hidden: 64,
            beta: 1.0,
            epsilon: 1e-7,
            fusion: FusionMode::ConcatProject,
            stream_weights: StreamWeights::Independent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// GradNorm restoring-force exponent.
    pub alpha: f64,
    /// GradNorm task-weight step size.
    pub weight_lr: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 200,
            alpha: 1.5,
            weight_lr: 0.025,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub enabled: bool,
    pub teacher_logits_path: Option<String>,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            enabled: false,
            teacher_logits_path: None,
            temperature: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory holding `dataset.jsonl` and `split.json`.
    pub data_dir: String,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub task_mode: TaskMode,
    pub graph_mode: GraphMode,
    pub distill: DistillConfig,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data_dir: "data".to_string(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            task_mode: TaskMode::Multitask,
            graph_mode: GraphMode::Multi,
            distill: DistillConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.data_dir.is_empty() {
            return Err(invalid("data_dir", "nonempty path", "\"\""));
        }
        if self.graph.k == 0 {
            return Err(invalid("graph.k", ">= 1", self.graph.k));
        }
        if !(self.graph.r >= 0.0 && self.graph.r.is_finite()) {
            return Err(invalid("graph.r", ">= 0 and finite", self.graph.r));
        }
        if self.model.depth > 128 {
            return Err(invalid("model.depth", "<= 128", self.model.depth));
        }
        if self.model.hidden == 0 {
            return Err(invalid("model.hidden", ">= 1", self.model.hidden));
        }
        if !(self.model.beta.is_finite() && self.model.beta > 0.0) {
            return Err(invalid("model.beta", "> 0 and finite", self.model.beta));
        }
        if !(self.model.epsilon.is_finite() && self.model.epsilon > 0.0) {
            return Err(invalid("model.epsilon", "> 0 and finite", self.model.epsilon));
        }
        if !(self.training.learning_rate.is_finite() && self.training.learning_rate > 0.0) {
            return Err(invalid("training.learning_rate", "> 0 and finite", self.training.learning_rate));
        }
        if !(0.0..1.0).contains(&self.training.momentum) {
            return Err(invalid("training.momentum", "in [0, 1)", self.training.momentum));
        }
        if !(self.training.alpha.is_finite() && self.training.alpha >= 0.0) {
            return Err(invalid("training.alpha", ">= 0 and finite", self.training.alpha));
        }
        if !(self.training.weight_lr.is_finite() && self.training.weight_lr > 0.0) {
            return Err(invalid("training.weight_lr", "> 0 and finite", self.training.weight_lr));
        }
        if self.distill.enabled {
            if self.distill.teacher_logits_path.is_none() {
                return Err(invalid(
                    "distill.teacher_logits_path",
                    "required when distill.enabled",
                    "null",
                ));
            }
            if !(self.distill.temperature.is_finite() && self.distill.temperature > 0.0) {
                return Err(invalid("distill.temperature", "> 0 and finite", self.distill.temperature));
            }
        }
        self.generator.validate().map_err(|e| match e {
            DatasynthError::BadConfig { field, bound, got } => ConfigError::Invalid {
                field: format!("generator.{field}"),
                bound: bound.to_string(),
                got,
            },
            other => invalid("generator", "valid generator config", other),
        })?;
        Ok(())
    }

    /// Architecture hyperparameters implied by this config for a dataset
    /// with the given input feature width and label ranges.
    pub fn model_hyper(
        &self,
        node_in_dim: usize,
        morphology_classes: usize,
        distribution_classes: usize,
    ) -> ModelHyper {
        ModelHyper {
            node_in_dim,
            edge_in_dim: 2,
            hidden: self.model.hidden,
            depth: self.model.depth,
            beta: self.model.beta,
            epsilon: self.model.epsilon,
            morphology_classes,
            distribution_classes,
            graph_mode: self.graph_mode,
            stream_weights: self.model.stream_weights,
            fusion: self.model.fusion,
        }
    }

    /// Input width produced by the default patch descriptor.
    pub fn default_node_in_dim() -> usize {
        StatsDescriptor::DIM + 2
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let config: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    config.validate()?;
    Ok(config)
}

pub fn save_config(path: &Path, config: &RunConfig) -> Result<(), ConfigError> {
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let config = RunConfig::default();
        let text = serde_json::to_string(&config).unwrap();
        let parsed: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, config);
        let text2 = serde_json::to_string(&parsed).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>("{\"seed\":1,\"mystery\":true}").unwrap_err();
        assert!(err.to_string().contains("mystery"));
        let err =
            serde_json::from_str::<RunConfig>("{\"graph\":{\"k\":3,\"radius\":0.2}}").unwrap_err();
        assert!(err.to_string().contains("radius"));
    }

    #[test]
    fn validation_names_field_and_bound() {
        let mut config = RunConfig::default();
        config.graph.k = 0;
        match config.validate().unwrap_err() {
            ConfigError::Invalid { field, bound, .. } => {
                assert_eq!(field, "graph.k");
                assert_eq!(bound, ">= 1");
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut config = RunConfig::default();
        config.generator.clusters_per_class = 0;
        match config.validate().unwrap_err() {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "generator.clusters_per_class"),
            other => panic!("unexpected {other:?}"),
        }

        let mut config = RunConfig::default();
        config.distill.enabled = true;
        assert!(matches!(config.validate(), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_config_fills_defaults() {
        let parsed: RunConfig = serde_json::from_str("{\"seed\":11}").unwrap();
        assert_eq!(parsed.seed, 11);
        assert_eq!(parsed.model.depth, 8);
        assert_eq!(parsed.model.hidden, 64);
        assert_eq!(parsed.training.epochs, 200);
    }
}
