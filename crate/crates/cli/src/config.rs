//! Declarative experiment configuration: JSON with a fixed schema that
//! round-trips losslessly through serde.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    /// Ordered op list; branch/block nesting via dedicated fields.
    #[serde(default)]
    pub pipeline: Vec<OpConfig>,
    /// Training parameters applied to the pipeline's model op.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resampling: Option<ResamplingConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub measures: Vec<String>,
    /// Emit ROC points for binary probability predictions.
    #[serde(default)]
    pub roc: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict_type: Option<String>,
    /// Validation configuration: a ratio in (0,1) or the string "test".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Csv {
        path: PathBuf,
        /// column name -> "numeric" | "integer" | "categorical"
        #[serde(default)]
        schema: BTreeMap<String, String>,
        target: String,
        task_type: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group: Option<String>,
    },
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthConfig {
    Regr {
        n: usize,
        d: usize,
    },
    Multimodal {
        #[serde(default = "default_multimodal_n")]
        n: usize,
        #[serde(default = "default_image_shape")]
        image_shape: [usize; 3],
        #[serde(default = "default_positive_ratio")]
        positive_ratio: f64,
        #[serde(default = "default_missing_ratio")]
        missing_ratio: f64,
    },
    /// 32-row, 10-feature regression table.
    Cars,
}

fn default_multimodal_n() -> usize {
    500
}

fn default_image_shape() -> [usize; 3] {
    [3, 16, 16]
}

fn default_positive_ratio() -> f64 {
    0.1
}

fn default_missing_ratio() -> f64 {
    0.08
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub kind: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, serde_json::Value>,
    /// Branch paths: name -> op chain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<BTreeMap<String, Vec<OpConfig>>>,
    /// Block segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<Vec<OpConfig>>,
    /// Parallel branches for the "paths" pseudo-op; each chain contributes
    /// one free output, wired positionally into the next op.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branches: Option<Vec<Vec<OpConfig>>>,
    /// Callback list for the "callbacks" op.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub callbacks: Option<Vec<CallbackConfigEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallbackConfigEntry {
    History,
    GradClip {
        max_norm: f64,
        #[serde(default = "default_norm_type")]
        norm_type: String,
    },
    Unfreeze {
        starting_weights: Vec<String>,
        /// rows of (epoch, "all" or weight names)
        schedule: Vec<UnfreezeRow>,
    },
}

fn default_norm_type() -> String {
    "2".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfreezeRow {
    pub epoch: usize,
    pub weights: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub measures_train: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub measures_valid: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    /// parameter path -> range declaration
    pub space: BTreeMap<String, TuneSpecConfig>,
    pub term_evals: usize,
    pub resampling: ResamplingConfig,
    /// "internal_valid_score" or a measure id.
    pub measure: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneSpecConfig {
    Int { lo: i64, hi: i64 },
    Float { lo: f64, hi: f64, #[serde(default)] logscale: bool },
    Categorical { levels: Vec<String> },
    Internal { upper: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplingConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
}

/// Runtime benchmark configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub layers: Vec<usize>,
    pub latent: Vec<usize>,
    pub optimizers: Vec<String>,
    #[serde(default = "default_bench_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_bench_epochs() -> usize {
    20
}

fn default_warmup() -> usize {
    4
}

fn default_reps() -> usize {
    10
}

fn default_threads() -> usize {
    1
}

pub fn load_experiment(path: &std::path::Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))?;
    Ok(config)
}

pub fn load_bench(path: &std::path::Path) -> anyhow::Result<BenchConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let config: BenchConfig = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_config_round_trips_losslessly() {
        let text = r#"{
            "seed": 42,
            "data": {"synthetic": {"kind": "cars"}},
            "pipeline": [
                {"id": "ingress", "kind": "ingress_num"},
                {"id": "block", "kind": "block", "params": {"n_blocks": 2},
                 "segment": [
                    {"id": "linear", "kind": "linear", "params": {"out_features": 32}},
                    {"id": "branch", "kind": "branch", "params": {"selection": "relu"},
                     "paths": {"relu": [{"id": "relu", "kind": "relu"}],
                               "sigmoid": [{"id": "sigmoid", "kind": "sigmoid"}]}},
                    {"id": "dropout", "kind": "dropout", "params": {"p": 0.3}}
                 ]},
                {"id": "head", "kind": "head"},
                {"id": "loss", "kind": "loss", "params": {"loss": "mse"}},
                {"id": "optimizer", "kind": "optimizer", "params": {"optimizer": "adamw"}},
                {"id": "model", "kind": "model"}
            ],
            "training": {"epochs": 10, "batch_size": 32, "measures_valid": ["regr.mse"]},
            "validate": 0.3
        }"#;
        let parsed: ExperimentConfig = serde_json::from_str(text).unwrap();
        let serialized = serde_json::to_string(&parsed).unwrap();
        let reparsed: ExperimentConfig = serde_json::from_str(&serialized).unwrap();
        assert_eq!(parsed, reparsed, "parse -> serialize -> parse is lossless");
    }

    #[test]
    fn bench_config_defaults() {
        let text = r#"{"layers": [0, 4], "latent": [100], "optimizers": ["sgd"], "n": 100, "d": 10}"#;
        let parsed: BenchConfig = serde_json::from_str(text).unwrap();
        assert_eq!(parsed.epochs, 20);
        assert_eq!(parsed.warmup_epochs, 4);
        assert_eq!(parsed.repetitions, 10);
        assert_eq!(parsed.threads, 1);
    }
}
