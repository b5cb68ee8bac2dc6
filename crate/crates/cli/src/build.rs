//! Turn declarative configs into tasks, pipeline graphs and learners. The
//! op-kind registry lives here; unknown kinds are reported with the op id.

use crate::config::{
    CallbackConfigEntry, DataConfig, ExperimentConfig, OpConfig, ResamplingConfig, SynthConfig,
    TrainingConfig, TuneSpecConfig, UnfreezeRow,
};
use anyhow::{anyhow, bail, Context, Result};
use pipegrad::data::{load_csv, synth_multimodal, synth_regression, synth_tabular_regression};
use pipegrad::data::{ColType, MultimodalSpec, Task, TaskType};
use pipegrad::learner::{CallbackConfig, Learner, LearnerConfig, ParamSelector, PredictType, Validate};
use pipegrad::netgraph::{Extent, IngressKind, LayerKind, ShapeSpec};
use pipegrad::nn::LossSpec;
use pipegrad::optim::{NormType, OptimKind};
use pipegrad::params::{ParamValue, TuneSpec};
use pipegrad::pipeline::{MergeKindSpec, OpKind, PipeOp, PipelineGraph, Selector};
use pipegrad::rng::RngState;
use pipegrad::tune::Resampling;

pub fn build_task(config: &ExperimentConfig, seed: u64) -> Result<Task> {
    match &config.data {
        DataConfig::Csv { path, schema, target, task_type, group } => {
            let task_type = match task_type.as_str() {
                "classif" => TaskType::Classif,
                "regr" => TaskType::Regr,
                other => bail!("unknown task type `{other}`"),
            };
            let schema: Vec<(String, ColType)> = schema
                .iter()
                .map(|(name, ty)| Ok((name.clone(), ty.parse::<ColType>()?)))
                .collect::<Result<Vec<_>, pipegrad::Error>>()?;
            Ok(load_csv(path, &schema, target, task_type, group.clone())?)
        }
        DataConfig::Synthetic(synth) => {
            let mut rng = RngState::new(seed);
            match synth {
                SynthConfig::Regr { n, d } => Ok(synth_regression(*n, *d, &mut rng)?),
                SynthConfig::Cars => Ok(synth_tabular_regression(&mut rng)?),
                SynthConfig::Multimodal { n, image_shape, positive_ratio, missing_ratio } => {
                    Ok(synth_multimodal(&MultimodalSpec {
                        n: *n,
                        image_shape: (image_shape[0], image_shape[1], image_shape[2]),
                        positive_ratio: *positive_ratio,
                        missing_ratio: *missing_ratio,
                        seed,
                    })?)
                }
            }
        }
    }
}

fn to_param_value(value: &serde_json::Value) -> Result<ParamValue> {
    Ok(match value {
        serde_json::Value::Bool(b) => ParamValue::Bool(*b),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                ParamValue::Int(i)
            } else {
                ParamValue::Float(n.as_f64().ok_or_else(|| anyhow!("bad number {n}"))?)
            }
        }
        serde_json::Value::String(s) => ParamValue::Str(s.clone()),
        serde_json::Value::Array(items) => {
            let ints: Option<Vec<i64>> = items.iter().map(|v| v.as_i64()).collect();
            match ints {
                Some(v) => ParamValue::IntList(v),
                None => bail!("array parameters must be integers"),
            }
        }
        other => bail!("unsupported parameter value {other}"),
    })
}

fn selector_from_params(op: &OpConfig) -> Result<Selector> {
    if let Some(types) = op.params.get("types") {
        let types: Vec<String> = serde_json::from_value(types.clone())?;
        return Ok(Selector::Types(types));
    }
    if let Some(names) = op.params.get("names") {
        let names: Vec<String> = serde_json::from_value(names.clone())?;
        return Ok(Selector::Names(names));
    }
    Ok(Selector::All)
}

fn shape_from_params(op: &OpConfig) -> Result<Option<ShapeSpec>> {
    let Some(shape) = op.params.get("shape") else { return Ok(None) };
    let serde_json::Value::Array(items) = shape else {
        bail!("shape must be an array of extents (null marks the batch slot)");
    };
    let extents = items
        .iter()
        .map(|v| match v {
            serde_json::Value::Null => Ok(Extent::Unknown),
            other => other
                .as_u64()
                .map(|u| Extent::Known(u as usize))
                .ok_or_else(|| anyhow!("bad shape extent {other}")),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(ShapeSpec(extents)))
}

fn loss_from_params(op: &OpConfig) -> Result<LossSpec> {
    let kind = op
        .params
        .get("loss")
        .and_then(|v| v.as_str())
        .ok_or_else(|| anyhow!("loss op requires a `loss` parameter"))?;
    let mut spec = match kind {
        "cross_entropy" => LossSpec::cross_entropy(),
        "mse" => LossSpec::mse(),
        "winsorized_mse" => {
            let max_loss = op
                .params
                .get("max_loss")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| anyhow!("winsorized_mse requires `max_loss`"))?;
            LossSpec::winsorized_mse(max_loss)?
        }
        other => bail!("unknown loss `{other}`"),
    };
    if let Some(weights) = op.params.get("class_weight") {
        let weights: Vec<f64> = serde_json::from_value(weights.clone())?;
        spec = spec.with_class_weight(weights)?;
    }
    Ok(spec)
}

fn callbacks_from_config(entries: &[CallbackConfigEntry]) -> Result<Vec<CallbackConfig>> {
    entries
        .iter()
        .map(|entry| {
            Ok(match entry {
                CallbackConfigEntry::History => CallbackConfig::History,
                CallbackConfigEntry::GradClip { max_norm, norm_type } => CallbackConfig::GradClip {
                    max_norm: *max_norm,
                    norm_type: if norm_type == "inf" {
                        NormType::Inf
                    } else {
                        NormType::P(norm_type.parse().context("norm_type must be a number or `inf`")?)
                    },
                },
                CallbackConfigEntry::Unfreeze { starting_weights, schedule } => {
                    let rows = schedule
                        .iter()
                        .map(|UnfreezeRow { epoch, weights }| {
                            let selector = match weights {
                                serde_json::Value::String(s) if s == "all" => ParamSelector::All,
                                serde_json::Value::Array(names) => ParamSelector::Names(
                                    names
                                        .iter()
                                        .map(|v| {
                                            v.as_str()
                                                .map(|s| s.to_string())
                                                .ok_or_else(|| anyhow!("weight names must be strings"))
                                        })
                                        .collect::<Result<Vec<_>>>()?,
                                ),
                                other => bail!("bad unfreeze selector {other}"),
                            };
                            Ok((*epoch, selector))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    CallbackConfig::Unfreeze {
                        starting: ParamSelector::Names(starting_weights.clone()),
                        schedule: rows,
                    }
                }
            })
        })
        .collect()
}

/// Build one op from its config entry. The kind must exist in the registry.
pub fn build_op(config: &OpConfig, training: Option<&TrainingConfig>) -> Result<PipeOp> {
    let id = config.id.clone().unwrap_or_else(|| config.kind.clone());
    let fail = |msg: String| anyhow!("op `{id}`: {msg}");
    let kind = match config.kind.as_str() {
        "select" => OpKind::Select { selector: selector_from_params(config)? },
        "encode_onehot" => OpKind::EncodeOnehot,
        "impute_hist" => OpKind::ImputeHist,
        "class_balance" => OpKind::ClassBalance,
        "feature_union" => OpKind::FeatureUnion {
            arity: config
                .params
                .get("arity")
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .unwrap_or(2),
        },
        "trafo_reshape" => {
            let shape = config
                .params
                .get("shape")
                .ok_or_else(|| fail("trafo_reshape requires `shape`".into()))?;
            let shape: Vec<i64> = serde_json::from_value(shape.clone())?;
            OpKind::LazyReshape { shape }
        }
        "trafo_resize" => OpKind::LazyResize,
        "augment_flip_horizontal" => OpKind::AugmentFlip { vertical: false },
        "augment_flip_vertical" => OpKind::AugmentFlip { vertical: true },
        "augment_crop" => OpKind::AugmentCrop {
            pad_if_needed: config
                .params
                .get("pad_if_needed")
                .and_then(|v| v.as_bool())
                .unwrap_or(false),
        },
        "branch" => {
            let paths_config = config
                .paths
                .as_ref()
                .ok_or_else(|| fail("branch requires `paths`".into()))?;
            let mut paths = Vec::new();
            for (name, ops) in paths_config {
                paths.push((name.clone(), build_chain(ops, None)?));
            }
            OpKind::Branch { paths }
        }
        "block" => {
            let segment = config
                .segment
                .as_ref()
                .ok_or_else(|| fail("block requires `segment`".into()))?;
            OpKind::Block { segment: build_chain(segment, None)? }
        }
        "ingress_num" => OpKind::Ingress { kind: IngressKind::Numeric, shape: None },
        "ingress_categ" => OpKind::Ingress { kind: IngressKind::Categorical, shape: None },
        "ingress_lazy" => {
            OpKind::Ingress { kind: IngressKind::Lazy, shape: shape_from_params(config)? }
        }
        "linear" => OpKind::Layer { layer: LayerKind::Linear },
        "relu" => OpKind::Layer { layer: LayerKind::Relu },
        "sigmoid" => OpKind::Layer { layer: LayerKind::Sigmoid },
        "dropout" => OpKind::Layer { layer: LayerKind::Dropout },
        "conv2d" => OpKind::Layer { layer: LayerKind::Conv2d },
        "max_pool2d" => OpKind::Layer { layer: LayerKind::MaxPool2d },
        "batch_norm2d" => OpKind::Layer { layer: LayerKind::BatchNorm2d },
        "flatten" => OpKind::Layer { layer: LayerKind::Flatten },
        "tokenizer_num" => OpKind::Layer { layer: LayerKind::TokenizerNum },
        "tokenizer_categ" => OpKind::Layer { layer: LayerKind::TokenizerCateg },
        "head" => OpKind::Layer { layer: LayerKind::Head },
        "merge_sum" => OpKind::Merge { merge: MergeKindSpec::Sum },
        "merge_concat" => OpKind::Merge { merge: MergeKindSpec::Concat },
        "loss" => OpKind::AttachLoss { loss: loss_from_params(config)? },
        "optimizer" => {
            let kind = config
                .params
                .get("optimizer")
                .and_then(|v| v.as_str())
                .ok_or_else(|| fail("optimizer op requires an `optimizer` parameter".into()))?;
            OpKind::AttachOptimizer { kind: kind.parse::<OptimKind>()? }
        }
        "callbacks" => {
            let entries = config.callbacks.clone().unwrap_or_default();
            OpKind::AttachCallbacks { callbacks: callbacks_from_config(&entries)? }
        }
        "model" => OpKind::Model,
        other => bail!("op `{id}`: unknown op kind `{other}`"),
    };
    let mut op = PipeOp::new(id.clone(), kind);
    // structural keys consumed above are not hyperparameters
    let structural = ["types", "names", "shape", "loss", "class_weight", "max_loss", "optimizer", "pad_if_needed", "arity"];
    for (name, value) in &config.params {
        if structural.contains(&name.as_str()) {
            continue;
        }
        let value = to_param_value(value)?;
        op.params
            .set(name, value)
            .map_err(|e| anyhow!("op `{id}`: {e}"))?;
    }
    // the model op absorbs the training block
    if matches!(op.kind, OpKind::Model) {
        if let Some(t) = training {
            op.params.set("epochs", ParamValue::Int(t.epochs as i64))?;
            op.params.set("batch_size", ParamValue::Int(t.batch_size as i64))?;
            if let Some(p) = t.patience {
                op.params.set("patience", ParamValue::Int(p as i64))?;
            }
            if !t.measures_train.is_empty() {
                op.params
                    .set("measures_train", ParamValue::Str(t.measures_train.join(",")))?;
            }
            if !t.measures_valid.is_empty() {
                op.params
                    .set("measures_valid", ParamValue::Str(t.measures_valid.join(",")))?;
            }
            if let Some(s) = t.seed {
                op.params.set("seed", ParamValue::Int(s as i64))?;
            }
        }
    }
    Ok(op)
}

/// Chain of ops; entries with `branches` become parallel sub-graphs feeding
/// the following op positionally.
pub fn build_chain(ops: &[OpConfig], training: Option<&TrainingConfig>) -> Result<PipelineGraph> {
    let mut graph: Option<PipelineGraph> = None;
    for entry in ops {
        let next = if let Some(branches) = &entry.branches {
            if entry.kind != "paths" {
                bail!("only the `paths` pseudo-op accepts `branches`");
            }
            let parts = branches
                .iter()
                .map(|chain| build_chain(chain, None))
                .collect::<Result<Vec<_>>>()?;
            PipelineGraph::parallel(parts)?
        } else {
            PipelineGraph::from_op(build_op(entry, training)?)
        };
        graph = Some(match graph {
            None => next,
            Some(g) => PipelineGraph::concat(g, next)?,
        });
    }
    graph.ok_or_else(|| anyhow!("pipeline must contain at least one op"))
}

pub fn build_learner(config: &ExperimentConfig) -> Result<Learner> {
    let graph = build_chain(&config.pipeline, config.training.as_ref())?;
    let mut learner_config = LearnerConfig::from_graph("pipeline", graph);
    learner_config.seed = config.seed;
    if let Some(pt) = &config.predict_type {
        learner_config.predict_type = match pt.as_str() {
            "prob" => PredictType::Prob,
            "response" => PredictType::Response,
            other => bail!("unknown predict type `{other}`"),
        };
    }
    if let Some(v) = &config.validate {
        learner_config.validate = match v {
            serde_json::Value::String(s) if s == "test" => Validate::Test,
            serde_json::Value::Number(n) => {
                Validate::Ratio(n.as_f64().ok_or_else(|| anyhow!("bad validate ratio"))?)
            }
            other => bail!("validate must be a ratio or \"test\", got {other}"),
        };
    }
    let mut learner = Learner::new(learner_config);
    if let Some(tuning) = &config.tuning {
        for (path, spec) in &tuning.space {
            let spec = match spec {
                TuneSpecConfig::Int { lo, hi } => TuneSpec::IntRange { lo: *lo, hi: *hi },
                TuneSpecConfig::Float { lo, hi, logscale } => {
                    TuneSpec::FloatRange { lo: *lo, hi: *hi, logscale: *logscale }
                }
                TuneSpecConfig::Categorical { levels } => TuneSpec::Categories(levels.clone()),
                TuneSpecConfig::Internal { upper } => TuneSpec::Internal { upper: *upper },
            };
            learner.tune_param(path, spec)?;
        }
    }
    Ok(learner)
}

pub fn build_resampling(config: &ResamplingConfig) -> Result<Resampling> {
    Ok(match config.kind.as_str() {
        "holdout" => Resampling::holdout(config.ratio.unwrap_or(2.0 / 3.0)),
        "cv" => Resampling::cv(config.folds.ok_or_else(|| anyhow!("cv requires `folds`"))?),
        "partition" => Resampling::partition(config.ratio.unwrap_or(2.0 / 3.0)),
        other => bail!("unknown resampling `{other}`"),
    })
}
