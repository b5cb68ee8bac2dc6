//! Task-level preprocessing and augmentation operators. Preprocessing fits
//! state at train time and replays it at predict time; augmentation is
//! train-only and behaves as the identity at predict.

use super::{ExecCtx, OpKind, OpState, PipeOp, TaskPair, Value};
use crate::data::{Column, IntColumn, LazyTransform, Task, TaskType};
use crate::error::{Error, Result};
use crate::rng::RngState;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub enum Selector {
    /// Match features by column type name ("numeric", "integer",
    /// "categorical", "lazy_tensor"; "factor" is accepted as an alias).
    Types(Vec<String>),
    Names(Vec<String>),
    All,
}

impl Selector {
    fn resolve(&self, task: &Task) -> Result<Vec<String>> {
        match self {
            Selector::All => Ok(task.feature_names().to_vec()),
            Selector::Types(types) => {
                let canonical: Vec<&str> = types
                    .iter()
                    .map(|t| if t == "factor" { "categorical" } else { t.as_str() })
                    .collect();
                Ok(task.features_of_type(&canonical))
            }
            Selector::Names(names) => {
                for n in names {
                    if !task.feature_names().contains(n) {
                        return Err(Error::Task(format!("selector names missing feature `{n}`")));
                    }
                }
                Ok(names.clone())
            }
        }
    }
}

pub fn train(op: &mut PipeOp, inputs: Vec<Value>, ctx: &mut ExecCtx) -> Result<Vec<Value>> {
    let mut op_rng = ctx.op_rng(&op.id);
    match &op.kind {
        OpKind::Select { selector } => {
            let pair = one_task(inputs, &op.id)?;
            let kept = selector.resolve(&pair.train)?;
            let train = pair.train.select_features(&kept)?;
            let valid = pair.valid.map(|v| v.select_features(&kept)).transpose()?;
            op.state = Some(OpState::SelectedFeatures(kept));
            Ok(vec![Value::Task(TaskPair { train, valid })])
        }
        OpKind::EncodeOnehot => {
            let pair = one_task(inputs, &op.id)?;
            let mut tables: Vec<(String, Vec<String>)> = Vec::new();
            for name in pair.train.feature_names() {
                if let Column::Categorical(c) = pair.train.column(name)? {
                    tables.push((name.clone(), c.levels.clone()));
                }
            }
            let train = encode_apply(&pair.train, &tables)?;
            let valid = pair.valid.map(|v| encode_apply(&v, &tables)).transpose()?;
            op.state = Some(OpState::Levels(tables));
            Ok(vec![Value::Task(TaskPair { train, valid })])
        }
        OpKind::ImputeHist => {
            let pair = one_task(inputs, &op.id)?;
            let mut observed: Vec<(String, Vec<f64>)> = Vec::new();
            for name in pair.train.feature_names() {
                match pair.train.column(name)? {
                    Column::Numeric(v) => {
                        let values: Vec<f64> = pair
                            .train
                            .row_ids()
                            .iter()
                            .map(|&r| v[r])
                            .filter(|x| !x.is_nan())
                            .collect();
                        if values.is_empty() {
                            return Err(Error::pipeop(
                                &op.id,
                                format!("feature `{name}` is entirely missing"),
                            ));
                        }
                        observed.push((name.clone(), values));
                    }
                    Column::Integer(c) => {
                        let values: Vec<f64> = pair
                            .train
                            .row_ids()
                            .iter()
                            .filter(|&&r| !c.missing[r])
                            .map(|&r| c.values[r] as f64)
                            .collect();
                        if values.is_empty() {
                            return Err(Error::pipeop(
                                &op.id,
                                format!("feature `{name}` is entirely missing"),
                            ));
                        }
                        observed.push((name.clone(), values));
                    }
                    _ => {}
                }
            }
            let train = impute_apply(&pair.train, &observed, &mut op_rng)?;
            let valid = pair
                .valid
                .map(|v| impute_apply(&v, &observed, &mut op_rng))
                .transpose()?;
            op.state = Some(OpState::Empirical(observed));
            Ok(vec![Value::Task(TaskPair { train, valid })])
        }
        OpKind::ClassBalance => {
            let pair = one_task(inputs, &op.id)?;
            let ratio = op
                .params
                .get("ratio")
                .map(|v| v.as_float())
                .transpose()?
                .unwrap_or(1.0);
            let train = class_balance(&pair.train, ratio, &mut op_rng)
                .map_err(|e| Error::pipeop(&op.id, e.to_string()))?;
            op.state = Some(OpState::Marker);
            // validation data is never rebalanced
            Ok(vec![Value::Task(TaskPair { train, valid: pair.valid })])
        }
        OpKind::FeatureUnion { arity } => {
            let pairs = many_tasks(inputs, *arity, &op.id)?;
            let train =
                feature_union(&pairs.iter().map(|p| p.train.clone()).collect::<Vec<_>>())?;
            let valids: Vec<Option<Task>> = pairs.iter().map(|p| p.valid.clone()).collect();
            let valid = if valids.iter().all(|v| v.is_some()) {
                Some(feature_union(
                    &valids.into_iter().map(|v| v.unwrap()).collect::<Vec<_>>(),
                )?)
            } else {
                None
            };
            op.state = Some(OpState::Marker);
            Ok(vec![Value::Task(TaskPair { train, valid })])
        }
        OpKind::LazyReshape { .. } | OpKind::LazyResize => {
            let pair = one_task(inputs, &op.id)?;
            let transform = lazy_transform_of(op)?;
            let train = append_lazy(&pair.train, &transform, false)?;
            let valid = pair.valid.map(|v| append_lazy(&v, &transform, false)).transpose()?;
            op.state = Some(OpState::Marker);
            Ok(vec![Value::Task(TaskPair { train, valid })])
        }
        OpKind::AugmentFlip { .. } | OpKind::AugmentCrop { .. } => {
            let pair = one_task(inputs, &op.id)?;
            let transform = lazy_transform_of(op)?;
            // augmentation applies to training data only
            let train = append_lazy(&pair.train, &transform, true)?;
            op.state = Some(OpState::Marker);
            Ok(vec![Value::Task(TaskPair { train, valid: pair.valid })])
        }
        _ => unreachable!("not a preprocessing op"),
    }
}

pub fn predict(op: &PipeOp, inputs: Vec<Value>, _ctx: &mut ExecCtx) -> Result<Vec<Value>> {
    // Deterministic replay of train-fitted state; a fixed stream keeps
    // imputation draws reproducible per predict call.
    let mut replay_rng = RngState::new(0x9A5E).split(super::fnv1a(op.id.as_bytes()));
    match (&op.kind, &op.state) {
        (OpKind::Select { .. }, Some(OpState::SelectedFeatures(kept))) => {
            let pair = one_task(inputs, &op.id)?;
            let kept: Vec<String> = kept
                .iter()
                .filter(|k| pair.train.feature_names().contains(k))
                .cloned()
                .collect();
            Ok(vec![Value::Task(TaskPair::new(pair.train.select_features(&kept)?))])
        }
        (OpKind::EncodeOnehot, Some(OpState::Levels(tables))) => {
            let pair = one_task(inputs, &op.id)?;
            Ok(vec![Value::Task(TaskPair::new(encode_apply(&pair.train, tables)?))])
        }
        (OpKind::ImputeHist, Some(OpState::Empirical(observed))) => {
            let pair = one_task(inputs, &op.id)?;
            Ok(vec![Value::Task(TaskPair::new(impute_apply(
                &pair.train,
                observed,
                &mut replay_rng,
            )?))])
        }
        // train-phase resampling and augmentation are identities at predict
        (OpKind::ClassBalance, _) | (OpKind::AugmentFlip { .. }, _) | (OpKind::AugmentCrop { .. }, _) => {
            let pair = one_task(inputs, &op.id)?;
            Ok(vec![Value::Task(TaskPair::new(pair.train))])
        }
        (OpKind::FeatureUnion { arity }, _) => {
            let pairs = many_tasks(inputs, *arity, &op.id)?;
            let union = feature_union(&pairs.iter().map(|p| p.train.clone()).collect::<Vec<_>>())?;
            Ok(vec![Value::Task(TaskPair::new(union))])
        }
        (OpKind::LazyReshape { .. }, _) | (OpKind::LazyResize, _) => {
            let pair = one_task(inputs, &op.id)?;
            let transform = lazy_transform_of(op)?;
            Ok(vec![Value::Task(TaskPair::new(append_lazy(&pair.train, &transform, false)?))])
        }
        _ => Err(Error::pipeop(&op.id, "predict called before train")),
    }
}

fn one_task(inputs: Vec<Value>, op: &str) -> Result<TaskPair> {
    let mut iter = inputs.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::pipeop(op, "expected one input"))?
        .into_task(op)?;
    if iter.next().is_some() {
        return Err(Error::pipeop(op, "expected exactly one input"));
    }
    Ok(first)
}

fn many_tasks(inputs: Vec<Value>, arity: usize, op: &str) -> Result<Vec<TaskPair>> {
    if inputs.len() != arity {
        return Err(Error::pipeop(op, format!("expected {arity} inputs, got {}", inputs.len())));
    }
    inputs.into_iter().map(|v| v.into_task(op)).collect()
}

fn lazy_transform_of(op: &PipeOp) -> Result<LazyTransform> {
    Ok(match &op.kind {
        OpKind::LazyReshape { shape } => LazyTransform::Reshape { shape: shape.clone() },
        OpKind::LazyResize => LazyTransform::ResizeBilinear {
            height: req_usize(op, "height")?,
            width: req_usize(op, "width")?,
        },
        OpKind::AugmentFlip { vertical } => LazyTransform::Flip {
            vertical: *vertical,
            p: op.params.get("p").map(|v| v.as_float()).transpose()?.unwrap_or(0.5),
        },
        OpKind::AugmentCrop { pad_if_needed } => LazyTransform::RandomCrop {
            height: req_usize(op, "height")?,
            width: req_usize(op, "width")?,
            pad_if_needed: *pad_if_needed,
        },
        _ => unreachable!(),
    })
}

fn req_usize(op: &PipeOp, name: &str) -> Result<usize> {
    op.params
        .get(name)
        .ok_or_else(|| Error::pipeop(&op.id, format!("parameter `{name}` is required")))?
        .as_usize()
}

/// Append `transform` to every lazy feature column.
fn append_lazy(task: &Task, transform: &LazyTransform, train_only: bool) -> Result<Task> {
    let lazy_features = task.features_of_type(&["lazy_tensor"]);
    if lazy_features.is_empty() {
        return Err(Error::Task("no lazy tensor feature to transform".into()));
    }
    let mut columns = Vec::new();
    for name in &lazy_features {
        let Column::Lazy(col) = task.column(name)? else { unreachable!() };
        columns.push((
            name.clone(),
            Column::Lazy(col.with_transform(transform.clone(), train_only)?),
        ));
    }
    // keep non-lazy features as they are
    for name in task.feature_names() {
        if !lazy_features.contains(name) {
            columns.push((name.clone(), task.column(name)?.clone()));
        }
    }
    let features = task.feature_names().to_vec();
    task.with_columns(columns, features)
}

/// One-hot expansion with recorded level tables; unseen levels at replay are
/// an error.
fn encode_apply(task: &Task, tables: &[(String, Vec<String>)]) -> Result<Task> {
    let mut columns: Vec<(String, Column)> = Vec::new();
    let mut features: Vec<String> = Vec::new();
    let active = task.row_ids().to_vec();
    for name in task.feature_names() {
        match task.column(name)? {
            Column::Categorical(c) => {
                let Some((_, levels)) = tables.iter().find(|(n, _)| n == name) else {
                    return Err(Error::Task(format!(
                        "one-hot encoding saw no level table for `{name}`"
                    )));
                };
                // map current codes onto the recorded levels by label
                let mut code_map: Vec<Option<usize>> = Vec::with_capacity(c.levels.len());
                for level in &c.levels {
                    code_map.push(levels.iter().position(|l| l == level));
                }
                let n = task.storage_rows();
                let mut indicator_cols: Vec<Vec<f64>> = vec![vec![0.0; n]; levels.len()];
                for &r in &active {
                    let Some(code) = c.codes[r] else {
                        return Err(Error::Task(format!("missing level in `{name}` row {r}")));
                    };
                    let Some(mapped) = code_map[code as usize] else {
                        return Err(Error::Task(format!(
                            "level `{}` of `{name}` was not seen at train time",
                            c.levels[code as usize]
                        )));
                    };
                    indicator_cols[mapped][r] = 1.0;
                }
                for (level, values) in levels.iter().zip(indicator_cols) {
                    let col_name = format!("{name}.{level}");
                    features.push(col_name.clone());
                    columns.push((col_name, Column::Numeric(Arc::new(values))));
                }
            }
            other => {
                features.push(name.clone());
                columns.push((name.clone(), other.clone()));
            }
        }
    }
    task.with_columns(columns, features)
}

/// Replace missing numeric/integer cells with draws from the recorded
/// empirical distributions.
fn impute_apply(task: &Task, observed: &[(String, Vec<f64>)], rng: &mut RngState) -> Result<Task> {
    let mut columns: Vec<(String, Column)> = Vec::new();
    let active = task.row_ids().to_vec();
    for name in task.feature_names() {
        match task.column(name)? {
            Column::Numeric(v) => {
                if let Some((_, values)) = observed.iter().find(|(n, _)| n == name) {
                    let mut new_v = v.as_ref().clone();
                    for &r in &active {
                        if new_v[r].is_nan() {
                            new_v[r] = values[rng.below(values.len() as u64) as usize];
                        }
                    }
                    columns.push((name.clone(), Column::Numeric(Arc::new(new_v))));
                } else {
                    columns.push((name.clone(), Column::Numeric(v.clone())));
                }
            }
            Column::Integer(c) => {
                if let Some((_, values)) = observed.iter().find(|(n, _)| n == name) {
                    let mut new_vals = c.values.clone();
                    let mut new_missing = c.missing.clone();
                    for &r in &active {
                        if new_missing[r] {
                            new_vals[r] =
                                values[rng.below(values.len() as u64) as usize].round() as i64;
                            new_missing[r] = false;
                        }
                    }
                    columns.push((
                        name.clone(),
                        Column::Integer(Arc::new(IntColumn {
                            values: new_vals,
                            missing: new_missing,
                        })),
                    ));
                } else {
                    columns.push((name.clone(), Column::Integer(c.clone())));
                }
            }
            other => columns.push((name.clone(), other.clone())),
        }
    }
    let features = task.feature_names().to_vec();
    task.with_columns(columns, features)
}

/// Upsample the minority class to `round(ratio x minority count)` rows with
/// replacement; the majority class is untouched. `ratio == 1` is the
/// identity.
fn class_balance(task: &Task, ratio: f64, rng: &mut RngState) -> Result<Task> {
    if task.task_type != TaskType::Classif {
        return Err(Error::Task("class balancing requires a classification task".into()));
    }
    if ratio < 1.0 {
        return Err(Error::invalid(
            "ratio below 1 would downsample the minority class; rejected",
        ));
    }
    let codes = task.class_codes()?;
    let k = task.n_classes()?;
    let mut counts = vec![0usize; k];
    for &c in &codes {
        counts[c] += 1;
    }
    let minority = counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .min_by_key(|(_, &n)| n)
        .map(|(c, _)| c)
        .ok_or_else(|| Error::Task("empty task".into()))?;
    let minority_count = counts[minority];
    let target = (ratio * minority_count as f64).round() as usize;
    if target == minority_count {
        return Ok(task.clone());
    }
    let row_ids = task.row_ids();
    let minority_rows: Vec<usize> = row_ids
        .iter()
        .zip(&codes)
        .filter(|(_, &c)| c == minority)
        .map(|(&r, _)| r)
        .collect();
    let mut new_rows: Vec<usize> = row_ids
        .iter()
        .zip(&codes)
        .filter(|(_, &c)| c != minority)
        .map(|(&r, _)| r)
        .collect();
    for _ in 0..target {
        new_rows.push(minority_rows[rng.below(minority_rows.len() as u64) as usize]);
    }
    task.with_row_ids(new_rows)
}

/// Deduplicated union of feature columns across tasks sharing rows and
/// target; same-name columns must agree in content.
pub fn feature_union(tasks: &[Task]) -> Result<Task> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Task("feature union of zero tasks".into()))?;
    let mut columns: Vec<(String, Column)> = Vec::new();
    let mut features: Vec<String> = Vec::new();
    for name in first.feature_names() {
        features.push(name.clone());
        columns.push((name.clone(), first.column(name)?.clone()));
    }
    for other in &tasks[1..] {
        if other.row_ids() != first.row_ids() {
            return Err(Error::Task("feature union requires identical row ids".into()));
        }
        if other.target_name() != first.target_name() {
            return Err(Error::Task("feature union requires one target column".into()));
        }
        for name in other.feature_names() {
            let col = other.column(name)?;
            if let Some((_, existing)) = columns.iter().find(|(n, _)| n == name) {
                if !columns_equal(existing, col) {
                    return Err(Error::Task(format!(
                        "feature union: column `{name}` differs between inputs"
                    )));
                }
            } else {
                features.push(name.clone());
                columns.push((name.clone(), col.clone()));
            }
        }
    }
    first.with_columns(columns, features)
}

fn columns_equal(a: &Column, b: &Column) -> bool {
    match (a, b) {
        (Column::Numeric(x), Column::Numeric(y)) => {
            x.len() == y.len()
                && x.iter()
                    .zip(y.iter())
                    .all(|(a, b)| (a.is_nan() && b.is_nan()) || a == b)
        }
        (Column::Integer(x), Column::Integer(y)) => x == y,
        (Column::Categorical(x), Column::Categorical(y)) => x == y,
        (Column::Lazy(x), Column::Lazy(y)) => x.same_source(y),
        _ => false,
    }
}
