//! The epoch/batch training loop with validation, callbacks and early
//! stopping, plus the shared prediction path.

use super::callbacks::{Callback, CallbackConfig, CallbackState, TrainContext};
use super::prediction::{argmax_response, Measure, Prediction};
use crate::data::{assemble_batch, epoch_batches, BatchPlan, Phase, Task, TaskType};
use crate::error::{Error, Result};
use crate::netgraph::NetworkModule;
use crate::nn::{loss_forward, softmax_rows, LossSpec, LossTarget};
use crate::optim::{OptimConfig, Optimizer};
use crate::rng::RngState;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    /// Consecutive non-improving validation epochs tolerated before early
    /// stop (strict improvement, min_delta 0).
    pub patience: Option<usize>,
    pub measures_train: Vec<Measure>,
    pub measures_valid: Vec<Measure>,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 1,
            batch_size: 32,
            shuffle: true,
            patience: None,
            measures_train: Vec::new(),
            measures_valid: Vec::new(),
            seed: 0,
        }
    }
}

/// Task facts a trained model needs at predict time.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMeta {
    pub task_type: TaskType,
    pub levels: Vec<String>,
    pub positive: usize,
}

impl TaskMeta {
    pub fn of(task: &Task) -> Result<TaskMeta> {
        Ok(TaskMeta {
            task_type: task.task_type,
            levels: match task.task_type {
                TaskType::Classif => task.class_levels()?.to_vec(),
                TaskType::Regr => Vec::new(),
            },
            positive: task.positive.unwrap_or(0),
        })
    }
}

/// Everything a training run leaves behind.
pub struct TrainedModel {
    pub network: NetworkModule,
    pub plan: BatchPlan,
    pub loss: LossSpec,
    pub optim: OptimConfig,
    pub optimizer_step_count: u64,
    pub optimizer_slots: Vec<(String, Vec<f32>, Vec<f32>)>,
    pub callback_states: Vec<(String, CallbackState)>,
    pub internal_valid_scores: Vec<(String, f64)>,
    pub internal_tuned_epochs: Option<usize>,
    /// Per-epoch measure values recorded by the loop itself (the training
    /// log), independent of any history callback.
    pub epoch_log: super::callbacks::HistoryTable,
    pub meta: TaskMeta,
    pub batch_size: usize,
}

impl TrainedModel {
    pub fn history(&self) -> Option<&super::callbacks::HistoryTable> {
        self.callback_states.iter().find_map(|(id, state)| match state {
            CallbackState::History(t) if id == "history" => Some(t),
            _ => None,
        })
    }
}

fn fire(
    callbacks: &mut [Box<dyn Callback>],
    ctx: &mut TrainContext<'_>,
    hook: impl Fn(&mut Box<dyn Callback>, &mut TrainContext<'_>) -> Result<()>,
) -> Result<()> {
    for cb in callbacks.iter_mut() {
        hook(cb, ctx)?;
    }
    Ok(())
}

/// Per-batch value of a train-time measure computed from the network output.
fn batch_measure(
    measure: &Measure,
    output: &Tensor<f32>,
    y: &Tensor<f32>,
    task_type: TaskType,
    loss_value: f64,
) -> Result<f64> {
    match (measure, task_type) {
        (Measure::Logloss, TaskType::Classif) => {
            let probs = softmax_rows(output)?;
            let (b, k) = (output.shape()[0], output.shape()[1]);
            let pd = probs.data();
            let yd = y.data();
            let mut total = 0.0f64;
            for i in 0..b {
                let class = yd[i] as usize;
                total -= (pd[i * k + class] as f64).max(1e-15).ln();
            }
            Ok(total / b as f64)
        }
        (Measure::Ce | Measure::Acc, TaskType::Classif) => {
            let (b, k) = (output.shape()[0], output.shape()[1]);
            let od: Vec<f64> = output.data().iter().map(|&v| v as f64).collect();
            let response = argmax_response(&od, b, k);
            let yd = y.data();
            let right =
                response.iter().zip(yd.iter()).filter(|(r, y)| **r == **y as usize).count();
            let acc = right as f64 / b as f64;
            Ok(if matches!(measure, Measure::Acc) { acc } else { 1.0 - acc })
        }
        (Measure::Mse, TaskType::Regr) => Ok(loss_value),
        (Measure::Rmse, TaskType::Regr) => Ok(loss_value.sqrt()),
        (m, _) => Err(Error::invalid(format!(
            "measure {} cannot be tracked per training batch",
            m.id()
        ))),
    }
}

/// Forward the task through the network in inference mode and build a
/// prediction (classification predictions always carry probabilities; the
/// caller may strip them).
pub fn predict_network(
    network: &mut NetworkModule,
    plan: &BatchPlan,
    task: &Task,
    batch_size: usize,
    meta: &TaskMeta,
) -> Result<Prediction> {
    let was_training = network.graph.nodes.first().map(|n| n.module.is_training()).unwrap_or(false);
    network.set_training(false);
    let n = task.n_rows();
    if n == 0 {
        return Err(Error::Task("cannot predict an empty task".into()));
    }
    let mut rng = RngState::new(0);
    let positions: Vec<usize> = (0..n).collect();
    let mut outputs: Vec<f32> = Vec::new();
    let mut width = 0usize;
    let result = no_grad(|| -> Result<()> {
        for chunk in positions.chunks(batch_size.max(1)) {
            let batch = assemble_batch(task, plan, chunk, Phase::Predict, &mut rng)?;
            let out = network.forward(&batch.x, &mut rng)?;
            width = if out.rank() == 2 { out.shape()[1] } else { 1 };
            outputs.extend_from_slice(&out.data());
        }
        Ok(())
    });
    network.set_training(was_training);
    result?;
    let row_ids = task.row_ids().to_vec();
    match meta.task_type {
        TaskType::Classif => {
            let k = meta.levels.len();
            if width != k {
                return Err(Error::shape(format!(
                    "network emits {width} scores for {k} classes"
                )));
            }
            let logits: Vec<f64> = outputs.iter().map(|&v| v as f64).collect();
            let mut prob = vec![0.0f64; n * k];
            for i in 0..n {
                let row = &logits[i * k..(i + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for j in 0..k {
                    prob[i * k + j] = (row[j] - m).exp() / denom;
                }
            }
            let response = argmax_response(&prob, n, k);
            Ok(Prediction::Classif {
                row_ids,
                truth: task.class_codes()?,
                response,
                prob: Some(prob),
                levels: meta.levels.clone(),
                positive: meta.positive,
            })
        }
        TaskType::Regr => {
            if width != 1 {
                return Err(Error::shape(format!("regression network emits width {width}")));
            }
            Ok(Prediction::Regr {
                row_ids,
                truth: task.target_values()?,
                response: outputs.iter().map(|&v| v as f64).collect(),
            })
        }
    }
}

/// Run the full training loop and harvest the trained model.
#[allow(clippy::too_many_arguments)]
pub fn train_network(
    mut network: NetworkModule,
    plan: BatchPlan,
    task: &Task,
    valid: Option<&Task>,
    loss: LossSpec,
    optim: OptimConfig,
    callback_configs: &[CallbackConfig],
    settings: &TrainSettings,
) -> Result<TrainedModel> {
    if settings.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    for m in &settings.measures_train {
        if matches!(m, Measure::Auc) {
            return Err(Error::invalid("auc cannot be tracked per training batch"));
        }
    }
    let meta = TaskMeta::of(task)?;
    network.set_training(true);
    let mut optimizer = Optimizer::<f32>::new(optim.clone())?;
    let mut callbacks: Vec<Box<dyn Callback>> =
        callback_configs.iter().map(|c| c.instantiate()).collect();
    let base = RngState::new(settings.seed);
    let mut shuffle_rng = base.split(1);
    let mut data_rng = base.split(2);
    let mut forward_rng = base.split(3);

    let mut train_scores: Vec<(String, f64)> = Vec::new();
    let mut valid_scores: Vec<(String, f64)> = Vec::new();
    let mut stop = false;
    let mut epoch_log = super::callbacks::HistoryTable::default();
    let mut best: Option<(usize, f64)> = None; // (epoch, score) of the stopping measure
    let stopping_measure = settings.measures_valid.first().cloned();

    macro_rules! ctx {
        ($epoch:expr, $batch:expr, $loss:expr) => {
            TrainContext {
                network: &mut network,
                optimizer: &mut optimizer,
                epoch: $epoch,
                max_epochs: settings.epochs,
                batch: $batch,
                last_loss: $loss,
                train_scores: &train_scores,
                valid_scores: &valid_scores,
                stop_requested: &mut stop,
            }
        };
    }

    fire(&mut callbacks, &mut ctx!(0, 0, f64::NAN), |cb, ctx| cb.on_begin(ctx))?;

    let mut last_epoch_ran = 0usize;
    for epoch in 1..=settings.epochs {
        last_epoch_ran = epoch;
        fire(&mut callbacks, &mut ctx!(epoch, 0, f64::NAN), |cb, ctx| cb.on_epoch_begin(ctx))?;
        let chunks = epoch_batches(task.n_rows(), settings.batch_size, settings.shuffle, &mut shuffle_rng)?;
        let mut measure_totals = vec![0.0f64; settings.measures_train.len()];
        let mut rows_seen = 0usize;
        for (batch_idx, chunk) in chunks.iter().enumerate() {
            let batch = assemble_batch(task, &plan, chunk, Phase::Train, &mut data_rng)?;
            fire(&mut callbacks, &mut ctx!(epoch, batch_idx, f64::NAN), |cb, ctx| {
                cb.on_batch_begin(ctx)
            })?;
            let params = network.named_parameters();
            for (_, p) in &params {
                p.zero_grad();
            }
            let output = network.forward(&batch.x, &mut forward_rng)?;
            let loss_tensor = match meta.task_type {
                TaskType::Classif => {
                    let classes: Vec<usize> =
                        batch.y.data().iter().map(|&v| v as usize).collect();
                    loss_forward(&loss, &output, &LossTarget::Classes(&classes))?
                }
                TaskType::Regr => {
                    let target = batch.y.reshape(&[batch.size() as i64, 1])?;
                    loss_forward(&loss, &output, &LossTarget::Values(&target))?
                }
            };
            let loss_value = loss_tensor.item() as f64;
            loss_tensor.backward()?;
            fire(&mut callbacks, &mut ctx!(epoch, batch_idx, loss_value), |cb, ctx| {
                cb.on_after_backward(ctx)
            })?;
            optimizer.step(&network.named_parameters())?;
            for (slot, m) in measure_totals.iter_mut().zip(&settings.measures_train) {
                *slot +=
                    batch_measure(m, &output, &batch.y, meta.task_type, loss_value)? * batch.size() as f64;
            }
            rows_seen += batch.size();
            fire(&mut callbacks, &mut ctx!(epoch, batch_idx, loss_value), |cb, ctx| {
                cb.on_batch_end(ctx)
            })?;
        }
        train_scores = settings
            .measures_train
            .iter()
            .zip(&measure_totals)
            .map(|(m, total)| (m.id(), total / rows_seen.max(1) as f64))
            .collect();

        if let Some(valid_task) = valid {
            if !settings.measures_valid.is_empty() {
                let pred = predict_network(
                    &mut network,
                    &plan,
                    valid_task,
                    settings.batch_size,
                    &meta,
                )?;
                valid_scores = settings
                    .measures_valid
                    .iter()
                    .map(|m| Ok((m.id(), m.score(&pred)?)))
                    .collect::<Result<Vec<_>>>()?;
            }
        }

        {
            let mut row: Vec<(String, f64)> = Vec::new();
            for (name, value) in &train_scores {
                row.push((format!("train.{name}"), *value));
            }
            for (name, value) in &valid_scores {
                row.push((format!("valid.{name}"), *value));
            }
            epoch_log.rows.push((epoch, row));
        }
        fire(&mut callbacks, &mut ctx!(epoch, 0, f64::NAN), |cb, ctx| cb.on_epoch_end(ctx))?;
        fire(&mut callbacks, &mut ctx!(epoch, 0, f64::NAN), |cb, ctx| cb.on_valid_end(ctx))?;

        if let (Some(patience), Some(measure)) = (settings.patience, &stopping_measure) {
            if let Some((_, value)) = valid_scores.iter().find(|(n, _)| *n == measure.id()) {
                let improved = match best {
                    None => true,
                    Some((_, best_value)) => {
                        if measure.minimize() {
                            *value < best_value
                        } else {
                            *value > best_value
                        }
                    }
                };
                if improved {
                    best = Some((epoch, *value));
                } else if let Some((best_epoch, _)) = best {
                    if epoch - best_epoch >= patience {
                        stop = true;
                    }
                }
            }
        }
        if stop {
            break;
        }
    }

    fire(&mut callbacks, &mut ctx!(last_epoch_ran, 0, f64::NAN), |cb, ctx| cb.on_end(ctx))?;

    let callback_states: Vec<(String, CallbackState)> =
        callbacks.iter().map(|cb| (cb.id().to_string(), cb.state())).collect();
    let (step_count, slots) = optimizer.into_state();
    let internal_tuned_epochs = if settings.patience.is_some() {
        best.map(|(epoch, _)| epoch)
    } else {
        None
    };
    Ok(TrainedModel {
        network,
        plan,
        loss,
        optim,
        optimizer_step_count: step_count,
        optimizer_slots: slots
            .into_iter()
            .map(|(name, moments)| (name, moments.m, moments.v))
            .collect(),
        callback_states,
        internal_valid_scores: valid_scores,
        internal_tuned_epochs,
        epoch_log,
        meta,
        batch_size: settings.batch_size,
    })
}
