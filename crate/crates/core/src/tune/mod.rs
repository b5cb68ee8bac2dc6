//! Resampling strategies (holdout, k-fold CV, partition; group-aware),
//! the random-search tuner with internal-tuning integration, and benchmark
//! grids.
//!
//! Iterations and evaluations are embarrassingly parallel: each clone owns
//! its task view, learner and rng stream, and results are collected in
//! deterministic index order.

#[cfg(test)]
mod tests;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::learner::{Learner, LearnerConfig, Measure, Prediction, Validate};
use crate::params::ParamValue;
use crate::rng::RngState;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResamplingKind {
    Holdout { ratio: f64 },
    Cv { folds: usize },
    /// Single split like holdout; kept distinct for config fidelity.
    Partition { ratio: f64 },
}

/// A resampling strategy plus its instantiated train/test row splits.
#[derive(Debug, Clone)]
pub struct Resampling {
    pub kind: ResamplingKind,
    splits: Vec<(Vec<usize>, Vec<usize>)>,
}

impl Resampling {
    pub fn holdout(ratio: f64) -> Self {
        Resampling { kind: ResamplingKind::Holdout { ratio }, splits: Vec::new() }
    }

    pub fn cv(folds: usize) -> Self {
        Resampling { kind: ResamplingKind::Cv { folds }, splits: Vec::new() }
    }

    pub fn partition(ratio: f64) -> Self {
        Resampling { kind: ResamplingKind::Partition { ratio }, splits: Vec::new() }
    }

    pub fn describe(&self) -> String {
        match self.kind {
            ResamplingKind::Holdout { ratio } => format!("holdout({ratio})"),
            ResamplingKind::Cv { folds } => format!("cv({folds})"),
            ResamplingKind::Partition { ratio } => format!("partition({ratio})"),
        }
    }

    pub fn iterations(&self) -> usize {
        self.splits.len()
    }

    pub fn splits(&self) -> &[(Vec<usize>, Vec<usize>)] {
        &self.splits
    }

    /// Materialize train/test row id sets on the task. With a group column,
    /// whole groups are assigned to one side, so no group straddles a split.
    pub fn instantiate(&mut self, task: &Task, rng: &mut RngState) -> Result<()> {
        let rows = task.row_ids().to_vec();
        if rows.is_empty() {
            return Err(Error::Task("cannot resample an empty task".into()));
        }
        // units: either single rows or whole groups
        let units: Vec<Vec<usize>> = match task.group_codes()? {
            None => rows.iter().map(|&r| vec![r]).collect(),
            Some(codes) => {
                let mut order: Vec<u64> = Vec::new();
                let mut by_group: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
                for (&row, &code) in rows.iter().zip(&codes) {
                    if !by_group.contains_key(&code) {
                        order.push(code);
                    }
                    by_group.entry(code).or_default().push(row);
                }
                order.into_iter().map(|c| by_group.remove(&c).unwrap()).collect()
            }
        };
        let n = units.len();
        let mut indices: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut indices);
        let expand = |unit_indices: &[usize]| -> Vec<usize> {
            let mut out: Vec<usize> = unit_indices.iter().flat_map(|&u| units[u].clone()).collect();
            out.sort_unstable();
            out
        };
        self.splits = match self.kind {
            ResamplingKind::Holdout { ratio } | ResamplingKind::Partition { ratio } => {
                if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
                    return Err(Error::invalid("holdout ratio must be in (0,1)"));
                }
                let n_train = ((n as f64) * ratio).round() as usize;
                let n_train = n_train.clamp(1, n.saturating_sub(1).max(1));
                vec![(expand(&indices[..n_train]), expand(&indices[n_train..]))]
            }
            ResamplingKind::Cv { folds } => {
                if folds < 2 || folds > n {
                    return Err(Error::invalid(format!(
                        "cv needs 2..=n folds, got {folds} for {n} units"
                    )));
                }
                let mut fold_units: Vec<Vec<usize>> = vec![Vec::new(); folds];
                for (i, &u) in indices.iter().enumerate() {
                    fold_units[i % folds].push(u);
                }
                (0..folds)
                    .map(|f| {
                        let test = expand(&fold_units[f]);
                        let train_units: Vec<usize> = (0..folds)
                            .filter(|&g| g != f)
                            .flat_map(|g| fold_units[g].clone())
                            .collect();
                        (expand(&train_units), test)
                    })
                    .collect()
            }
        };
        Ok(())
    }
}

/// Outcome of one resampling iteration.
pub struct IterationResult {
    pub iteration: usize,
    pub prediction: Option<Prediction>,
    pub scores: Vec<(String, f64)>,
    pub internal_valid_scores: Vec<(String, f64)>,
    pub internal_tuned_epochs: Option<usize>,
    pub error: Option<String>,
}

pub struct ResampleResult {
    pub iterations: Vec<IterationResult>,
}

impl ResampleResult {
    /// Unweighted mean of per-iteration scores for `measure_id`.
    pub fn aggregate(&self, measure_id: &str) -> Result<f64> {
        let values: Vec<f64> = self
            .iterations
            .iter()
            .filter_map(|it| {
                it.scores.iter().find(|(n, _)| n == measure_id).map(|(_, v)| *v)
            })
            .collect();
        if values.is_empty() {
            return Err(Error::invalid(format!(
                "no successful iteration scored `{measure_id}`"
            )));
        }
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }

    pub fn failed(&self) -> usize {
        self.iterations.iter().filter(|it| it.error.is_some()).count()
    }
}

/// Train/evaluate the learner per resampling iteration. When the learner's
/// validate field is `Test`, the fold's test rows become its validation rows
/// (they never enter gradient batches).
pub fn resample(
    task: &Task,
    config: &LearnerConfig,
    resampling: &Resampling,
    measures: &[Measure],
    seed: u64,
    exec: Execution,
) -> Result<ResampleResult> {
    if resampling.splits.is_empty() {
        return Err(Error::invalid("resampling must be instantiated before use"));
    }
    let base = RngState::new(seed);
    let iterations = map_indexed(exec, resampling.splits.len(), |i| {
        let (train_rows, test_rows) = &resampling.splits[i];
        let mut learner = Learner::new(config.clone());
        // one derived stream per iteration
        learner.config.seed = base.split(i as u64).next_u64();
        if let crate::learner::LearnerSpec::Torch(spec) = &mut learner.config.spec {
            spec.settings.seed = learner.config.seed;
        }
        let valid_rows =
            if learner.config.validate == Validate::Test { Some(test_rows.as_slice()) } else { None };
        let run = (|| -> Result<IterationResult> {
            learner.train_with_valid(task, Some(train_rows), valid_rows)?;
            let prediction = learner.predict(task, Some(test_rows))?;
            let scores = measures
                .iter()
                .map(|m| Ok((m.id(), m.score(&prediction)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(IterationResult {
                iteration: i,
                prediction: Some(prediction),
                scores,
                internal_valid_scores: learner.internal_valid_scores(),
                internal_tuned_epochs: learner.internal_tuned_epochs(),
                error: None,
            })
        })();
        run.unwrap_or_else(|e| IterationResult {
            iteration: i,
            prediction: None,
            scores: Vec::new(),
            internal_valid_scores: Vec::new(),
            internal_tuned_epochs: None,
            error: Some(e.to_string()),
        })
    });
    Ok(ResampleResult { iterations })
}

/// What the tuner optimizes: an external measure of test predictions, or the
/// learner's own final validation score.
#[derive(Debug, Clone)]
pub enum TuneMeasure {
    External(Measure),
    InternalValidScore { minimize: bool },
}

impl TuneMeasure {
    pub fn id(&self) -> String {
        match self {
            TuneMeasure::External(m) => m.id(),
            TuneMeasure::InternalValidScore { .. } => "internal_valid_score".into(),
        }
    }

    pub fn minimize(&self) -> bool {
        match self {
            TuneMeasure::External(m) => m.minimize(),
            TuneMeasure::InternalValidScore { minimize } => *minimize,
        }
    }
}

pub struct Evaluation {
    pub index: usize,
    pub values: BTreeMap<String, ParamValue>,
    pub score: Option<f64>,
    pub internal_tuned_epochs: Option<usize>,
    pub error: Option<String>,
}

pub struct TuneResult {
    pub archive: Vec<Evaluation>,
    pub best_index: usize,
    /// Sampled values of the best evaluation, with internally tuned values
    /// merged in under their parameter path.
    pub best_values: BTreeMap<String, ParamValue>,
    pub best_score: f64,
}

/// Random search: `term_evals` independently sampled configurations, each
/// evaluated by resampling. Ties resolve to the earliest evaluation.
pub fn tune_random_search(
    task: &Task,
    config: &LearnerConfig,
    resampling: &Resampling,
    measure: &TuneMeasure,
    term_evals: usize,
    seed: u64,
    exec: Execution,
) -> Result<TuneResult> {
    if term_evals == 0 {
        return Err(Error::invalid("term_evals must be positive"));
    }
    let template = Learner::new(config.clone());
    let space = template.param_set()?;
    if space.tunable().is_empty() && space.internal().is_empty() {
        return Err(Error::invalid("learner has no tunable parameters"));
    }
    let internal_paths: Vec<String> =
        space.internal().iter().map(|(n, _)| n.to_string()).collect();
    let base = RngState::new(seed);
    let archive: Vec<Evaluation> = map_indexed(exec, term_evals, |e| {
        let mut sample_rng = base.split(e as u64);
        let values = space.sample(&mut sample_rng);
        let run = (|| -> Result<(f64, Option<usize>)> {
            let mut learner = Learner::new(config.clone());
            for (path, value) in &values {
                learner.set_param(path, value.clone())?;
            }
            let eval_seed = sample_rng.next_u64();
            let result = resample(task, &learner.config, resampling, &[], eval_seed, Execution::Sequential);
            let result = result?;
            let score = match measure {
                TuneMeasure::External(m) => {
                    let rescored = rescore(&result, m)?;
                    rescored
                }
                TuneMeasure::InternalValidScore { .. } => {
                    let mut values: Vec<f64> = Vec::new();
                    for it in &result.iterations {
                        if let Some(err) = &it.error {
                            return Err(Error::invalid(err.clone()));
                        }
                        let (_, v) = it.internal_valid_scores.first().ok_or_else(|| {
                            Error::invalid(
                                "internal_valid_score requires validation measures on the learner",
                            )
                        })?;
                        values.push(*v);
                    }
                    values.iter().sum::<f64>() / values.len() as f64
                }
            };
            // internally tuned epochs: averaged over iterations
            let tuned: Vec<usize> = result
                .iterations
                .iter()
                .filter_map(|it| it.internal_tuned_epochs)
                .collect();
            let internal = if tuned.is_empty() {
                None
            } else {
                Some(
                    (tuned.iter().sum::<usize>() as f64 / tuned.len() as f64).round() as usize,
                )
            };
            Ok((score, internal))
        })();
        match run {
            Ok((score, internal)) => Evaluation {
                index: e,
                values,
                score: Some(score),
                internal_tuned_epochs: internal,
                error: None,
            },
            Err(err) => Evaluation {
                index: e,
                values,
                score: None,
                internal_tuned_epochs: None,
                error: Some(err.to_string()),
            },
        }
    });
    let minimize = measure.minimize();
    let mut best_index: Option<usize> = None;
    for eval in &archive {
        let Some(score) = eval.score else { continue };
        let better = match best_index {
            None => true,
            Some(b) => {
                let best_score = archive[b].score.unwrap();
                if minimize {
                    score < best_score
                } else {
                    score > best_score
                }
            }
        };
        if better {
            best_index = Some(eval.index);
        }
    }
    let best_index =
        best_index.ok_or_else(|| Error::invalid("every tuning evaluation failed"))?;
    let best = &archive[best_index];
    let mut best_values = best.values.clone();
    if let (Some(epochs), Some(path)) = (best.internal_tuned_epochs, internal_paths.first()) {
        best_values.insert(path.clone(), ParamValue::Int(epochs as i64));
    }
    Ok(TuneResult {
        best_index,
        best_values,
        best_score: best.score.unwrap(),
        archive,
    })
}

fn rescore(result: &ResampleResult, measure: &Measure) -> Result<f64> {
    let mut values = Vec::new();
    for it in &result.iterations {
        if let Some(err) = &it.error {
            return Err(Error::invalid(err.clone()));
        }
        let pred = it.prediction.as_ref().expect("successful iteration has a prediction");
        values.push(measure.score(pred)?);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// One scored row of a benchmark table.
pub struct BenchmarkRow {
    pub task_id: String,
    pub learner_id: String,
    pub resampling: String,
    pub iteration: usize,
    pub measure: String,
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// Evaluate the full cross-product of tasks, learner configs and resampling
/// strategies. Per-cell failures are recorded, not fatal.
pub fn benchmark(
    tasks: &[Task],
    configs: &[LearnerConfig],
    resamplings: &[Resampling],
    measures: &[Measure],
    seed: u64,
    exec: Execution,
) -> Result<Vec<BenchmarkRow>> {
    if tasks.is_empty() || configs.is_empty() || resamplings.is_empty() {
        return Err(Error::invalid("benchmark grid must be non-empty"));
    }
    let mut rows = Vec::new();
    let mut cell = 0u64;
    for task in tasks {
        for config in configs {
            for resampling_template in resamplings {
                cell += 1;
                let mut rng = RngState::new(seed).split(cell);
                let mut resampling = resampling_template.clone();
                let outcome = resampling
                    .instantiate(task, &mut rng)
                    .and_then(|()| resample(task, config, &resampling, measures, rng.next_u64(), exec));
                match outcome {
                    Ok(result) => {
                        for it in &result.iterations {
                            if let Some(err) = &it.error {
                                rows.push(BenchmarkRow {
                                    task_id: task.id.clone(),
                                    learner_id: config.id.clone(),
                                    resampling: resampling.describe(),
                                    iteration: it.iteration,
                                    measure: String::new(),
                                    score: None,
                                    error: Some(err.clone()),
                                });
                            } else {
                                for (measure, score) in &it.scores {
                                    rows.push(BenchmarkRow {
                                        task_id: task.id.clone(),
                                        learner_id: config.id.clone(),
                                        resampling: resampling.describe(),
                                        iteration: it.iteration,
                                        measure: measure.clone(),
                                        score: Some(*score),
                                        error: None,
                                    });
                                }
                            }
                        }
                    }
                    Err(e) => rows.push(BenchmarkRow {
                        task_id: task.id.clone(),
                        learner_id: config.id.clone(),
                        resampling: resampling_template.describe(),
                        iteration: 0,
                        measure: String::new(),
                        score: None,
                        error: Some(e.to_string()),
                    }),
                }
            }
        }
    }
    Ok(rows)
}
