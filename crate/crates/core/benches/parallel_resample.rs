//! Criterion comparison of the rayon-backed parallel driver loops against
//! the sequential fallback, on resampling folds and tuning evaluations.
//! With the `parallel` feature disabled both arms run the same sequential
//! code.

use criterion::{criterion_group, criterion_main, Criterion};
use pipegrad::data::{Column, Task, TaskType};
use pipegrad::exec::Execution;
use pipegrad::learner::{Learner, LearnerConfig, Measure, TrainSettings};
use pipegrad::nn::LossSpec;
use pipegrad::optim::OptimConfig;
use pipegrad::params::TuneSpec;
use pipegrad::rng::RngState;
use pipegrad::tune::{resample, tune_random_search, Resampling, TuneMeasure};
use std::hint::black_box;
use std::sync::Arc;

fn regression_task(n: usize, d: usize) -> Task {
    let mut rng = RngState::new(11);
    let mut columns: Vec<(String, Column)> = (0..d)
        .map(|j| {
            let v: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
            (format!("x{j}"), Column::Numeric(Arc::new(v)))
        })
        .collect();
    let y: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
    columns.push(("y".to_string(), Column::Numeric(Arc::new(y))));
    Task::new("bench", TaskType::Regr, columns, "y", None).unwrap()
}

fn mlp_config() -> LearnerConfig {
    LearnerConfig::mlp(
        "mlp",
        vec![32],
        LossSpec::mse(),
        OptimConfig::adamw(0.01),
        vec![],
        TrainSettings { epochs: 8, batch_size: 32, ..Default::default() },
    )
}

fn bench_resample(c: &mut Criterion) {
    let task = regression_task(256, 16);
    let config = mlp_config();
    let mut resampling = Resampling::cv(4);
    resampling.instantiate(&task, &mut RngState::new(3)).unwrap();
    let mut group = c.benchmark_group("resample_cv4");
    group.sample_size(10);
    for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
    {
        group.bench_function(label, |b| {
            b.iter(|| {
                let result =
                    resample(&task, &config, &resampling, &[Measure::Mse], 5, exec).unwrap();
                black_box(result.aggregate("regr.mse").unwrap())
            })
        });
    }
    group.finish();
}

fn bench_tuning(c: &mut Criterion) {
    let task = regression_task(128, 8);
    let mut learner = Learner::new(mlp_config());
    learner
        .tune_param("opt.lr", TuneSpec::FloatRange { lo: 1e-3, hi: 1e-1, logscale: true })
        .unwrap();
    let config = learner.config.clone();
    let mut resampling = Resampling::holdout(0.75);
    resampling.instantiate(&task, &mut RngState::new(4)).unwrap();
    let mut group = c.benchmark_group("random_search_8evals");
    group.sample_size(10);
    for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
    {
        group.bench_function(label, |b| {
            b.iter(|| {
                let result = tune_random_search(
                    &task,
                    &config,
                    &resampling,
                    &TuneMeasure::External(Measure::Mse),
                    8,
                    9,
                    exec,
                )
                .unwrap();
                black_box(result.best_score)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_resample, bench_tuning);
criterion_main!(benches);
