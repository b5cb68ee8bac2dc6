use super::*;
use crate::data::{synth_multimodal, Column, MultimodalSpec, Task, TaskType};
use crate::learner::{LearnerConfig, Measure, TrainSettings};
use crate::nn::LossSpec;
use crate::optim::OptimConfig;
use crate::params::TuneSpec;
use std::sync::Arc;

fn regr_task(n: usize) -> Task {
    let mut rng = crate::rng::RngState::new(5);
    let x: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| 3.0 * v + rng.normal(0.0, 0.05)).collect();
    Task::new(
        "toy_regr",
        TaskType::Regr,
        vec![
            ("x".to_string(), Column::Numeric(Arc::new(x))),
            ("y".to_string(), Column::Numeric(Arc::new(y))),
        ],
        "y",
        None,
    )
    .unwrap()
}

fn tiny_mlp_config(epochs: usize) -> LearnerConfig {
    LearnerConfig::mlp(
        "mlp",
        vec![8],
        LossSpec::mse(),
        OptimConfig::adamw(0.01),
        vec![],
        TrainSettings { epochs, batch_size: 8, ..Default::default() },
    )
}

#[test]
fn holdout_two_thirds_of_thirty_rows() {
    let task = regr_task(30);
    let mut resampling = Resampling::holdout(2.0 / 3.0);
    resampling.instantiate(&task, &mut crate::rng::RngState::new(1)).unwrap();
    let (train, test) = &resampling.splits()[0];
    assert_eq!(train.len(), 20);
    assert_eq!(test.len(), 10);
    // disjoint
    assert!(train.iter().all(|r| !test.contains(r)));
}

#[test]
fn cv_folds_partition_all_rows() {
    let task = regr_task(25);
    let mut resampling = Resampling::cv(3);
    resampling.instantiate(&task, &mut crate::rng::RngState::new(2)).unwrap();
    assert_eq!(resampling.iterations(), 3);
    let mut all_test: Vec<usize> = resampling
        .splits()
        .iter()
        .flat_map(|(_, test)| test.clone())
        .collect();
    all_test.sort_unstable();
    assert_eq!(all_test, (0..25).collect::<Vec<_>>(), "test folds partition the rows");
    for (train, test) in resampling.splits() {
        assert!(train.iter().all(|r| !test.contains(r)), "train and test disjoint");
    }
}

#[test]
fn grouped_splits_never_straddle_a_group() {
    let task = synth_multimodal(&MultimodalSpec { n: 60, ..Default::default() }).unwrap();
    let groups = task.group_codes().unwrap().unwrap();
    for kind in [Resampling::holdout(0.5), Resampling::cv(3), Resampling::partition(0.75)] {
        let mut resampling = kind;
        resampling.instantiate(&task, &mut crate::rng::RngState::new(3)).unwrap();
        for (train, test) in resampling.splits() {
            let group_of = |row: usize| groups[task.row_ids().iter().position(|&r| r == row).unwrap()];
            let train_groups: std::collections::BTreeSet<u64> =
                train.iter().map(|&r| group_of(r)).collect();
            let test_groups: std::collections::BTreeSet<u64> =
                test.iter().map(|&r| group_of(r)).collect();
            assert!(
                train_groups.is_disjoint(&test_groups),
                "a group straddles the {} split",
                resampling.describe()
            );
        }
    }
}

#[test]
fn resample_scores_each_fold_and_aggregates() {
    let task = regr_task(30);
    let config = tiny_mlp_config(30);
    let mut resampling = Resampling::cv(3);
    resampling.instantiate(&task, &mut crate::rng::RngState::new(4)).unwrap();
    let result = resample(
        &task,
        &config,
        &resampling,
        &[Measure::Mse],
        7,
        crate::exec::Execution::Sequential,
    )
    .unwrap();
    assert_eq!(result.iterations.len(), 3);
    assert_eq!(result.failed(), 0);
    let covered: usize = result
        .iterations
        .iter()
        .map(|it| it.prediction.as_ref().unwrap().len())
        .sum();
    assert_eq!(covered, 30, "cv predictions cover all rows exactly once");
    let aggregate = result.aggregate("regr.mse").unwrap();
    assert!(aggregate.is_finite());
}

#[test]
fn parallel_and_sequential_resampling_agree() {
    let task = regr_task(24);
    let config = tiny_mlp_config(10);
    let mut resampling = Resampling::cv(3);
    resampling.instantiate(&task, &mut crate::rng::RngState::new(6)).unwrap();
    let seq = resample(&task, &config, &resampling, &[Measure::Mse], 11, crate::exec::Execution::Sequential)
        .unwrap();
    let par = resample(&task, &config, &resampling, &[Measure::Mse], 11, crate::exec::Execution::Parallel)
        .unwrap();
    for (a, b) in seq.iterations.iter().zip(&par.iterations) {
        assert_eq!(a.scores, b.scores, "fold scores identical across execution modes");
    }
}

#[test]
fn random_search_respects_bounds_and_term_evals() {
    let task = regr_task(24);
    let mut learner = crate::learner::Learner::new(tiny_mlp_config(5));
    learner.tune_param("opt.lr", TuneSpec::FloatRange { lo: 1e-4, hi: 1e-1, logscale: true })
        .unwrap();
    learner.tune_param("batch_size", TuneSpec::IntRange { lo: 4, hi: 16 }).unwrap();
    let config = learner.config.clone();
    let mut resampling = Resampling::holdout(0.7);
    resampling.instantiate(&task, &mut crate::rng::RngState::new(8)).unwrap();
    let result = tune_random_search(
        &task,
        &config,
        &resampling,
        &TuneMeasure::External(Measure::Mse),
        12,
        42,
        crate::exec::Execution::Sequential,
    )
    .unwrap();
    assert_eq!(result.archive.len(), 12, "exactly term_evals evaluations recorded");
    for eval in &result.archive {
        let lr = eval.values["opt.lr"].as_float().unwrap();
        let bs = eval.values["batch_size"].as_int().unwrap();
        assert!((1e-4..=1e-1).contains(&lr));
        assert!((4..=16).contains(&bs));
    }
    let best = &result.archive[result.best_index];
    assert_eq!(best.score, Some(result.best_score));
    // best is the minimum over successful evaluations
    for eval in &result.archive {
        if let Some(s) = eval.score {
            assert!(result.best_score <= s);
        }
    }
}

#[test]
fn tuner_reproducibility_same_seed_same_archive() {
    let task = regr_task(20);
    let mut learner = crate::learner::Learner::new(tiny_mlp_config(4));
    learner.tune_param("opt.lr", TuneSpec::FloatRange { lo: 1e-3, hi: 1e-1, logscale: true })
        .unwrap();
    let config = learner.config.clone();
    let mut resampling = Resampling::holdout(0.7);
    resampling.instantiate(&task, &mut crate::rng::RngState::new(9)).unwrap();
    let run = |seed: u64| {
        tune_random_search(
            &task,
            &config,
            &resampling,
            &TuneMeasure::External(Measure::Mse),
            5,
            seed,
            crate::exec::Execution::Sequential,
        )
        .unwrap()
    };
    let a = run(123);
    let b = run(123);
    assert_eq!(a.best_index, b.best_index);
    for (ea, eb) in a.archive.iter().zip(&b.archive) {
        assert_eq!(ea.values, eb.values);
        assert_eq!(ea.score, eb.score);
    }
}

#[test]
fn degenerate_space_returns_that_configuration() {
    let task = regr_task(16);
    let mut learner = crate::learner::Learner::new(tiny_mlp_config(3));
    learner.tune_param("batch_size", TuneSpec::IntRange { lo: 8, hi: 8 }).unwrap();
    let config = learner.config.clone();
    let mut resampling = Resampling::holdout(0.75);
    resampling.instantiate(&task, &mut crate::rng::RngState::new(10)).unwrap();
    let result = tune_random_search(
        &task,
        &config,
        &resampling,
        &TuneMeasure::External(Measure::Mse),
        3,
        0,
        crate::exec::Execution::Sequential,
    )
    .unwrap();
    assert_eq!(result.best_values["batch_size"], crate::params::ParamValue::Int(8));
}

#[test]
fn benchmark_grid_accounting_and_failure_isolation() {
    let task = regr_task(20);
    let good = tiny_mlp_config(3);
    // classification loss on a regression task fails upfront
    let mut bad = tiny_mlp_config(3);
    bad.id = "bad".into();
    if let crate::learner::LearnerSpec::Torch(spec) = &mut bad.spec {
        spec.loss = LossSpec::cross_entropy();
    }
    let mut resampling = Resampling::holdout(0.7);
    resampling.instantiate(&task, &mut crate::rng::RngState::new(11)).unwrap();
    let rows = benchmark(
        &[task],
        &[good, bad],
        &[resampling],
        &[Measure::Mse],
        5,
        crate::exec::Execution::Sequential,
    )
    .unwrap();
    let ok_rows: Vec<_> = rows.iter().filter(|r| r.error.is_none()).collect();
    let failed_rows: Vec<_> = rows.iter().filter(|r| r.error.is_some()).collect();
    assert_eq!(ok_rows.len(), 1, "one aggregate row per good cell iteration/measure");
    assert_eq!(ok_rows[0].learner_id, "mlp");
    assert_eq!(failed_rows.len(), 1, "failing learner recorded, not fatal");
    assert_eq!(failed_rows[0].learner_id, "bad");
}
