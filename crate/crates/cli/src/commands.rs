//! Command implementations: each produces its artifacts under the output
//! directory and returns the number of failed runs/cells.

use crate::bench::{overhead_ratios, run_bench, BenchCell};
use crate::build::{build_learner, build_resampling, build_task};
use crate::config::{BenchConfig, ExperimentConfig};
use anyhow::{anyhow, bail, Context, Result};
use pipegrad::exec::Execution;
use pipegrad::learner::{roc_points, Measure, Prediction};
use pipegrad::rng::RngState;
use pipegrad::tune::{resample, tune_random_search, TuneMeasure};
use std::path::Path;

fn parse_measures(names: &[String]) -> Result<Vec<Measure>> {
    names.iter().map(|n| Ok(n.parse::<Measure>()?)).collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    csv::Writer::from_path(path).with_context(|| path.display().to_string())
}

/// Train per config: marshaled model file, per-epoch training log, metrics
/// CSV.
pub fn cmd_train(config: &ExperimentConfig, out: &Path, exec: Execution) -> Result<usize> {
    let _ = exec;
    let task = build_task(config, config.seed)?;
    let mut learner = build_learner(config)?;
    learner.train(&task, None)?;

    std::fs::create_dir_all(out)?;
    let model_bytes = learner.marshaled_bytes()?;
    std::fs::write(out.join("model.bin"), &model_bytes)?;
    learner.unmarshal()?;

    // per-epoch structured log + metrics CSV from the loop's own record
    let history = learner.epoch_log();
    let mut log = String::new();
    if let Some(history) = &history {
        let mut columns: Vec<String> = Vec::new();
        for (_, scores) in &history.rows {
            for (name, _) in scores {
                if !columns.contains(name) {
                    columns.push(name.clone());
                }
            }
        }
        let mut writer = csv_writer(&out.join("metrics.csv"))?;
        let mut header = vec!["epoch".to_string()];
        header.extend(columns.clone());
        writer.write_record(&header)?;
        for (epoch, scores) in &history.rows {
            let mut record = vec![epoch.to_string()];
            let mut line = format!("epoch={epoch}");
            for column in &columns {
                match scores.iter().find(|(n, _)| n == column) {
                    Some((_, v)) => {
                        record.push(format!("{v}"));
                        line.push_str(&format!(" {column}={v}"));
                    }
                    None => record.push(String::new()),
                }
            }
            writer.write_record(&record)?;
            log.push_str(&line);
            log.push('\n');
        }
        writer.flush()?;
    }
    std::fs::write(out.join("train_log.txt"), log)?;
    Ok(0)
}

/// Tune per config: archive CSV plus the best configuration echoed in
/// `* name = value` lines.
pub fn cmd_tune(config: &ExperimentConfig, out: &Path, exec: Execution) -> Result<usize> {
    let tuning = config
        .tuning
        .as_ref()
        .ok_or_else(|| anyhow!("tune requires a `tuning` block"))?;
    let task = build_task(config, config.seed)?;
    let learner = build_learner(config)?;
    let mut resampling = build_resampling(&tuning.resampling)?;
    resampling.instantiate(&task, &mut RngState::new(config.seed).split(1))?;
    let measure = if tuning.measure == "internal_valid_score" {
        TuneMeasure::InternalValidScore { minimize: true }
    } else {
        TuneMeasure::External(tuning.measure.parse()?)
    };
    let result = tune_random_search(
        &task,
        &learner.config,
        &resampling,
        &measure,
        tuning.term_evals,
        config.seed,
        exec,
    )?;

    std::fs::create_dir_all(out)?;
    let mut writer = csv_writer(&out.join("archive.csv"))?;
    writer.write_record(["eval", "measure", "score", "internal_epochs", "params", "error"])?;
    let mut failed = 0usize;
    for eval in &result.archive {
        if eval.error.is_some() {
            failed += 1;
        }
        let params: Vec<String> =
            eval.values.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writer.write_record([
            eval.index.to_string(),
            measure.id(),
            eval.score.map(|s| s.to_string()).unwrap_or_default(),
            eval.internal_tuned_epochs.map(|e| e.to_string()).unwrap_or_default(),
            params.join(";"),
            eval.error.clone().unwrap_or_default(),
        ])?;
    }
    writer.flush()?;

    let mut best = String::new();
    for (name, value) in &result.best_values {
        best.push_str(&format!("* {name} = {value}\n"));
    }
    std::fs::write(out.join("best_config.txt"), best)?;
    Ok(failed)
}

/// Resample per config: score table CSV and, when requested, ROC points.
pub fn cmd_resample(config: &ExperimentConfig, out: &Path, exec: Execution) -> Result<usize> {
    let resampling_config = config
        .resampling
        .as_ref()
        .ok_or_else(|| anyhow!("resample requires a `resampling` block"))?;
    let task = build_task(config, config.seed)?;
    let learner = build_learner(config)?;
    let measures = parse_measures(&config.measures)?;
    let mut resampling = build_resampling(resampling_config)?;
    resampling.instantiate(&task, &mut RngState::new(config.seed).split(1))?;
    let result = resample(&task, &learner.config, &resampling, &measures, config.seed, exec)?;

    std::fs::create_dir_all(out)?;
    let mut writer = csv_writer(&out.join("scores.csv"))?;
    writer.write_record(["task", "learner", "iteration", "measure", "score"])?;
    let mut failed = 0usize;
    for it in &result.iterations {
        if let Some(err) = &it.error {
            failed += 1;
            writer.write_record([
                task.id.as_str(),
                learner.config.id.as_str(),
                &it.iteration.to_string(),
                "error",
                err,
            ])?;
            continue;
        }
        for (measure, score) in &it.scores {
            writer.write_record([
                task.id.as_str(),
                learner.config.id.as_str(),
                &it.iteration.to_string(),
                measure,
                &score.to_string(),
            ])?;
        }
    }
    // aggregate rows
    for measure in &measures {
        if let Ok(value) = result.aggregate(&measure.id()) {
            writer.write_record([
                task.id.as_str(),
                learner.config.id.as_str(),
                "aggregate",
                &measure.id(),
                &value.to_string(),
            ])?;
        }
    }
    writer.flush()?;

    if config.roc {
        let prediction = result
            .iterations
            .iter()
            .find_map(|it| it.prediction.as_ref())
            .ok_or_else(|| anyhow!("roc requested but every iteration failed"))?;
        write_roc(prediction, &out.join("roc.csv"))?;
    }
    Ok(failed)
}

pub fn write_roc(prediction: &Prediction, path: &Path) -> Result<()> {
    let points = roc_points(prediction)?;
    let mut writer = csv_writer(path)?;
    writer.write_record(["threshold", "fpr", "tpr"])?;
    for (threshold, fpr, tpr) in points {
        writer.write_record([threshold.to_string(), fpr.to_string(), tpr.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Benchmark per config: per-batch timing CSV plus overhead ratios.
pub fn cmd_bench(config: &BenchConfig, out: &Path) -> Result<usize> {
    let rows = run_bench(config)?;
    std::fs::create_dir_all(out)?;
    write_bench_csv(&rows, &out.join("bench.csv"))?;
    let ratios = overhead_ratios(&rows);
    let mut writer = csv_writer(&out.join("overhead.csv"))?;
    writer.write_record(["optimizer", "latent", "layers", "framework_over_raw"])?;
    for (optimizer, latent, layers, ratio) in &ratios {
        writer.write_record([
            optimizer.clone(),
            latent.to_string(),
            layers.to_string(),
            ratio.to_string(),
        ])?;
        println!("overhead {optimizer} latent={latent} layers={layers}: {ratio:.3}");
    }
    writer.flush()?;
    Ok(rows.iter().filter(|r| r.skipped).count())
}

pub fn write_bench_csv(rows: &[BenchCell], path: &Path) -> Result<()> {
    let mut writer = csv_writer(path)?;
    writer.write_record([
        "optimizer",
        "latent",
        "layers",
        "implementation",
        "median_ms_per_batch",
        "q10_ms_per_batch",
        "q90_ms_per_batch",
        "skipped",
    ])?;
    for row in rows {
        writer.write_record([
            row.optimizer.clone(),
            row.latent.to_string(),
            row.layers.to_string(),
            row.implementation.clone(),
            if row.skipped { String::new() } else { row.median_ms.to_string() },
            if row.skipped { String::new() } else { row.q10_ms.to_string() },
            if row.skipped { String::new() } else { row.q90_ms.to_string() },
            row.skipped.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Shared entry used by main and the integration tests.
pub fn run(
    command: &str,
    config_path: &Path,
    seed: Option<u64>,
    threads: usize,
    out: Option<&Path>,
    synth: Option<&str>,
) -> Result<usize> {
    let exec = if threads <= 1 { Execution::Sequential } else { Execution::Parallel };
    if command == "bench" {
        let mut config = crate::config::load_bench(config_path)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let out = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| std::path::PathBuf::from("out"));
        return cmd_bench(&config, &out);
    }
    let mut config = crate::config::load_experiment(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(synth) = synth {
        config.data = match synth {
            "regr" => crate::config::DataConfig::Synthetic(crate::config::SynthConfig::Regr {
                n: 2000,
                d: 1000,
            }),
            "multimodal" => {
                crate::config::DataConfig::Synthetic(crate::config::SynthConfig::Multimodal {
                    n: 500,
                    image_shape: [3, 16, 16],
                    positive_ratio: 0.1,
                    missing_ratio: 0.08,
                })
            }
            other => bail!("unknown synthetic data kind `{other}`"),
        };
    }
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| std::path::PathBuf::from("out"));
    pipegrad::exec::with_thread_pool(threads, || match command {
        "train" => cmd_train(&config, &out, exec),
        "tune" => cmd_tune(&config, &out, exec),
        "resample" => cmd_resample(&config, &out, exec),
        other => bail!("unknown command `{other}`"),
    })
}
