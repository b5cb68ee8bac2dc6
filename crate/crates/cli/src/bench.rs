//! Runtime-overhead harness: the same MLP training workload measured twice
//! per grid cell — once as a hand-written epoch/batch loop directly over the
//! tensor and optimizer layers, once through the full learner path — with
//! warm-up epochs excluded and per-batch times aggregated over repetitions.

use crate::config::BenchConfig;
use anyhow::{bail, Result};
use pipegrad::data::{synth_regression, Column, Task};
use pipegrad::learner::{
    Callback, CallbackConfig, Learner, LearnerConfig, ModelState, TrainContext, TrainSettings,
};
use pipegrad::nn::{Linear, LossSpec, LossTarget};
use pipegrad::optim::{OptimConfig, OptimKind, Optimizer};
use pipegrad::rng::RngState;
use pipegrad::tensor::Tensor;
use std::sync::{Arc, Mutex};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub optimizer: String,
    pub latent: usize,
    pub layers: usize,
    pub implementation: String,
    /// Per-batch milliseconds over the measured epochs; statistics taken
    /// over the repetitions.
    pub median_ms: f64,
    pub q10_ms: f64,
    pub q90_ms: f64,
    pub skipped: bool,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn summarize(per_rep_ms: &[f64]) -> (f64, f64, f64) {
    let mut sorted = per_rep_ms.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (quantile(&sorted, 0.5), quantile(&sorted, 0.1), quantile(&sorted, 0.9))
}

fn optim_config(kind: OptimKind) -> OptimConfig {
    match kind {
        OptimKind::Sgd => OptimConfig::sgd(0.01),
        OptimKind::AdamW => OptimConfig::adamw(1e-3),
    }
}

/// Approximate working-set size of one cell; implausibly large cells are
/// skipped with a marker instead of failing the whole run.
fn estimated_bytes(d: usize, latent: usize, layers: usize) -> usize {
    let params = if layers == 0 {
        d + 1
    } else {
        d * latent + latent * latent * layers.saturating_sub(1) + latent
    };
    // parameters + gradients + two optimizer moments, f32
    params * 4 * 4
}

const SKIP_BYTES: usize = 6 * 1024 * 1024 * 1024;

/// Hand-written training loop on raw tensors: feature matrix slices, explicit
/// forward/backward and optimizer stepping. Returns mean ms per measured
/// batch.
#[allow(clippy::too_many_arguments)]
fn raw_loop_run(
    features: &[f32],
    targets: &[f32],
    n: usize,
    d: usize,
    latent: usize,
    layers: usize,
    optimizer_kind: OptimKind,
    config: &BenchConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = RngState::new(seed);
    // network: d -> latent x layers -> 1 (layers == 0 is a single affine map)
    let mut linears: Vec<Linear<f32>> = Vec::new();
    let mut widths = vec![d];
    widths.extend(std::iter::repeat_n(latent, layers));
    widths.push(1);
    for w in widths.windows(2) {
        linears.push(Linear::new(w[0], w[1], &mut rng)?);
    }
    let params: Vec<(String, Tensor<f32>)> = linears
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [(format!("{i}.weight"), l.weight.clone()), (format!("{i}.bias"), l.bias.clone())]
        })
        .collect();
    let mut optimizer = Optimizer::new(optim_config(optimizer_kind))?;
    let loss_spec = LossSpec::mse();
    let batch = config.batch_size;
    let total_epochs = config.warmup_epochs + config.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut measured = 0.0f64;
    let mut measured_batches = 0usize;
    for epoch in 0..total_epochs {
        rng.shuffle(&mut order);
        let start = Instant::now();
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            let mut x = vec![0.0f32; b * d];
            let mut y = vec![0.0f32; b];
            for (bi, &row) in chunk.iter().enumerate() {
                x[bi * d..(bi + 1) * d].copy_from_slice(&features[row * d..(row + 1) * d]);
                y[bi] = targets[row];
            }
            let x = Tensor::from_vec(&[b, d], x)?;
            let y = Tensor::from_vec(&[b, 1], y)?;
            for (_, p) in &params {
                p.zero_grad();
            }
            let mut h = x;
            for (i, l) in linears.iter().enumerate() {
                h = l.forward(&h)?;
                if i + 1 < linears.len() {
                    h = h.relu();
                }
            }
            let loss = pipegrad::nn::loss_forward(&loss_spec, &h, &LossTarget::Values(&y))?;
            loss.backward()?;
            optimizer.step(&params)?;
            if epoch >= config.warmup_epochs {
                measured_batches += 1;
            }
        }
        if epoch >= config.warmup_epochs {
            measured += start.elapsed().as_secs_f64();
        }
    }
    Ok(measured * 1e3 / measured_batches.max(1) as f64)
}

/// Identical workload through the learner path, timed per epoch by a
/// callback so warm-up epochs can be excluded.
fn framework_run(
    task: &Task,
    latent: usize,
    layers: usize,
    optimizer_kind: OptimKind,
    config: &BenchConfig,
    seed: u64,
) -> Result<f64> {
    let epoch_times: Arc<Mutex<Vec<f64>>> = Arc::new(Mutex::new(Vec::new()));
    struct EpochTimer {
        times: Arc<Mutex<Vec<f64>>>,
        started: Option<Instant>,
    }
    impl Callback for EpochTimer {
        fn id(&self) -> &str {
            "epoch_timer"
        }
        fn on_epoch_begin(&mut self, _: &mut TrainContext<'_>) -> pipegrad::Result<()> {
            self.started = Some(Instant::now());
            Ok(())
        }
        fn on_epoch_end(&mut self, _: &mut TrainContext<'_>) -> pipegrad::Result<()> {
            if let Some(start) = self.started.take() {
                self.times.lock().unwrap().push(start.elapsed().as_secs_f64());
            }
            Ok(())
        }
    }
    let times = Arc::clone(&epoch_times);
    let timer = CallbackConfig::Custom {
        id: "epoch_timer".into(),
        factory: Arc::new(move || {
            Box::new(EpochTimer { times: Arc::clone(&times), started: None })
        }),
    };
    let neurons: Vec<i64> = std::iter::repeat_n(latent as i64, layers).collect();
    let settings = TrainSettings {
        epochs: config.warmup_epochs + config.epochs,
        batch_size: config.batch_size,
        seed,
        ..Default::default()
    };
    let mut learner_config = LearnerConfig::mlp(
        "bench_mlp",
        neurons,
        LossSpec::mse(),
        optim_config(optimizer_kind),
        vec![timer],
        settings,
    );
    // dropout off so both routes run the same arithmetic
    if let pipegrad::learner::LearnerSpec::Torch(spec) = &mut learner_config.spec {
        if let pipegrad::learner::ArchSpec::Mlp { p, .. } = &mut spec.arch {
            *p = 0.0;
        }
    }
    let mut learner = Learner::new(learner_config);
    learner.train(task, None)?;
    // keep the model alive until timings are read
    let _ = matches!(learner.model, Some(ModelState::Live(_)));
    let times = epoch_times.lock().unwrap().clone();
    if times.len() != config.warmup_epochs + config.epochs {
        bail!("epoch timer recorded {} epochs", times.len());
    }
    let n = task.n_rows();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let measured: f64 = times[config.warmup_epochs..].iter().sum();
    Ok(measured * 1e3 / (config.epochs * batches_per_epoch) as f64)
}

/// Run the full grid; one row per (cell, implementation).
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchCell>> {
    if config.layers.is_empty() || config.latent.is_empty() || config.optimizers.is_empty() {
        bail!("benchmark grid must be non-empty");
    }
    if config.threads != 1 {
        bail!("the benchmark protocol pins computation to one thread");
    }
    let mut rng = RngState::new(config.seed);
    let task = synth_regression(config.n, config.d, &mut rng)?;
    // flatten features once for the raw loop
    let n = task.n_rows();
    let d = config.d;
    let mut features = vec![0.0f32; n * d];
    for (j, name) in task.feature_names().iter().enumerate() {
        let Column::Numeric(v) = task.column(name)? else { unreachable!() };
        for i in 0..n {
            features[i * d + j] = v[i] as f32;
        }
    }
    let targets: Vec<f32> = task.target_values()?.iter().map(|&v| v as f32).collect();

    let mut rows = Vec::new();
    for optimizer in &config.optimizers {
        let kind: OptimKind = optimizer.parse()?;
        for &latent in &config.latent {
            for &layers in &config.layers {
                if estimated_bytes(d, latent, layers) > SKIP_BYTES {
                    for implementation in ["raw", "framework"] {
                        rows.push(BenchCell {
                            optimizer: optimizer.clone(),
                            latent,
                            layers,
                            implementation: implementation.into(),
                            median_ms: f64::NAN,
                            q10_ms: f64::NAN,
                            q90_ms: f64::NAN,
                            skipped: true,
                        });
                    }
                    continue;
                }
                let mut raw_ms = Vec::with_capacity(config.repetitions);
                let mut framework_ms = Vec::with_capacity(config.repetitions);
                for rep in 0..config.repetitions {
                    let seed = RngState::new(config.seed).split(rep as u64).next_u64();
                    raw_ms.push(raw_loop_run(
                        &features, &targets, n, d, latent, layers, kind, config, seed,
                    )?);
                    framework_ms.push(framework_run(&task, latent, layers, kind, config, seed)?);
                }
                for (implementation, samples) in
                    [("raw", &raw_ms), ("framework", &framework_ms)]
                {
                    let (median, q10, q90) = summarize(samples);
                    rows.push(BenchCell {
                        optimizer: optimizer.clone(),
                        latent,
                        layers,
                        implementation: implementation.into(),
                        median_ms: median,
                        q10_ms: q10,
                        q90_ms: q90,
                        skipped: false,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Median framework/raw overhead ratios per cell.
pub fn overhead_ratios(rows: &[BenchCell]) -> Vec<(String, usize, usize, f64)> {
    let mut out = Vec::new();
    for row in rows.iter().filter(|r| r.implementation == "framework" && !r.skipped) {
        if let Some(raw) = rows.iter().find(|r| {
            r.implementation == "raw"
                && r.optimizer == row.optimizer
                && r.latent == row.latent
                && r.layers == row.layers
                && !r.skipped
        }) {
            out.push((row.optimizer.clone(), row.latent, row.layers, row.median_ms / raw.median_ms));
        }
    }
    out
}
