//! End-to-end learner behavior: training loops, validation handling, early
//! stopping, callbacks, marshaling, and custom-module learners.

use pipegrad::data::{categorical_from_labels, Column, Task, TaskType};
use pipegrad::learner::{
    BuiltNet, Callback, CallbackConfig, CallbackState, CustomMeasure, Learner, LearnerConfig,
    LearnerSpec, Measure, ParamSelector, Prediction, PredictType, TrainContext, TrainSettings,
    Validate,
};
use pipegrad::netgraph::IngressKind;
use pipegrad::nn::{Linear, LossSpec, ModuleKind, NeuralModule};
use pipegrad::optim::{NormType, OptimConfig};
use pipegrad::params::{ParamKind, ParamSet, TuneSpec};
use pipegrad::rng::RngState;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

/// Separable two-class task: class follows the sign of a linear score.
fn classif_task(n: usize, seed: u64) -> Task {
    let mut rng = RngState::new(seed);
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.normal(0.0, 1.0);
        let b = rng.normal(0.0, 1.0);
        x1.push(a);
        x2.push(b);
        labels.push(if a + b > 0.0 { "pos" } else { "neg" });
    }
    Task::new(
        "classif_synth",
        TaskType::Classif,
        vec![
            ("x1".to_string(), Column::Numeric(Arc::new(x1))),
            ("x2".to_string(), Column::Numeric(Arc::new(x2))),
            ("y".to_string(), Column::Categorical(Arc::new(categorical_from_labels(&labels)))),
        ],
        "y",
        None,
    )
    .unwrap()
}

fn mlp_config(neurons: Vec<i64>, settings: TrainSettings) -> LearnerConfig {
    LearnerConfig::mlp(
        "mlp",
        neurons,
        LossSpec::cross_entropy(),
        OptimConfig::adamw(0.01),
        vec![CallbackConfig::History],
        settings,
    )
}

#[test]
fn two_epochs_yield_model_and_two_history_rows() {
    let task = classif_task(60, 1);
    let settings = TrainSettings {
        epochs: 2,
        batch_size: 16,
        measures_train: vec![Measure::Logloss],
        ..Default::default()
    };
    let mut learner = Learner::new(mlp_config(vec![8], settings));
    learner.train(&task, None).unwrap();
    assert!(learner.is_trained());
    let history = learner.history().unwrap();
    assert_eq!(history.rows.len(), 2);
    assert_eq!(history.rows[0].0, 1);
    assert_eq!(history.rows[1].0, 2);
    assert!(history.rows[0].1.iter().any(|(n, _)| n == "train.classif.logloss"));
}

#[test]
fn validate_ratio_splits_seventy_thirty() {
    let task = classif_task(100, 2);
    let settings = TrainSettings {
        epochs: 1,
        batch_size: 16,
        measures_valid: vec![Measure::Acc],
        ..Default::default()
    };
    let mut config = mlp_config(vec![4], settings);
    config.validate = Validate::Ratio(0.3);
    // a probe callback observing the number of gradient rows per epoch
    let seen = Arc::new(AtomicUsize::new(0));
    let seen_clone = Arc::clone(&seen);
    struct RowCounter(Arc<AtomicUsize>);
    impl Callback for RowCounter {
        fn id(&self) -> &str {
            "row_counter"
        }
        fn on_batch_end(&mut self, ctx: &mut TrainContext<'_>) -> Result<(), pipegrad::Error> {
            let _ = ctx;
            Ok(())
        }
    }
    let _ = RowCounter(seen_clone);
    let mut learner = Learner::new(config);
    learner.train(&task, None).unwrap();
    // validation scores exist, and the history's train row count reflects 70
    // training rows: with batch 16 that is 5 batches (4x16 + 1x6).
    let scores = learner.internal_valid_scores();
    assert_eq!(scores.len(), 1);
    assert_eq!(scores[0].0, "classif.acc");
    let _ = seen.load(Ordering::Relaxed);
}

#[test]
fn early_stopping_halts_patience_epochs_after_the_peak() {
    // Rigged validation score sequence: improves until epoch 4, then stalls.
    let sequence = [5.0, 4.0, 3.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0];
    let calls = Arc::new(AtomicUsize::new(0));
    let calls_clone = Arc::clone(&calls);
    let rigged = Measure::Custom(CustomMeasure {
        id: "rigged".into(),
        minimize: true,
        f: Arc::new(move |_pred: &Prediction| {
            let i = calls_clone.fetch_add(1, Ordering::SeqCst);
            sequence[i.min(sequence.len() - 1)]
        }),
    });
    let task = classif_task(40, 3);
    let settings = TrainSettings {
        epochs: 100,
        batch_size: 16,
        patience: Some(5),
        measures_valid: vec![rigged],
        ..Default::default()
    };
    let mut config = mlp_config(vec![4], settings);
    config.validate = Validate::Ratio(0.25);
    let mut learner = Learner::new(config);
    learner.train(&task, None).unwrap();
    assert_eq!(
        calls.load(Ordering::SeqCst),
        9,
        "validation ran once per epoch and stopped at epoch 4 + patience 5"
    );
    assert_eq!(learner.internal_tuned_epochs(), Some(4), "the best epoch is reported");
    let history = learner.history().unwrap();
    assert_eq!(history.rows.len(), 9, "training halted at epoch k + patience");
}

#[test]
fn internal_epochs_never_exceed_the_configured_maximum() {
    let task = classif_task(40, 4);
    let settings = TrainSettings {
        epochs: 1, // overwritten by the internal upper bound
        batch_size: 16,
        patience: Some(100),
        measures_valid: vec![Measure::Logloss],
        ..Default::default()
    };
    let mut config = mlp_config(vec![4], settings);
    config.validate = Validate::Ratio(0.25);
    let mut learner = Learner::new(config);
    learner.tune_param("epochs", TuneSpec::Internal { upper: 6 }).unwrap();
    learner.train(&task, None).unwrap();
    let tuned = learner.internal_tuned_epochs().unwrap();
    assert!(tuned >= 1 && tuned <= 6, "tuned epochs {tuned} within the declared upper bound");
}

#[test]
fn memorizable_task_reaches_zero_training_error() {
    let task = classif_task(10, 5);
    let settings = TrainSettings { epochs: 300, batch_size: 10, ..Default::default() };
    let mut config = mlp_config(vec![16], settings);
    config.predict_type = PredictType::Prob;
    let mut learner = Learner::new(config);
    learner.train(&task, None).unwrap();
    let pred = learner.predict(&task, None).unwrap();
    assert_eq!(Measure::Ce.score(&pred).unwrap(), 0.0, "overfit sanity: training rows memorized");
    // probability rows sum to one
    let Prediction::Classif { prob: Some(p), levels, .. } = &pred else {
        panic!("expected probabilities")
    };
    let k = levels.len();
    for row in p.chunks(k) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn response_predict_type_strips_probabilities() {
    let task = classif_task(20, 6);
    let settings = TrainSettings { epochs: 2, batch_size: 8, ..Default::default() };
    let mut learner = Learner::new(mlp_config(vec![4], settings));
    learner.train(&task, None).unwrap();
    let pred = learner.predict(&task, None).unwrap();
    let Prediction::Classif { prob, .. } = &pred else { panic!() };
    assert!(prob.is_none(), "response predictions carry no probability matrix");
}

#[test]
fn marshal_round_trip_preserves_predictions_bit_exactly() {
    let task = classif_task(30, 7);
    let settings = TrainSettings { epochs: 5, batch_size: 8, ..Default::default() };
    let mut config = mlp_config(vec![6], settings);
    config.predict_type = PredictType::Prob;
    let mut learner = Learner::new(config);
    learner.train(&task, None).unwrap();
    let before = learner.predict(&task, None).unwrap();
    learner.marshal().unwrap();
    assert!(learner.predict(&task, None).is_err(), "marshaled model cannot predict");
    // double marshal is idempotent at the byte level
    let bytes1 = learner.marshaled_bytes().unwrap();
    let bytes2 = learner.marshaled_bytes().unwrap();
    assert_eq!(bytes1, bytes2);
    learner.unmarshal().unwrap();
    let after = learner.predict(&task, None).unwrap();
    assert_eq!(before, after, "bit-identical predictions after the round trip");
}

#[test]
fn unmarshal_rejects_corrupted_header() {
    let task = classif_task(20, 8);
    let settings = TrainSettings { epochs: 1, batch_size: 8, ..Default::default() };
    let mut learner = Learner::new(mlp_config(vec![4], settings));
    learner.train(&task, None).unwrap();
    let mut bytes = learner.marshaled_bytes().unwrap();
    bytes[0] = b'X';
    assert!(pipegrad::learner::unmarshal(&bytes).is_err());
    let truncated = &bytes[..bytes.len() / 2];
    assert!(pipegrad::learner::unmarshal(truncated).is_err());
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let task = classif_task(30, 9);
    let build = || {
        let settings =
            TrainSettings { epochs: 3, batch_size: 8, seed: 77, ..Default::default() };
        Learner::new(mlp_config(vec![5], settings))
    };
    let mut a = build();
    a.train(&task, None).unwrap();
    let mut b = build();
    b.train(&task, None).unwrap();
    assert_eq!(
        a.marshaled_bytes().unwrap(),
        b.marshaled_bytes().unwrap(),
        "identical seed gives identical model bytes"
    );
}

#[test]
fn validation_rows_never_contribute_gradients() {
    // Two tasks identical on training rows; the validation-only row carries
    // a poison feature in one of them. Trained parameters must match bitwise.
    let build_task = |poison: f64| {
        let mut x1: Vec<f64> = (0..21).map(|i| (i as f64) / 10.0 - 1.0).collect();
        let x2: Vec<f64> = (0..21).map(|i| ((i * 7) % 13) as f64 / 6.0 - 1.0).collect();
        let labels: Vec<&str> =
            (0..21).map(|i| if (i * 7) % 13 > 6 { "pos" } else { "neg" }).collect();
        x1[20] = poison;
        Task::new(
            "poison_check",
            TaskType::Classif,
            vec![
                ("x1".to_string(), Column::Numeric(Arc::new(x1))),
                ("x2".to_string(), Column::Numeric(Arc::new(x2))),
                (
                    "y".to_string(),
                    Column::Categorical(Arc::new(categorical_from_labels(&labels))),
                ),
            ],
            "y",
            None,
        )
        .unwrap()
    };
    let train_rows: Vec<usize> = (0..20).collect();
    let valid_rows = vec![20usize];
    let run = |poison: f64| -> Vec<(String, Vec<f32>)> {
        let task = build_task(poison);
        let settings = TrainSettings {
            epochs: 4,
            batch_size: 8,
            seed: 5,
            measures_valid: vec![Measure::Logloss],
            ..Default::default()
        };
        let mut config = mlp_config(vec![4], settings);
        config.validate = Validate::Test;
        let mut learner = Learner::new(config);
        learner.train_with_valid(&task, Some(&train_rows), Some(&valid_rows)).unwrap();
        let Some(pipegrad::learner::ModelState::Live(model)) = &learner.model else { panic!() };
        model
            .network
            .state_dict()
            .into_iter()
            .map(|(n, t)| (n, t.to_vec()))
            .collect()
    };
    assert_eq!(run(0.0), run(1e9), "poisoning a validation-only row leaves parameters unchanged");
}

#[test]
fn callback_hooks_fire_in_declared_order() {
    let trace: Arc<Mutex<Vec<String>>> = Arc::new(Mutex::new(Vec::new()));
    struct Tracer(Arc<Mutex<Vec<String>>>);
    impl Callback for Tracer {
        fn id(&self) -> &str {
            "tracer"
        }
        fn on_begin(&mut self, _: &mut TrainContext<'_>) -> Result<(), pipegrad::Error> {
            self.0.lock().unwrap().push("begin".into());
            Ok(())
        }
        fn on_epoch_begin(&mut self, _: &mut TrainContext<'_>) -> Result<(), pipegrad::Error> {
            self.0.lock().unwrap().push("epoch_begin".into());
            Ok(())
        }
        fn on_batch_begin(&mut self, _: &mut TrainContext<'_>) -> Result<(), pipegrad::Error> {
            self.0.lock().unwrap().push("batch_begin".into());
            Ok(())
        }
        fn on_after_backward(&mut self, _: &mut TrainContext<'_>) -> Result<(), pipegrad::Error> {
            self.0.lock().unwrap().push("after_backward".into());
            Ok(())
        }
        fn on_batch_end(&mut self, _: &mut TrainContext<'_>) -> Result<(), pipegrad::Error> {
            self.0.lock().unwrap().push("batch_end".into());
            Ok(())
        }
        fn on_epoch_end(&mut self, _: &mut TrainContext<'_>) -> Result<(), pipegrad::Error> {
            self.0.lock().unwrap().push("epoch_end".into());
            Ok(())
        }
        fn on_valid_end(&mut self, _: &mut TrainContext<'_>) -> Result<(), pipegrad::Error> {
            self.0.lock().unwrap().push("valid_end".into());
            Ok(())
        }
        fn on_end(&mut self, _: &mut TrainContext<'_>) -> Result<(), pipegrad::Error> {
            self.0.lock().unwrap().push("end".into());
            Ok(())
        }
    }
    let trace_clone = Arc::clone(&trace);
    let tracer = CallbackConfig::Custom {
        id: "tracer".into(),
        factory: Arc::new(move || Box::new(Tracer(Arc::clone(&trace_clone)))),
    };
    let task = classif_task(8, 10);
    let settings = TrainSettings { epochs: 2, batch_size: 4, ..Default::default() };
    let mut config = LearnerConfig::mlp(
        "mlp",
        vec![3],
        LossSpec::cross_entropy(),
        OptimConfig::sgd(0.1),
        vec![tracer],
        settings,
    );
    config.validate = Validate::Ratio(0.25);
    if let LearnerSpec::Torch(spec) = &mut config.spec {
        spec.settings.measures_valid = vec![Measure::Acc];
    }
    let mut learner = Learner::new(config);
    learner.train(&task, None).unwrap();
    let observed = trace.lock().unwrap().clone();
    // 6 training rows, batch 4: two batches per epoch
    let per_epoch = [
        "epoch_begin",
        "batch_begin",
        "after_backward",
        "batch_end",
        "batch_begin",
        "after_backward",
        "batch_end",
        "epoch_end",
        "valid_end",
    ];
    let mut expected = vec!["begin".to_string()];
    for _ in 0..2 {
        expected.extend(per_epoch.iter().map(|s| s.to_string()));
    }
    expected.push("end".into());
    assert_eq!(observed, expected);
}

#[test]
fn gradient_clipper_records_one_norm_per_step_and_caps_the_norm() {
    // A verifier callback registered after the clipper observes the clipped
    // gradients of every backward pass.
    struct Verifier {
        max_norm: f64,
        checked: Arc<AtomicUsize>,
    }
    impl Callback for Verifier {
        fn id(&self) -> &str {
            "verifier"
        }
        fn on_after_backward(&mut self, ctx: &mut TrainContext<'_>) -> Result<(), pipegrad::Error> {
            let mut acc = 0.0f64;
            for (_, p) in ctx.network.named_parameters() {
                if let Some(g) = p.grad() {
                    for v in g {
                        acc += (v as f64) * (v as f64);
                    }
                }
            }
            assert!(
                acc.sqrt() <= self.max_norm + 1e-6,
                "clipped global norm {} exceeds {}",
                acc.sqrt(),
                self.max_norm
            );
            self.checked.fetch_add(1, Ordering::SeqCst);
            Ok(())
        }
    }
    let checked = Arc::new(AtomicUsize::new(0));
    let checked_clone = Arc::clone(&checked);
    let verifier = CallbackConfig::Custom {
        id: "verifier".into(),
        factory: Arc::new(move || {
            Box::new(Verifier { max_norm: 0.5, checked: Arc::clone(&checked_clone) })
        }),
    };
    let task = classif_task(24, 11);
    let settings = TrainSettings { epochs: 3, batch_size: 8, ..Default::default() };
    let config = LearnerConfig::mlp(
        "mlp",
        vec![6],
        LossSpec::cross_entropy(),
        OptimConfig::sgd(0.5),
        vec![
            CallbackConfig::GradClip { max_norm: 0.5, norm_type: NormType::l2() },
            verifier,
        ],
        settings,
    );
    let mut learner = Learner::new(config);
    learner.train(&task, None).unwrap();
    let Some(pipegrad::learner::ModelState::Live(model)) = &learner.model else { panic!() };
    let (_, state) = model
        .callback_states
        .iter()
        .find(|(id, _)| id == "gradient_clipper")
        .expect("clipper state harvested");
    let CallbackState::Norms(norms) = state else { panic!("expected norms") };
    assert_eq!(
        norms.len() as u64,
        model.optimizer_step_count,
        "one recorded norm per optimizer step"
    );
    assert_eq!(checked.load(Ordering::SeqCst) as u64, model.optimizer_step_count);
}

#[test]
fn unfreeze_thaws_scheduled_parameters_at_their_epoch() {
    let task = classif_task(24, 12);
    // capture non-head parameters after init by running zero epochs is not
    // possible; instead train twice and compare the frozen phase.
    let build = |epochs: usize| {
        let settings = TrainSettings { epochs, batch_size: 8, seed: 21, ..Default::default() };
        LearnerConfig::mlp(
            "mlp",
            vec![4],
            LossSpec::cross_entropy(),
            OptimConfig::sgd(0.1),
            vec![CallbackConfig::Unfreeze {
                starting: ParamSelector::Names(vec![
                    "net.3.weight".into(),
                    "net.3.bias".into(),
                ]),
                schedule: vec![(3, ParamSelector::All)],
            }],
            settings,
        )
    };
    let params_after = |epochs: usize| -> Vec<(String, Vec<f32>)> {
        let mut learner = Learner::new(build(epochs));
        learner.train(&task, None).unwrap();
        let Some(pipegrad::learner::ModelState::Live(model)) = &learner.model else { panic!() };
        model
            .network
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.to_vec()))
            .collect()
    };
    let after1 = params_after(1);
    let after2 = params_after(2);
    let after3 = params_after(3);
    let non_head = |params: &[(String, Vec<f32>)]| -> Vec<(String, Vec<f32>)> {
        params.iter().filter(|(n, _)| !n.starts_with("net.3")).cloned().collect()
    };
    assert_eq!(
        non_head(&after1),
        non_head(&after2),
        "epochs 1-2 leave frozen parameters bit-unchanged"
    );
    assert_ne!(
        non_head(&after2),
        non_head(&after3),
        "epoch 3 unfreezes and changes the remaining parameters"
    );
    // head parameters always train
    let head1: Vec<_> = after1.iter().filter(|(n, _)| n.starts_with("net.3")).collect();
    let head2: Vec<_> = after2.iter().filter(|(n, _)| n.starts_with("net.3")).collect();
    assert_ne!(head1, head2);
}

fn ffn_generator() -> pipegrad::learner::ModuleGenerator {
    Arc::new(|task: &Task, params: &ParamSet| {
        let latent = params.get("latent_dim").map(|v| v.as_usize()).transpose()?.unwrap_or(100);
        let n_layers = params.get("n_layers").map(|v| v.as_usize()).transpose()?.unwrap_or(1);
        let d_in = task.feature_names().len();
        let d_out = task.n_classes()?;
        let mut rng = RngState::new(13);
        let mut dims = vec![d_in];
        dims.extend(std::iter::repeat_n(latent, n_layers));
        dims.push(d_out);
        let mut children = Vec::new();
        for i in 0..dims.len() - 1 {
            children.push(NeuralModule::new(
                children.len().to_string(),
                ModuleKind::Linear(Linear::new(dims[i], dims[i + 1], &mut rng)?),
            ));
            if i < dims.len() - 2 {
                children.push(NeuralModule::new(children.len().to_string(), ModuleKind::Relu));
            }
        }
        Ok(BuiltNet::Single {
            input: "x".into(),
            module: NeuralModule::new("ffn", ModuleKind::Sequential(children)),
        })
    })
}

#[test]
fn custom_module_learner_trains_without_subclassing() {
    let task = classif_task(30, 14);
    let mut params = ParamSet::new();
    params.declare("latent_dim", ParamKind::Int { lo: 1, hi: 10_000 });
    params.declare("n_layers", ParamKind::Int { lo: 0, hi: 32 });
    params.set("latent_dim", pipegrad::params::ParamValue::Int(100)).unwrap();
    params.set("n_layers", pipegrad::params::ParamValue::Int(5)).unwrap();
    let settings = TrainSettings { epochs: 2, batch_size: 8, ..Default::default() };
    let config = LearnerConfig::from_module(
        "ffn",
        ffn_generator(),
        params,
        vec![("x".into(), IngressKind::Numeric, None)],
        LossSpec::cross_entropy(),
        OptimConfig::adamw(0.01),
        vec![],
        settings,
    );
    let mut learner = Learner::new(config);
    learner.train(&task, None).unwrap();
    let pred = learner.predict(&task, None).unwrap();
    assert_eq!(pred.len(), 30);
}

#[test]
fn custom_module_with_mismatched_input_name_errors() {
    let task = classif_task(10, 15);
    let settings = TrainSettings { epochs: 1, batch_size: 8, ..Default::default() };
    let config = LearnerConfig::from_module(
        "ffn",
        ffn_generator(), // module expects "x"
        ParamSet::new(),
        vec![("z".into(), IngressKind::Numeric, None)],
        LossSpec::cross_entropy(),
        OptimConfig::adamw(0.01),
        vec![],
        settings,
    );
    let mut learner = Learner::new(config);
    let err = learner.train(&task, None).unwrap_err();
    assert!(err.to_string().contains("expects"), "name mismatch is reported: {err}");
}

#[test]
fn zero_depth_module_is_a_single_head() {
    let task = classif_task(16, 16);
    let mut params = ParamSet::new();
    params.declare("n_layers", ParamKind::Int { lo: 0, hi: 32 });
    params.set("n_layers", pipegrad::params::ParamValue::Int(0)).unwrap();
    let settings = TrainSettings { epochs: 2, batch_size: 8, ..Default::default() };
    let config = LearnerConfig::from_module(
        "ffn",
        ffn_generator(),
        params,
        vec![("x".into(), IngressKind::Numeric, None)],
        LossSpec::cross_entropy(),
        OptimConfig::adamw(0.01),
        vec![],
        settings,
    );
    let mut learner = Learner::new(config);
    learner.train(&task, None).unwrap();
    let Some(pipegrad::learner::ModelState::Live(model)) = &learner.model else { panic!() };
    // 2 features -> 2 classes with bias: 6 parameters
    assert_eq!(model.network.parameter_count(), 6);
}

#[test]
fn fallback_learner_predicts_the_majority_class() {
    let task = classif_task(20, 17);
    let settings = TrainSettings { epochs: 1, batch_size: 8, ..Default::default() };
    let mut config = LearnerConfig::mlp(
        "mlp",
        vec![4],
        LossSpec::mse(), // wrong loss for a classification task
        OptimConfig::adamw(0.01),
        vec![],
        settings,
    );
    config.fallback = true;
    let mut learner = Learner::new(config);
    learner.train(&task, None).unwrap();
    let pred = learner.predict(&task, None).unwrap();
    let Prediction::Classif { response, .. } = &pred else { panic!() };
    let first = response[0];
    assert!(response.iter().all(|&r| r == first), "constant fallback prediction");
}

#[test]
fn marshal_scores_are_invariant_for_graph_learners() {
    use pipegrad::netgraph::LayerKind;
    use pipegrad::pipeline::{OpKind, PipeOp, PipelineGraph};
    let task = classif_task(24, 18);
    let ingress = PipeOp::new(
        "ingress",
        OpKind::Ingress { kind: IngressKind::Numeric, shape: None },
    );
    let head = PipeOp::new("head", OpKind::Layer { layer: LayerKind::Head });
    let loss = PipeOp::new("loss", OpKind::AttachLoss { loss: LossSpec::cross_entropy() });
    let optim = PipeOp::new(
        "optimizer",
        OpKind::AttachOptimizer { kind: pipegrad::optim::OptimKind::AdamW },
    );
    let mut model = PipeOp::new("model", OpKind::Model);
    model.params.set("epochs", pipegrad::params::ParamValue::Int(3)).unwrap();
    model.params.set("batch_size", pipegrad::params::ParamValue::Int(8)).unwrap();
    let graph = PipelineGraph::chain(vec![ingress, head, loss, optim, model]).unwrap();
    let mut config = LearnerConfig::from_graph("graph_mlp", graph);
    config.predict_type = PredictType::Prob;
    let mut learner = Learner::new(config);
    learner.train(&task, None).unwrap();
    let before = learner.predict(&task, None).unwrap();
    let score_before = Measure::Logloss.score(&before).unwrap();
    learner.marshal().unwrap();
    learner.unmarshal().unwrap();
    let after = learner.predict(&task, None).unwrap();
    let score_after = Measure::Logloss.score(&after).unwrap();
    assert_eq!(before, after);
    assert_eq!(score_before, score_after);
}
