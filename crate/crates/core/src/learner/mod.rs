//! The trainable learner: configuration (architecture, loss, optimizer,
//! callbacks, hyperparameter space), the train/predict entry points with
//! validation handling, marshaling, and the constant fallback.

pub mod callbacks;
pub mod marshal;
pub mod prediction;
mod train_loop;

pub use callbacks::{
    Callback, CallbackConfig, CallbackState, HistoryTable, ParamSelector, TrainContext,
};
pub use marshal::{canonical_param_text, marshal, unmarshal, ByteReader, ByteWriter};
pub use prediction::{argmax_response, auc, roc_points, CustomMeasure, Measure, Prediction};
pub use train_loop::{predict_network, train_network, TaskMeta, TrainSettings, TrainedModel};

use crate::data::{Task, TaskType};
use crate::error::{Error, Result};
use crate::netgraph::{
    build_ingress_spec, IngressKind, ModuleGraph, NetInput, NetworkModule, ShapeSpec,
};
use crate::nn::{Activation, LossKind, LossSpec, NeuralModule};
use crate::optim::OptimConfig;
use crate::params::{ParamKind, ParamSet, ParamValue, TuneSpec};
use crate::pipeline::{ExecCtx, OpState, PipelineGraph, TaskPair, Value};
use crate::rng::RngState;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Validate {
    /// No validation data.
    None,
    /// Hold out this share of the training rows.
    Ratio(f64),
    /// Validation rows are supplied by the resampling driver (its test set).
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictType {
    Response,
    Prob,
}

/// A network built by a custom module generator.
pub enum BuiltNet {
    /// Single-input module; `input` must name the declared ingress.
    Single { input: String, module: NeuralModule<f32> },
    /// Fully custom graph whose free ingress names must match the declared
    /// ingress names.
    Graph(NetworkModule),
}

pub type ModuleGenerator = Arc<dyn Fn(&Task, &ParamSet) -> Result<BuiltNet> + Send + Sync>;

#[derive(Clone)]
pub enum ArchSpec {
    Mlp { neurons: Vec<i64>, p: f64, activation: Activation },
    Module {
        generator: ModuleGenerator,
        params: ParamSet,
        ingresses: Vec<(String, IngressKind, Option<ShapeSpec>)>,
    },
}

/// Configuration of a network-training learner.
#[derive(Clone)]
pub struct TorchSpec {
    pub arch: ArchSpec,
    pub loss: LossSpec,
    pub optim: OptimConfig,
    pub callbacks: Vec<CallbackConfig>,
    pub settings: TrainSettings,
}

#[derive(Clone)]
pub enum LearnerSpec {
    Torch(Box<TorchSpec>),
    Graph(PipelineGraph),
}

/// Thread-safe learner configuration; training state lives in
/// [`Learner::model`].
#[derive(Clone)]
pub struct LearnerConfig {
    pub id: String,
    pub spec: LearnerSpec,
    pub predict_type: PredictType,
    pub validate: Validate,
    pub fallback: bool,
    pub seed: u64,
    /// Tuning declarations by parameter path.
    pub tunes: Vec<(String, TuneSpec)>,
}

impl LearnerConfig {
    pub fn mlp(
        id: impl Into<String>,
        neurons: Vec<i64>,
        loss: LossSpec,
        optim: OptimConfig,
        callbacks: Vec<CallbackConfig>,
        settings: TrainSettings,
    ) -> Self {
        LearnerConfig {
            id: id.into(),
            spec: LearnerSpec::Torch(Box::new(TorchSpec {
                arch: ArchSpec::Mlp { neurons, p: 0.5, activation: Activation::Relu },
                loss,
                optim,
                callbacks,
                settings,
            })),
            predict_type: PredictType::Response,
            validate: Validate::None,
            fallback: false,
            seed: 0,
            tunes: Vec::new(),
        }
    }

    pub fn from_graph(id: impl Into<String>, graph: PipelineGraph) -> Self {
        LearnerConfig {
            id: id.into(),
            spec: LearnerSpec::Graph(graph),
            predict_type: PredictType::Response,
            validate: Validate::None,
            fallback: false,
            seed: 0,
            tunes: Vec::new(),
        }
    }

    /// Builds a fully functional learner around a module generator without
    /// subclassing; ingress names must match the generator's input names.
    pub fn from_module(
        id: impl Into<String>,
        generator: ModuleGenerator,
        params: ParamSet,
        ingresses: Vec<(String, IngressKind, Option<ShapeSpec>)>,
        loss: LossSpec,
        optim: OptimConfig,
        callbacks: Vec<CallbackConfig>,
        settings: TrainSettings,
    ) -> Self {
        LearnerConfig {
            id: id.into(),
            spec: LearnerSpec::Torch(Box::new(TorchSpec {
                arch: ArchSpec::Module { generator, params, ingresses },
                loss,
                optim,
                callbacks,
                settings,
            })),
            predict_type: PredictType::Response,
            validate: Validate::None,
            fallback: false,
            seed: 0,
            tunes: Vec::new(),
        }
    }

    /// Feature and task-type support; checked before training.
    fn supports(&self, task: &Task) -> Result<()> {
        if let LearnerSpec::Torch(spec) = &self.spec {
            let classif = matches!(spec.loss.kind, LossKind::CrossEntropy);
            let want = if classif { TaskType::Classif } else { TaskType::Regr };
            if task.task_type != want {
                return Err(Error::learner(
                    &self.id,
                    format!(
                        "loss {:?} does not support {} tasks",
                        spec.loss.kind,
                        task.task_type.as_str()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Constant predictor used as the configured fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct FallbackModel {
    pub meta: TaskMeta,
    /// Majority class index (classif) or target mean (regr).
    pub class_response: usize,
    pub value_response: f64,
}

pub enum ModelState {
    Live(Box<TrainedModel>),
    Graph {
        graph: Box<PipelineGraph>,
        internal_valid_scores: Vec<(String, f64)>,
        internal_tuned_epochs: Option<usize>,
        epoch_log: HistoryTable,
    },
    Marshaled(Vec<u8>),
    Fallback(FallbackModel),
}

/// A configured learner plus its (optional) trained model.
pub struct Learner {
    pub config: LearnerConfig,
    pub model: Option<ModelState>,
}

impl Learner {
    pub fn new(config: LearnerConfig) -> Self {
        Learner { config, model: None }
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn is_trained(&self) -> bool {
        self.model.is_some()
    }

    /// Merged hyperparameter view: learner-level entries plus "loss.",
    /// "opt." and "cb.<id>." prefixed parts (torch learners) or the prefixed
    /// union over graph ops (graph learners). Tuning declarations recorded
    /// via [`Learner::tune_param`] are attached to the view.
    pub fn param_set(&self) -> Result<ParamSet> {
        let mut ps = match &self.config.spec {
            LearnerSpec::Graph(graph) => graph.merged_param_set()?,
            LearnerSpec::Torch(spec) => {
                let mut base = ParamSet::new();
                base.declare("epochs", ParamKind::Int { lo: 1, hi: i64::MAX });
                base.set("epochs", ParamValue::Int(spec.settings.epochs as i64))?;
                base.declare("batch_size", ParamKind::Int { lo: 1, hi: i64::MAX });
                base.set("batch_size", ParamValue::Int(spec.settings.batch_size as i64))?;
                base.declare("patience", ParamKind::Int { lo: 1, hi: i64::MAX });
                if let Some(p) = spec.settings.patience {
                    base.set("patience", ParamValue::Int(p as i64))?;
                }
                base.declare("seed", ParamKind::Int { lo: i64::MIN, hi: i64::MAX });
                base.set("seed", ParamValue::Int(spec.settings.seed as i64))?;
                if let ArchSpec::Mlp { neurons, p, activation } = &spec.arch {
                    base.declare("neurons", ParamKind::Untyped);
                    base.set("neurons", ParamValue::IntList(neurons.clone()))?;
                    base.declare("p", ParamKind::Float { lo: 0.0, hi: 1.0 });
                    base.set("p", ParamValue::Float(*p))?;
                    base.declare(
                        "activation",
                        ParamKind::Categorical {
                            levels: vec!["relu".into(), "sigmoid".into()],
                        },
                    );
                    base.set(
                        "activation",
                        ParamValue::Str(
                            match activation {
                                Activation::Relu => "relu",
                                Activation::Sigmoid => "sigmoid",
                            }
                            .into(),
                        ),
                    )?;
                }
                let mut loss_ps = ParamSet::new();
                if spec.loss.kind == LossKind::WinsorizedMse {
                    loss_ps.declare("max_loss", ParamKind::Float { lo: 0.0, hi: f64::INFINITY });
                    if let Some(m) = spec.loss.max_loss {
                        loss_ps.set("max_loss", ParamValue::Float(m))?;
                    }
                }
                let mut opt_ps = ParamSet::new();
                opt_ps.declare("lr", ParamKind::Float { lo: 0.0, hi: f64::INFINITY });
                opt_ps.set("lr", ParamValue::Float(spec.optim.lr))?;
                opt_ps.declare("weight_decay", ParamKind::Float { lo: 0.0, hi: f64::INFINITY });
                opt_ps.set("weight_decay", ParamValue::Float(spec.optim.weight_decay))?;
                let mut parts: Vec<(String, ParamSet)> = vec![
                    (String::new(), base),
                    ("loss".into(), loss_ps),
                    ("opt".into(), opt_ps),
                ];
                if let ArchSpec::Module { params, .. } = &spec.arch {
                    parts.insert(1, (String::new(), params.clone()));
                }
                for cb in &spec.callbacks {
                    parts.push((format!("cb.{}", cb.id()), cb.param_set()));
                }
                let refs: Vec<(&str, &ParamSet)> =
                    parts.iter().map(|(p, s)| (p.as_str(), s)).collect();
                ParamSet::prefixed_union(&refs)?
            }
        };
        for (path, spec) in &self.config.tunes {
            ps.tune(path, spec.clone())?;
        }
        Ok(ps)
    }

    pub fn set_param(&mut self, path: &str, value: ParamValue) -> Result<()> {
        match &mut self.config.spec {
            LearnerSpec::Graph(graph) => graph.set_param(path, value),
            LearnerSpec::Torch(spec) => {
                match path {
                    "epochs" => spec.settings.epochs = value.as_usize()?,
                    "batch_size" => spec.settings.batch_size = value.as_usize()?,
                    "patience" => spec.settings.patience = Some(value.as_usize()?),
                    "seed" => spec.settings.seed = value.as_int()? as u64,
                    "opt.lr" => spec.optim.lr = value.as_float()?,
                    "opt.weight_decay" => spec.optim.weight_decay = value.as_float()?,
                    "loss.max_loss" => spec.loss.max_loss = Some(value.as_float()?),
                    "p" => {
                        if let ArchSpec::Mlp { p, .. } = &mut spec.arch {
                            *p = value.as_float()?;
                        } else {
                            return Err(Error::Param {
                                param: path.into(),
                                msg: "not an mlp learner".into(),
                            });
                        }
                    }
                    "neurons" => {
                        if let ArchSpec::Mlp { neurons, .. } = &mut spec.arch {
                            match value {
                                ParamValue::IntList(v) => *neurons = v,
                                ParamValue::Int(v) => *neurons = vec![v],
                                other => {
                                    return Err(Error::Param {
                                        param: path.into(),
                                        msg: format!("expected int list, got {other}"),
                                    })
                                }
                            }
                        } else {
                            return Err(Error::Param {
                                param: path.into(),
                                msg: "not an mlp learner".into(),
                            });
                        }
                    }
                    "activation" => {
                        if let ArchSpec::Mlp { activation, .. } = &mut spec.arch {
                            *activation = value.as_str()?.parse()?;
                        } else {
                            return Err(Error::Param {
                                param: path.into(),
                                msg: "not an mlp learner".into(),
                            });
                        }
                    }
                    other if other.starts_with("cb.") => {
                        return set_torch_callback_param(&mut spec.callbacks, other, value);
                    }
                    other => {
                        if let ArchSpec::Module { params, .. } = &mut spec.arch {
                            return params.set(other, value);
                        }
                        return Err(Error::Param {
                            param: path.into(),
                            msg: "no such parameter".into(),
                        });
                    }
                }
                Ok(())
            }
        }
    }

    /// Declare how a parameter is tuned (offline range or internal).
    pub fn tune_param(&mut self, path: &str, spec: TuneSpec) -> Result<()> {
        if let LearnerSpec::Graph(graph) = &mut self.config.spec {
            graph.tune_param(path, spec)?;
            return Ok(());
        }
        // validate the path against the merged view
        let view = self.param_set()?;
        if !view.contains(path) {
            return Err(Error::Param { param: path.into(), msg: "not declared".into() });
        }
        self.config.tunes.retain(|(p, _)| p != path);
        self.config.tunes.push((path.to_string(), spec));
        Ok(())
    }

    /// Internal-tuning declarations: (path, upper bound).
    pub fn internal_tunes(&self) -> Result<Vec<(String, i64)>> {
        Ok(self
            .param_set()?
            .internal()
            .into_iter()
            .map(|(n, u)| (n.to_string(), u))
            .collect())
    }

    /// Train on the (optionally row-filtered) task, splitting validation data
    /// per the `validate` field.
    pub fn train(&mut self, task: &Task, rows: Option<&[usize]>) -> Result<()> {
        self.train_with_valid(task, rows, None)
    }

    /// Train with externally supplied validation rows (used by resampling
    /// when `validate == Test`).
    pub fn train_with_valid(
        &mut self,
        task: &Task,
        rows: Option<&[usize]>,
        test_rows: Option<&[usize]>,
    ) -> Result<()> {
        let result = self.train_inner(task, rows, test_rows);
        match result {
            Ok(state) => {
                self.model = Some(state);
                Ok(())
            }
            Err(e) if self.config.fallback => {
                let view = match rows {
                    Some(r) => task.filter(r),
                    None => task.clone(),
                };
                self.model = Some(ModelState::Fallback(build_fallback(&view)?));
                let _ = e;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn train_inner(
        &mut self,
        task: &Task,
        rows: Option<&[usize]>,
        test_rows: Option<&[usize]>,
    ) -> Result<ModelState> {
        self.config.supports(task)?;
        let base = match rows {
            Some(r) => task.filter(r),
            None => task.clone(),
        };
        let (train_task, valid_task) = match self.config.validate {
            Validate::None => (base, None),
            Validate::Ratio(ratio) => {
                if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
                    return Err(Error::learner(&self.config.id, "validate ratio must be in (0,1)"));
                }
                let ids = base.row_ids().to_vec();
                let mut order = ids.clone();
                let mut rng = RngState::new(self.config.seed).split(0xA11D);
                rng.shuffle(&mut order);
                let n_valid = ((ids.len() as f64) * ratio).round() as usize;
                let n_valid = n_valid.clamp(1, ids.len().saturating_sub(1).max(1));
                let valid_ids: Vec<usize> = order[..n_valid].to_vec();
                let train_ids: Vec<usize> = order[n_valid..].to_vec();
                (base.filter(&train_ids), Some(base.filter(&valid_ids)))
            }
            Validate::Test => {
                let rows = test_rows.ok_or_else(|| {
                    Error::learner(
                        &self.config.id,
                        "validate = test requires validation rows from the resampling driver",
                    )
                })?;
                (base, Some(task.filter(rows)))
            }
        };
        match &self.config.spec {
            LearnerSpec::Torch(_) => {
                let model = self.train_torch(&train_task, valid_task.as_ref())?;
                Ok(ModelState::Live(Box::new(model)))
            }
            LearnerSpec::Graph(graph) => {
                let mut trained = graph.clone();
                trained.reset_state();
                let mut ctx = ExecCtx::new(self.config.seed);
                let pair = TaskPair { train: train_task, valid: valid_task };
                let outputs = trained.train(vec![Value::Task(pair)], &mut ctx)?;
                if !matches!(outputs.as_slice(), [Value::Null]) {
                    return Err(Error::learner(
                        &self.config.id,
                        "graph learner must end in a model op",
                    ));
                }
                // harvest internal scores from the model op
                let mut internal_valid_scores = Vec::new();
                let mut internal_tuned_epochs = None;
                let mut epoch_log = HistoryTable::default();
                let mut states = Vec::new();
                trained.collect_states("", &mut states);
                for (_, state) in &states {
                    if let OpState::Model(bytes) = state {
                        let (model, _, _) = unmarshal(bytes)?;
                        internal_valid_scores = model.internal_valid_scores.clone();
                        internal_tuned_epochs = model.internal_tuned_epochs;
                        epoch_log = model.epoch_log.clone();
                    }
                }
                Ok(ModelState::Graph {
                    graph: Box::new(trained),
                    internal_valid_scores,
                    internal_tuned_epochs,
                    epoch_log,
                })
            }
        }
    }

    fn train_torch(&self, train_task: &Task, valid_task: Option<&Task>) -> Result<TrainedModel> {
        let LearnerSpec::Torch(spec) = &self.config.spec else { unreachable!() };
        let mut settings = spec.settings.clone();
        // internal epoch tuning runs to the declared upper bound
        for (path, tune) in &self.config.tunes {
            if path == "epochs" {
                if let TuneSpec::Internal { upper } = tune {
                    settings.epochs = *upper as usize;
                    if settings.patience.is_none() {
                        return Err(Error::learner(
                            &self.config.id,
                            "internal epoch tuning requires `patience`",
                        ));
                    }
                }
            }
        }
        let mut init_rng = RngState::new(settings.seed).split(0x1217);
        let (network, plan) = match &spec.arch {
            ArchSpec::Mlp { neurons, p, activation } => {
                let ingress = mlp_ingress(train_task)?;
                let tail = ingress.shape.known_tail()?;
                if tail.len() != 1 {
                    return Err(Error::learner(
                        &self.config.id,
                        format!("mlp requires flat inputs, ingress shape is {}", ingress.shape),
                    ));
                }
                let d_in = tail[0];
                let d_out = match train_task.task_type {
                    TaskType::Classif => train_task.n_classes()?,
                    TaskType::Regr => 1,
                };
                let widths: Vec<usize> = neurons.iter().map(|&v| v as usize).collect();
                let module =
                    crate::nn::mlp::<f32>(d_in, &widths, d_out, *p, *activation, &mut init_rng)?;
                let mut graph = ModuleGraph::new();
                let out_shape = ShapeSpec::batched(&[d_out]);
                graph.add_node(
                    "net",
                    module,
                    vec![NetInput::Ingress(ingress.name.clone())],
                    out_shape,
                );
                let plan = crate::data::BatchPlan {
                    inputs: vec![(ingress.name.clone(), ingress.assembly.clone())],
                };
                let network =
                    NetworkModule::new(graph, vec![(ingress.name, ingress.shape)], 0)?;
                (network, plan)
            }
            ArchSpec::Module { generator, params, ingresses } => {
                let mut specs = Vec::with_capacity(ingresses.len());
                for (name, kind, shape) in ingresses {
                    specs.push(build_ingress_spec(*kind, name, train_task, shape.as_ref())?);
                }
                let built = generator(train_task, params)?;
                let network = match built {
                    BuiltNet::Single { input, module } => {
                        let [spec_one] = specs.as_slice() else {
                            return Err(Error::learner(
                                &self.config.id,
                                "single-input module requires exactly one ingress",
                            ));
                        };
                        if input != spec_one.name {
                            return Err(Error::learner(
                                &self.config.id,
                                format!(
                                    "ingress is named `{}` but the module expects `{input}`",
                                    spec_one.name
                                ),
                            ));
                        }
                        let mut graph = ModuleGraph::new();
                        // runtime shape carries through the module; static
                        // shape is resolved per batch
                        let out_shape = ShapeSpec(vec![crate::netgraph::Extent::Unknown]);
                        graph.add_node(
                            "net",
                            module,
                            vec![NetInput::Ingress(input.clone())],
                            out_shape,
                        );
                        NetworkModule::new(
                            graph,
                            specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect(),
                            0,
                        )?
                    }
                    BuiltNet::Graph(nm) => {
                        let mut free: Vec<&str> = nm
                            .input_shapes
                            .iter()
                            .map(|(n, _)| n.as_str())
                            .collect();
                        free.sort_unstable();
                        let mut declared: Vec<&str> =
                            specs.iter().map(|s| s.name.as_str()).collect();
                        declared.sort_unstable();
                        if free != declared {
                            return Err(Error::learner(
                                &self.config.id,
                                format!(
                                    "module inputs {free:?} do not match ingress names {declared:?}"
                                ),
                            ));
                        }
                        nm
                    }
                };
                let plan = crate::data::BatchPlan {
                    inputs: specs
                        .iter()
                        .map(|s| (s.name.clone(), s.assembly.clone()))
                        .collect(),
                };
                (network, plan)
            }
        };
        train_network(
            network,
            plan,
            train_task,
            valid_task,
            spec.loss.clone(),
            spec.optim.clone(),
            &spec.callbacks,
            &settings,
        )
    }

    /// Predict the (optionally filtered) task rows.
    pub fn predict(&self, task: &Task, rows: Option<&[usize]>) -> Result<Prediction> {
        let view = match rows {
            Some(r) => task.filter(r),
            None => task.clone(),
        };
        let Some(model) = &self.model else {
            return Err(Error::learner(&self.config.id, "predict requires a trained model"));
        };
        let mut prediction = match model {
            ModelState::Marshaled(_) => {
                return Err(Error::learner(
                    &self.config.id,
                    "model is marshaled; unmarshal before predicting",
                ))
            }
            ModelState::Live(trained) => {
                // the network is stateless across calls apart from training
                // flags, which predict_network restores
                let mut network = clone_network(&trained.network);
                predict_network(
                    &mut network,
                    &trained.plan,
                    &view,
                    trained.batch_size,
                    &trained.meta,
                )?
            }
            ModelState::Graph { graph, .. } => {
                let mut ctx = ExecCtx::new(self.config.seed);
                let outputs = graph
                    .clone()
                    .predict(vec![Value::Task(TaskPair::new(view))], &mut ctx)?;
                match outputs.into_iter().next() {
                    Some(Value::Prediction(p)) => p,
                    _ => {
                        return Err(Error::learner(
                            &self.config.id,
                            "graph predict did not produce a prediction",
                        ))
                    }
                }
            }
            ModelState::Fallback(fb) => fallback_predict(fb, &view)?,
        };
        if self.config.predict_type == PredictType::Response {
            if let Prediction::Classif { prob, .. } = &mut prediction {
                *prob = None;
            }
        }
        Ok(prediction)
    }

    /// Last validation measure values recorded during training.
    pub fn internal_valid_scores(&self) -> Vec<(String, f64)> {
        match &self.model {
            Some(ModelState::Live(m)) => m.internal_valid_scores.clone(),
            Some(ModelState::Graph { internal_valid_scores, .. }) => internal_valid_scores.clone(),
            _ => Vec::new(),
        }
    }

    /// Epoch count chosen by internal tuning (early stopping).
    pub fn internal_tuned_epochs(&self) -> Option<usize> {
        match &self.model {
            Some(ModelState::Live(m)) => m.internal_tuned_epochs,
            Some(ModelState::Graph { internal_tuned_epochs, .. }) => *internal_tuned_epochs,
            _ => None,
        }
    }

    /// Per-epoch measure log recorded by the training loop itself.
    pub fn epoch_log(&self) -> Option<HistoryTable> {
        match &self.model {
            Some(ModelState::Live(m)) => Some(m.epoch_log.clone()),
            Some(ModelState::Graph { epoch_log, .. }) => Some(epoch_log.clone()),
            _ => None,
        }
    }

    pub fn history(&self) -> Option<HistoryTable> {
        match &self.model {
            Some(ModelState::Live(m)) => m.history().cloned(),
            Some(ModelState::Graph { graph, .. }) => {
                let mut states = Vec::new();
                graph.collect_states("", &mut states);
                for (_, state) in states {
                    if let OpState::Model(bytes) = state {
                        if let Ok((model, _, _)) = unmarshal(&bytes) {
                            return model.history().cloned();
                        }
                    }
                }
                None
            }
            _ => None,
        }
    }

    fn param_text(&self) -> Result<String> {
        let ps = self.param_set()?;
        let values: Vec<(String, String)> =
            ps.values().iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
        Ok(canonical_param_text(&values))
    }

    /// Convert the trained model into portable bytes in place.
    pub fn marshal(&mut self) -> Result<()> {
        let text = self.param_text()?;
        match self.model.take() {
            None => Err(Error::learner(&self.config.id, "no model to marshal")),
            Some(ModelState::Marshaled(bytes)) => {
                self.model = Some(ModelState::Marshaled(bytes));
                Ok(())
            }
            Some(ModelState::Live(model)) => {
                self.model = Some(ModelState::Marshaled(marshal(&model, &self.config.id, &text)));
                Ok(())
            }
            Some(ModelState::Graph { graph, internal_valid_scores, internal_tuned_epochs, epoch_log }) => {
                let bytes = marshal_graph_states(
                    &graph,
                    &self.config.id,
                    &text,
                    &internal_valid_scores,
                    internal_tuned_epochs,
                )?;
                let _ = epoch_log;
                self.model = Some(ModelState::Marshaled(bytes));
                Ok(())
            }
            Some(other) => {
                self.model = Some(other);
                Err(Error::learner(&self.config.id, "fallback models are not marshaled"))
            }
        }
    }

    /// Restore a marshaled model in place.
    pub fn unmarshal(&mut self) -> Result<()> {
        match self.model.take() {
            Some(ModelState::Marshaled(bytes)) => {
                if bytes.starts_with(b"PGGS") {
                    let LearnerSpec::Graph(template) = &self.config.spec else {
                        return Err(Error::learner(
                            &self.config.id,
                            "graph container requires a graph learner",
                        ));
                    };
                    let (states, scores, epochs) = unmarshal_graph_states(&bytes)?;
                    let mut graph = template.clone();
                    graph.reset_state();
                    graph.restore_states("", &states);
                    let mut epoch_log = HistoryTable::default();
                    let mut flat = Vec::new();
                    graph.collect_states("", &mut flat);
                    for (_, state) in &flat {
                        if let OpState::Model(bytes) = state {
                            if let Ok((model, _, _)) = unmarshal(bytes) {
                                epoch_log = model.epoch_log.clone();
                            }
                        }
                    }
                    self.model = Some(ModelState::Graph {
                        graph: Box::new(graph),
                        internal_valid_scores: scores,
                        internal_tuned_epochs: epochs,
                        epoch_log,
                    });
                } else {
                    let (model, _, _) = unmarshal(&bytes)?;
                    self.model = Some(ModelState::Live(Box::new(model)));
                }
                Ok(())
            }
            other => {
                self.model = other;
                Err(Error::learner(&self.config.id, "model is not marshaled"))
            }
        }
    }

    /// Raw marshaled bytes (marshals a live model first).
    pub fn marshaled_bytes(&mut self) -> Result<Vec<u8>> {
        self.marshal()?;
        match &self.model {
            Some(ModelState::Marshaled(bytes)) => Ok(bytes.clone()),
            _ => unreachable!("marshal left a marshaled model"),
        }
    }
}

fn set_torch_callback_param(
    callbacks: &mut [CallbackConfig],
    path: &str,
    value: ParamValue,
) -> Result<()> {
    // path looks like "cb.<id>.<param>"
    let parts: Vec<&str> = path.splitn(3, '.').collect();
    if parts.len() != 3 {
        return Err(Error::Param { param: path.into(), msg: "no such parameter".into() });
    }
    for cb in callbacks.iter_mut() {
        if cb.id() == parts[1] {
            if let CallbackConfig::GradClip { max_norm, .. } = cb {
                if parts[2] == "max_norm" {
                    *max_norm = value.as_float()?;
                    return Ok(());
                }
            }
        }
    }
    Err(Error::Param { param: path.into(), msg: "no such callback parameter".into() })
}

/// The MLP learner accepts either plain tabular features (numeric stack) or
/// a single flat lazy tensor column.
fn mlp_ingress(task: &Task) -> Result<crate::netgraph::IngressSpec> {
    let lazy = task.features_of_type(&["lazy_tensor"]);
    if lazy.len() == 1 && task.feature_names().len() == 1 {
        build_ingress_spec(IngressKind::Lazy, "input", task, None)
    } else if lazy.is_empty() {
        build_ingress_spec(IngressKind::Numeric, "input", task, None)
    } else {
        Err(Error::Task(
            "mlp learner supports either tabular features or a single lazy column".into(),
        ))
    }
}

fn build_fallback(task: &Task) -> Result<FallbackModel> {
    let meta = TaskMeta::of(task)?;
    match task.task_type {
        TaskType::Classif => {
            let codes = task.class_codes()?;
            let k = task.n_classes()?;
            let mut counts = vec![0usize; k];
            for &c in &codes {
                counts[c] += 1;
            }
            let majority = counts
                .iter()
                .enumerate()
                .max_by_key(|(_, &n)| n)
                .map(|(c, _)| c)
                .unwrap_or(0);
            Ok(FallbackModel { meta, class_response: majority, value_response: 0.0 })
        }
        TaskType::Regr => {
            let values = task.target_values()?;
            let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
            Ok(FallbackModel { meta, class_response: 0, value_response: mean })
        }
    }
}

fn fallback_predict(fb: &FallbackModel, task: &Task) -> Result<Prediction> {
    let n = task.n_rows();
    match fb.meta.task_type {
        TaskType::Classif => {
            let k = fb.meta.levels.len();
            let mut prob = vec![0.0f64; n * k];
            for i in 0..n {
                prob[i * k + fb.class_response] = 1.0;
            }
            Ok(Prediction::Classif {
                row_ids: task.row_ids().to_vec(),
                truth: task.class_codes()?,
                response: vec![fb.class_response; n],
                prob: Some(prob),
                levels: fb.meta.levels.clone(),
                positive: fb.meta.positive,
            })
        }
        TaskType::Regr => Ok(Prediction::Regr {
            row_ids: task.row_ids().to_vec(),
            truth: task.target_values()?,
            response: vec![fb.value_response; n],
        }),
    }
}

/// Clone a network sharing parameter tensors (prediction does not mutate
/// parameters).
fn clone_network(network: &NetworkModule) -> NetworkModule {
    let nodes = network
        .graph
        .nodes
        .iter()
        .map(|n| crate::netgraph::NetNode {
            id: n.id.clone(),
            module: crate::netgraph::clone_module_sharing_params(&n.module),
            inputs: n.inputs.clone(),
            out_shape: n.out_shape.clone(),
        })
        .collect();
    NetworkModule::new(
        ModuleGraph { nodes },
        network.input_shapes.clone(),
        network.output,
    )
    .expect("clone of a valid network")
}

/// Container for graph-learner state: op states keyed by node path.
fn marshal_graph_states(
    graph: &PipelineGraph,
    learner_id: &str,
    param_text: &str,
    scores: &[(String, f64)],
    epochs: Option<usize>,
) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(b"PGGS");
    w.u32(1);
    w.str(learner_id);
    w.str(param_text);
    let mut states = Vec::new();
    graph.collect_states("", &mut states);
    w.u64(states.len() as u64);
    for (key, state) in &states {
        w.str(key);
        encode_op_state(&mut w, state);
    }
    w.u64(scores.len() as u64);
    for (name, value) in scores {
        w.str(name);
        w.f64(*value);
    }
    match epochs {
        Some(e) => {
            w.u64(1);
            w.u64(e as u64);
        }
        None => w.u64(0),
    }
    Ok(w.buf)
}

type GraphStates = (Vec<(String, OpState)>, Vec<(String, f64)>, Option<usize>);

fn unmarshal_graph_states(bytes: &[u8]) -> Result<GraphStates> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take_bytes(4)?;
    if magic != b"PGGS" {
        return Err(Error::Marshal("bad graph container magic".into()));
    }
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::Marshal(format!("unsupported graph container version {version}")));
    }
    let _learner_id = r.str()?;
    let _param_text = r.str()?;
    let n = r.u64()? as usize;
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let key = r.str()?;
        states.push((key, decode_op_state(&mut r)?));
    }
    let n_scores = r.u64()? as usize;
    let mut scores = Vec::with_capacity(n_scores);
    for _ in 0..n_scores {
        let name = r.str()?;
        scores.push((name, r.f64()?));
    }
    let epochs = if r.u64()? == 1 { Some(r.u64()? as usize) } else { None };
    Ok((states, scores, epochs))
}

fn encode_op_state(w: &mut ByteWriter, state: &OpState) {
    match state {
        OpState::Marker => w.str("marker"),
        OpState::SelectedFeatures(names) => {
            w.str("selected");
            w.u64(names.len() as u64);
            for n in names {
                w.str(n);
            }
        }
        OpState::Levels(tables) => {
            w.str("levels");
            w.u64(tables.len() as u64);
            for (col, levels) in tables {
                w.str(col);
                w.u64(levels.len() as u64);
                for l in levels {
                    w.str(l);
                }
            }
        }
        OpState::Empirical(cols) => {
            w.str("empirical");
            w.u64(cols.len() as u64);
            for (col, values) in cols {
                w.str(col);
                w.u64(values.len() as u64);
                for v in values {
                    w.f64(*v);
                }
            }
        }
        OpState::BranchChoice(choice) => {
            w.str("branch");
            w.str(choice);
        }
        OpState::Model(bytes) => {
            w.str("model");
            w.u64(bytes.len() as u64);
            w.buf.extend_from_slice(bytes);
        }
    }
}

fn decode_op_state(r: &mut ByteReader<'_>) -> Result<OpState> {
    let tag = r.str()?;
    Ok(match tag.as_str() {
        "marker" => OpState::Marker,
        "selected" => {
            let n = r.u64()? as usize;
            let mut names = Vec::with_capacity(n);
            for _ in 0..n {
                names.push(r.str()?);
            }
            OpState::SelectedFeatures(names)
        }
        "levels" => {
            let n = r.u64()? as usize;
            let mut tables = Vec::with_capacity(n);
            for _ in 0..n {
                let col = r.str()?;
                let k = r.u64()? as usize;
                let mut levels = Vec::with_capacity(k);
                for _ in 0..k {
                    levels.push(r.str()?);
                }
                tables.push((col, levels));
            }
            OpState::Levels(tables)
        }
        "empirical" => {
            let n = r.u64()? as usize;
            let mut cols = Vec::with_capacity(n);
            for _ in 0..n {
                let col = r.str()?;
                let k = r.u64()? as usize;
                let mut values = Vec::with_capacity(k);
                for _ in 0..k {
                    values.push(r.f64()?);
                }
                cols.push((col, values));
            }
            OpState::Empirical(cols)
        }
        "branch" => OpState::BranchChoice(r.str()?),
        "model" => {
            let n = r.u64()? as usize;
            OpState::Model(r.take_bytes(n)?.to_vec())
        }
        other => Err(Error::Marshal(format!("unknown op state tag `{other}`")))?,
    })
}
