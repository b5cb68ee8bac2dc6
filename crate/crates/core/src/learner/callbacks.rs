//! The training-loop callback system: hook points, the context handed to
//! hooks, shipped callbacks (history, gradient clipper, unfreezer) and the
//! factory configs that instantiate them per training run.

use crate::error::Result;
use crate::netgraph::NetworkModule;
use crate::optim::{clip_grad_norm, NormType, Optimizer};
use crate::params::{ParamKind, ParamSet, ParamValue};
use std::sync::Arc;

/// Everything a hook may read or write. Assembled fresh for each invocation
/// from the training loop's locals; `stop_requested` is honored at the next
/// epoch boundary.
pub struct TrainContext<'a> {
    pub network: &'a mut NetworkModule,
    pub optimizer: &'a mut Optimizer<f32>,
    /// 1-based epoch currently running.
    pub epoch: usize,
    pub max_epochs: usize,
    /// 0-based batch index within the epoch.
    pub batch: usize,
    pub last_loss: f64,
    pub train_scores: &'a [(String, f64)],
    pub valid_scores: &'a [(String, f64)],
    pub stop_requested: &'a mut bool,
}

/// Serializable callback state harvested into the trained model.
#[derive(Debug, Clone, PartialEq)]
pub enum CallbackState {
    None,
    /// Pre-clip gradient norms, one per backward pass.
    Norms(Vec<f64>),
    /// Per-epoch measure table.
    History(HistoryTable),
    /// Opaque payload for custom callbacks.
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HistoryTable {
    /// Rows of (epoch, named scores); train measures are prefixed "train.",
    /// validation measures "valid.".
    pub rows: Vec<(usize, Vec<(String, f64)>)>,
}

impl HistoryTable {
    pub fn column(&self, name: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|(epoch, scores)| {
                scores.iter().find(|(n, _)| n == name).map(|(_, v)| (*epoch, *v))
            })
            .collect()
    }
}

/// Hooks fire in declaration order within their scopes; multiple callbacks
/// fire in registration order.
pub trait Callback {
    fn id(&self) -> &str;
    fn on_begin(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }
    fn on_epoch_begin(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }
    fn on_batch_begin(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }
    fn on_after_backward(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }
    fn on_batch_end(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }
    fn on_valid_end(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }
    fn on_end(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }
    fn state(&self) -> CallbackState {
        CallbackState::None
    }
    fn load_state(&mut self, _state: CallbackState) {}
}

/// Parameter-name selector used by the unfreezer.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSelector {
    All,
    Names(Vec<String>),
}

impl ParamSelector {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            ParamSelector::All => true,
            ParamSelector::Names(names) => names.iter().any(|n| n == name),
        }
    }
}

/// Cloneable, thread-safe description of a callback; instantiated fresh per
/// training run.
#[derive(Clone)]
pub enum CallbackConfig {
    History,
    GradClip { max_norm: f64, norm_type: NormType },
    Unfreeze { starting: ParamSelector, schedule: Vec<(usize, ParamSelector)> },
    Custom { id: String, factory: Arc<dyn Fn() -> Box<dyn Callback> + Send + Sync> },
}

impl std::fmt::Debug for CallbackConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CallbackConfig({})", self.id())
    }
}

impl CallbackConfig {
    pub fn id(&self) -> String {
        match self {
            CallbackConfig::History => "history".into(),
            CallbackConfig::GradClip { .. } => "gradient_clipper".into(),
            CallbackConfig::Unfreeze { .. } => "unfreeze".into(),
            CallbackConfig::Custom { id, .. } => id.clone(),
        }
    }

    pub fn instantiate(&self) -> Box<dyn Callback> {
        match self {
            CallbackConfig::History => Box::new(HistoryCallback::default()),
            CallbackConfig::GradClip { max_norm, norm_type } => Box::new(GradClipCallback {
                max_norm: *max_norm,
                norm_type: *norm_type,
                norms: Vec::new(),
            }),
            CallbackConfig::Unfreeze { starting, schedule } => Box::new(UnfreezeCallback {
                starting: starting.clone(),
                schedule: schedule.clone(),
            }),
            CallbackConfig::Custom { factory, .. } => factory(),
        }
    }

    /// Declared hyperparameters, merged into the learner's parameter set
    /// under the "cb.<id>." prefix.
    pub fn param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        match self {
            CallbackConfig::GradClip { max_norm, norm_type } => {
                ps.declare("max_norm", ParamKind::Float { lo: 0.0, hi: f64::INFINITY });
                ps.set("max_norm", ParamValue::Float(*max_norm)).expect("within bounds");
                ps.declare("norm_type", ParamKind::Untyped);
                let nt = match norm_type {
                    NormType::Inf => "inf".to_string(),
                    NormType::P(p) => format!("{p}"),
                };
                ps.set("norm_type", ParamValue::Str(nt)).expect("untyped");
            }
            CallbackConfig::Unfreeze { schedule, .. } => {
                ps.declare("n_unfreeze_steps", ParamKind::Untyped);
                ps.set("n_unfreeze_steps", ParamValue::Int(schedule.len() as i64))
                    .expect("untyped");
            }
            CallbackConfig::History | CallbackConfig::Custom { .. } => {}
        }
        ps
    }
}

/// Records per-epoch train/validation measure values.
#[derive(Default)]
pub struct HistoryCallback {
    table: HistoryTable,
}

impl Callback for HistoryCallback {
    fn id(&self) -> &str {
        "history"
    }

    fn on_valid_end(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        let mut scores: Vec<(String, f64)> = Vec::new();
        for (name, value) in ctx.train_scores {
            scores.push((format!("train.{name}"), *value));
        }
        for (name, value) in ctx.valid_scores {
            scores.push((format!("valid.{name}"), *value));
        }
        self.table.rows.push((ctx.epoch, scores));
        Ok(())
    }

    fn state(&self) -> CallbackState {
        CallbackState::History(self.table.clone())
    }

    fn load_state(&mut self, state: CallbackState) {
        if let CallbackState::History(table) = state {
            self.table = table;
        }
    }
}

/// Clips the global gradient norm after every backward pass and accumulates
/// the pre-clip norms.
pub struct GradClipCallback {
    max_norm: f64,
    norm_type: NormType,
    norms: Vec<f64>,
}

impl Callback for GradClipCallback {
    fn id(&self) -> &str {
        "gradient_clipper"
    }

    fn on_after_backward(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        let params = ctx.network.named_parameters();
        let norm = clip_grad_norm(&params, self.max_norm, self.norm_type)?;
        self.norms.push(norm);
        Ok(())
    }

    fn state(&self) -> CallbackState {
        CallbackState::Norms(self.norms.clone())
    }

    fn load_state(&mut self, state: CallbackState) {
        if let CallbackState::Norms(norms) = state {
            self.norms = norms;
        }
    }
}

/// Freezes all parameters except the starting set before training, then
/// thaws scheduled selections at the beginning of their epoch.
pub struct UnfreezeCallback {
    starting: ParamSelector,
    schedule: Vec<(usize, ParamSelector)>,
}

impl Callback for UnfreezeCallback {
    fn id(&self) -> &str {
        "unfreeze"
    }

    fn on_begin(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        let params = ctx.network.named_parameters();
        let mut any = false;
        for (name, tensor) in &params {
            if self.starting.matches(name) {
                any = true;
            } else {
                tensor.set_requires_grad(false);
            }
        }
        if !any {
            return Err(crate::error::Error::invalid(
                "unfreeze starting selector matches no parameters",
            ));
        }
        Ok(())
    }

    fn on_epoch_begin(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        for (epoch, selector) in &self.schedule {
            if *epoch == ctx.epoch {
                for (name, tensor) in ctx.network.named_parameters() {
                    if selector.matches(&name) {
                        tensor.set_requires_grad(true);
                    }
                }
            }
        }
        Ok(())
    }
}
