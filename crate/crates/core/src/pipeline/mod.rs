//! The typed operator-graph language: PipeOps with distinct train and
//! predict behavior over typed channels, graph composition with positional
//! channel matching, and hyperparameter routing into nested graphs.

mod netops;
mod preproc;
#[cfg(test)]
mod tests;

pub use netops::MergeKindSpec;
pub use preproc::Selector;

use crate::data::Task;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::learner::{CallbackConfig, Prediction};
use crate::netgraph::{IngressKind, LayerKind, ModelDescriptor, ShapeSpec};
use crate::nn::LossSpec;
use crate::optim::OptimKind;
use crate::params::{ParamKind, ParamSet, ParamValue, TuneSpec};
use crate::rng::RngState;

/// Train-phase task values carry the validation companion, transformed in
/// lockstep by every preprocessing op's predict logic.
#[derive(Clone)]
pub struct TaskPair {
    pub train: Task,
    pub valid: Option<Task>,
}

impl TaskPair {
    pub fn new(train: Task) -> Self {
        TaskPair { train, valid: None }
    }
}

/// A value on a graph channel.
#[derive(Clone)]
pub enum Value {
    Task(TaskPair),
    Descriptor(ModelDescriptor),
    Prediction(Prediction),
    Null,
}

impl Value {
    pub fn channel_type(&self) -> ChannelType {
        match self {
            Value::Task(_) => ChannelType::Task,
            Value::Descriptor(_) => ChannelType::Descriptor,
            Value::Prediction(_) => ChannelType::Prediction,
            Value::Null => ChannelType::Null,
        }
    }

    pub fn into_task(self, op: &str) -> Result<TaskPair> {
        match self {
            Value::Task(t) => Ok(t),
            other => Err(Error::pipeop(
                op,
                format!("expected a task input, got {:?}", other.channel_type()),
            )),
        }
    }

    pub fn into_descriptor(self, op: &str) -> Result<ModelDescriptor> {
        match self {
            Value::Descriptor(d) => Ok(d),
            other => Err(Error::pipeop(
                op,
                format!("expected a model descriptor input, got {:?}", other.channel_type()),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelType {
    Task,
    Descriptor,
    Prediction,
    Null,
}

/// Fitted state written by train and consumed by predict.
#[derive(Debug, Clone, PartialEq)]
pub enum OpState {
    /// Stateless op trained (phase gate only).
    Marker,
    SelectedFeatures(Vec<String>),
    /// Per-column level tables recorded by one-hot encoding.
    Levels(Vec<(String, Vec<String>)>),
    /// Per-column observed-value distributions recorded by histogram
    /// imputation.
    Empirical(Vec<(String, Vec<f64>)>),
    BranchChoice(String),
    /// Marshaled trained model of the model op.
    Model(Vec<u8>),
}

#[derive(Clone)]
pub enum OpKind {
    Select { selector: Selector },
    EncodeOnehot,
    ImputeHist,
    ClassBalance,
    FeatureUnion { arity: usize },
    LazyReshape { shape: Vec<i64> },
    LazyResize,
    AugmentFlip { vertical: bool },
    AugmentCrop { pad_if_needed: bool },
    Branch { paths: Vec<(String, PipelineGraph)> },
    Ingress { kind: IngressKind, shape: Option<ShapeSpec> },
    Layer { layer: LayerKind },
    Merge { merge: MergeKindSpec },
    Block { segment: PipelineGraph },
    AttachLoss { loss: LossSpec },
    AttachOptimizer { kind: OptimKind },
    AttachCallbacks { callbacks: Vec<CallbackConfig> },
    Model,
}

/// One pipeline operator: unique id, kind, hyperparameters and fitted state.
#[derive(Clone)]
pub struct PipeOp {
    pub id: String,
    pub kind: OpKind,
    pub params: ParamSet,
    pub state: Option<OpState>,
}

impl PipeOp {
    pub fn new(id: impl Into<String>, kind: OpKind) -> Self {
        let params = declared_params(&kind);
        PipeOp { id: id.into(), kind, params, state: None }
    }

    /// Channel signature: (train types, predict types) for inputs and
    /// outputs.
    pub fn signature(&self) -> OpSignature {
        use ChannelType::*;
        let one = |t_in, p_in, t_out, p_out| OpSignature {
            inputs: vec![(t_in, p_in)],
            outputs: vec![(t_out, p_out)],
        };
        match &self.kind {
            OpKind::Select { .. }
            | OpKind::EncodeOnehot
            | OpKind::ImputeHist
            | OpKind::ClassBalance
            | OpKind::LazyReshape { .. }
            | OpKind::LazyResize
            | OpKind::AugmentFlip { .. }
            | OpKind::AugmentCrop { .. } => one(Task, Task, Task, Task),
            OpKind::FeatureUnion { arity } => OpSignature {
                inputs: vec![(Task, Task); *arity],
                outputs: vec![(Task, Task)],
            },
            OpKind::Branch { paths } => {
                // all paths share one signature; validated at construction
                paths
                    .first()
                    .map(|(_, g)| OpSignature {
                        inputs: g.free_input_types(),
                        outputs: g.free_output_types(),
                    })
                    .unwrap_or(OpSignature { inputs: vec![], outputs: vec![] })
            }
            OpKind::Ingress { .. } => one(Task, Task, Descriptor, Task),
            OpKind::Layer { .. }
            | OpKind::Block { .. }
            | OpKind::AttachLoss { .. }
            | OpKind::AttachOptimizer { .. }
            | OpKind::AttachCallbacks { .. } => one(Descriptor, Task, Descriptor, Task),
            OpKind::Merge { .. } => OpSignature {
                inputs: vec![(Descriptor, Task); 2],
                outputs: vec![(Descriptor, Task)],
            },
            OpKind::Model => one(Descriptor, Task, Null, Prediction),
        }
    }
}

pub struct OpSignature {
    /// Per input channel: (train type, predict type).
    pub inputs: Vec<(ChannelType, ChannelType)>,
    pub outputs: Vec<(ChannelType, ChannelType)>,
}

fn declared_params(kind: &OpKind) -> ParamSet {
    let mut ps = ParamSet::new();
    match kind {
        OpKind::ClassBalance => {
            ps.declare("ratio", ParamKind::Float { lo: 1.0, hi: f64::INFINITY });
        }
        OpKind::AugmentFlip { .. } => {
            ps.declare("p", ParamKind::Float { lo: 0.0, hi: 1.0 });
        }
        OpKind::AugmentCrop { .. } | OpKind::LazyResize => {
            ps.declare("height", ParamKind::Int { lo: 1, hi: i64::MAX });
            ps.declare("width", ParamKind::Int { lo: 1, hi: i64::MAX });
        }
        OpKind::Branch { paths } => {
            ps.declare(
                "selection",
                ParamKind::Categorical { levels: paths.iter().map(|(n, _)| n.clone()).collect() },
            );
        }
        OpKind::Layer { layer } => match layer {
            LayerKind::Linear => {
                ps.declare("out_features", ParamKind::Int { lo: 1, hi: i64::MAX });
            }
            LayerKind::Dropout => {
                ps.declare("p", ParamKind::Float { lo: 0.0, hi: 1.0 });
            }
            LayerKind::Conv2d => {
                ps.declare("out_channels", ParamKind::Int { lo: 1, hi: i64::MAX });
                ps.declare("kernel_size", ParamKind::Int { lo: 1, hi: i64::MAX });
                ps.declare("stride", ParamKind::Int { lo: 1, hi: i64::MAX });
                ps.declare("padding", ParamKind::Int { lo: 0, hi: i64::MAX });
            }
            LayerKind::MaxPool2d => {
                ps.declare("kernel_size", ParamKind::Int { lo: 1, hi: i64::MAX });
                ps.declare("stride", ParamKind::Int { lo: 1, hi: i64::MAX });
                ps.declare("padding", ParamKind::Int { lo: 0, hi: i64::MAX });
            }
            LayerKind::BatchNorm2d => {
                ps.declare("momentum", ParamKind::Float { lo: 0.0, hi: 1.0 });
                ps.declare("eps", ParamKind::Float { lo: 0.0, hi: 1.0 });
            }
            LayerKind::TokenizerNum | LayerKind::TokenizerCateg => {
                ps.declare("d_token", ParamKind::Int { lo: 1, hi: i64::MAX });
            }
            _ => {}
        },
        OpKind::Merge { merge } => {
            if let MergeKindSpec::Concat { .. } = merge {
                ps.declare("axis", ParamKind::Int { lo: 1, hi: i64::MAX });
            }
        }
        OpKind::Block { .. } => {
            ps.declare("n_blocks", ParamKind::Int { lo: 1, hi: i64::MAX });
        }
        OpKind::AttachOptimizer { .. } => {
            ps.declare("lr", ParamKind::Float { lo: 0.0, hi: f64::INFINITY });
            ps.declare("weight_decay", ParamKind::Float { lo: 0.0, hi: f64::INFINITY });
        }
        OpKind::Model => {
            ps.declare("epochs", ParamKind::Int { lo: 1, hi: i64::MAX });
            ps.declare("batch_size", ParamKind::Int { lo: 1, hi: i64::MAX });
            ps.declare("patience", ParamKind::Int { lo: 1, hi: i64::MAX });
            ps.declare("seed", ParamKind::Int { lo: i64::MIN, hi: i64::MAX });
            ps.declare("shuffle", ParamKind::Bool);
            ps.declare("measures_train", ParamKind::Untyped);
            ps.declare("measures_valid", ParamKind::Untyped);
        }
        _ => {}
    }
    ps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Port {
    node: usize,
    channel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Edge {
    src: Port,
    dst: Port,
}

/// Directed acyclic graph of pipe ops. Each input channel accepts at most
/// one incoming edge; evaluation order is a topological sort stable by node
/// insertion order.
#[derive(Clone, Default)]
pub struct PipelineGraph {
    nodes: Vec<PipeOp>,
    edges: Vec<Edge>,
}

/// Execution context threaded through train/predict.
pub struct ExecCtx {
    pub rng: RngState,
    pub exec: Execution,
}

impl ExecCtx {
    pub fn new(seed: u64) -> Self {
        ExecCtx { rng: RngState::new(seed), exec: Execution::default() }
    }

    /// Deterministic per-op stream, independent of evaluation order.
    pub fn op_rng(&self, op_id: &str) -> RngState {
        self.rng.split(fnv1a(op_id.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl PipelineGraph {
    pub fn from_op(op: PipeOp) -> Self {
        PipelineGraph { nodes: vec![op], edges: Vec::new() }
    }

    /// Linear chain of ops.
    pub fn chain(ops: Vec<PipeOp>) -> Result<Self> {
        let mut iter = ops.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Graph("cannot build an empty chain".into()))?;
        let mut graph = PipelineGraph::from_op(first);
        for op in iter {
            graph = PipelineGraph::concat(graph, PipelineGraph::from_op(op))?;
        }
        Ok(graph)
    }

    /// Disjoint union; free channels of all parts stay free, ordered by part.
    pub fn parallel(parts: Vec<PipelineGraph>) -> Result<Self> {
        let mut out = PipelineGraph::default();
        for part in parts {
            out.absorb(part)?;
        }
        Ok(out)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_ids(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.id.as_str()).collect()
    }

    pub fn node(&self, id: &str) -> Option<&PipeOp> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut PipeOp> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Append all nodes/edges of `other`, renaming colliding ids with a
    /// numeric suffix. Returns nothing; `other`'s node indices shift by the
    /// current node count.
    fn absorb(&mut self, other: PipelineGraph) -> Result<()> {
        let offset = self.nodes.len();
        for mut op in other.nodes {
            if self.nodes.iter().any(|n| n.id == op.id) {
                let mut k = 2usize;
                let new_id = loop {
                    let candidate = format!("{}_{k}", op.id);
                    if !self.nodes.iter().any(|n| n.id == candidate) {
                        break candidate;
                    }
                    k += 1;
                };
                op.id = new_id;
            }
            self.nodes.push(op);
        }
        for e in other.edges {
            self.edges.push(Edge {
                src: Port { node: e.src.node + offset, channel: e.src.channel },
                dst: Port { node: e.dst.node + offset, channel: e.dst.channel },
            });
        }
        Ok(())
    }

    /// Free input ports in (node insertion, channel) order.
    fn free_inputs(&self) -> Vec<Port> {
        let mut out = Vec::new();
        for (i, op) in self.nodes.iter().enumerate() {
            let arity = op.signature().inputs.len();
            for c in 0..arity {
                if !self.edges.iter().any(|e| e.dst == (Port { node: i, channel: c })) {
                    out.push(Port { node: i, channel: c });
                }
            }
        }
        out
    }

    fn free_outputs(&self) -> Vec<Port> {
        let mut out = Vec::new();
        for (i, op) in self.nodes.iter().enumerate() {
            let arity = op.signature().outputs.len();
            for c in 0..arity {
                if !self.edges.iter().any(|e| e.src == (Port { node: i, channel: c })) {
                    out.push(Port { node: i, channel: c });
                }
            }
        }
        out
    }

    pub fn free_input_types(&self) -> Vec<(ChannelType, ChannelType)> {
        self.free_inputs()
            .iter()
            .map(|p| self.nodes[p.node].signature().inputs[p.channel])
            .collect()
    }

    pub fn free_output_types(&self) -> Vec<(ChannelType, ChannelType)> {
        self.free_outputs()
            .iter()
            .map(|p| self.nodes[p.node].signature().outputs[p.channel])
            .collect()
    }

    pub fn free_input_count(&self) -> usize {
        self.free_inputs().len()
    }

    pub fn free_output_count(&self) -> usize {
        self.free_outputs().len()
    }

    /// Connect `a`'s free outputs to `b`'s free inputs positionally. Arity
    /// and both phase types must match; as the one exception, a single
    /// output fans out to all of `b`'s inputs (the task-distribution rule).
    pub fn concat(a: PipelineGraph, b: PipelineGraph) -> Result<PipelineGraph> {
        let a_outputs = a.free_outputs();
        let a_types = a.free_output_types();
        let b_types = b.free_input_types();
        let broadcast = a_types.len() == 1 && b_types.len() > 1;
        if a_types.len() != b_types.len() && !broadcast {
            return Err(Error::Graph(format!(
                "cannot connect {} free outputs to {} free inputs",
                a_types.len(),
                b_types.len()
            )));
        }
        for (i, bt) in b_types.iter().enumerate() {
            let at = if broadcast { &a_types[0] } else { &a_types[i] };
            if at != bt {
                return Err(Error::Graph(format!(
                    "channel {i} type mismatch: output {at:?} vs input {bt:?}"
                )));
            }
        }
        let offset = a.nodes.len();
        let b_inputs: Vec<Port> = b
            .free_inputs()
            .iter()
            .map(|p| Port { node: p.node + offset, channel: p.channel })
            .collect();
        let mut out = a;
        out.absorb(b)?;
        for (i, dst) in b_inputs.into_iter().enumerate() {
            let src = if broadcast { a_outputs[0] } else { a_outputs[i] };
            out.edges.push(Edge { src, dst });
        }
        Ok(out)
    }

    /// Add one edge between named ops; both phase types must match and the
    /// destination channel must still be free.
    pub fn connect_by_ids(
        &mut self,
        src_id: &str,
        src_channel: usize,
        dst_id: &str,
        dst_channel: usize,
    ) -> Result<()> {
        let src_node = self
            .nodes
            .iter()
            .position(|n| n.id == src_id)
            .ok_or_else(|| Error::Graph(format!("no op `{src_id}`")))?;
        let dst_node = self
            .nodes
            .iter()
            .position(|n| n.id == dst_id)
            .ok_or_else(|| Error::Graph(format!("no op `{dst_id}`")))?;
        let src_types = self.nodes[src_node].signature().outputs;
        let dst_types = self.nodes[dst_node].signature().inputs;
        let st = src_types
            .get(src_channel)
            .ok_or_else(|| Error::Graph(format!("`{src_id}` has no output {src_channel}")))?;
        let dt = dst_types
            .get(dst_channel)
            .ok_or_else(|| Error::Graph(format!("`{dst_id}` has no input {dst_channel}")))?;
        if st != dt {
            return Err(Error::Graph(format!(
                "channel type mismatch: {st:?} vs {dt:?}"
            )));
        }
        let dst = Port { node: dst_node, channel: dst_channel };
        if self.edges.iter().any(|e| e.dst == dst) {
            return Err(Error::Graph(format!(
                "input {dst_channel} of `{dst_id}` already connected"
            )));
        }
        self.edges.push(Edge { src: Port { node: src_node, channel: src_channel }, dst });
        Ok(())
    }

    /// Topological node order: Kahn's algorithm with the ready set ordered
    /// by insertion index, so results do not depend on edge insertion order.
    fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        for e in &self.edges {
            indegree[e.dst.node] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&next) = ready.iter().min() {
            ready.retain(|&i| i != next);
            order.push(next);
            for e in &self.edges {
                if e.src.node == next {
                    indegree[e.dst.node] -= 1;
                    if indegree[e.dst.node] == 0 {
                        ready.push(e.dst.node);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(Error::Graph("pipeline graph contains a cycle".into()));
        }
        Ok(order)
    }

    fn run(&mut self, inputs: Vec<Value>, ctx: &mut ExecCtx, train: bool) -> Result<Vec<Value>> {
        let free_in = self.free_inputs();
        // a single input value is distributed to every free input channel
        let inputs = if inputs.len() == 1 && free_in.len() > 1 {
            let value = inputs.into_iter().next().unwrap();
            std::iter::repeat_n(value, free_in.len()).collect()
        } else {
            inputs
        };
        if inputs.len() != free_in.len() {
            return Err(Error::Graph(format!(
                "graph expects {} inputs, got {}",
                free_in.len(),
                inputs.len()
            )));
        }
        let expected = self.free_input_types();
        for (i, (value, (t_train, t_predict))) in inputs.iter().zip(&expected).enumerate() {
            let want = if train { t_train } else { t_predict };
            if value.channel_type() != *want {
                return Err(Error::Graph(format!(
                    "input {i} has type {:?}, expected {want:?}",
                    value.channel_type()
                )));
            }
        }
        let order = self.topo_order()?;
        // per-port slots for produced values
        let mut produced: Vec<Vec<Option<Value>>> = self
            .nodes
            .iter()
            .map(|op| vec![None; op.signature().outputs.len()])
            .collect();
        let mut external: Vec<Option<Value>> = inputs.into_iter().map(Some).collect();
        for node_idx in order {
            let in_arity = self.nodes[node_idx].signature().inputs.len();
            let mut gathered: Vec<Value> = Vec::with_capacity(in_arity);
            for c in 0..in_arity {
                let port = Port { node: node_idx, channel: c };
                if let Some(edge) = self.edges.iter().find(|e| e.dst == port) {
                    let value = produced[edge.src.node][edge.src.channel]
                        .as_ref()
                        .ok_or_else(|| Error::Graph("value consumed before production".into()))?
                        .clone();
                    gathered.push(value);
                } else {
                    let pos = free_in
                        .iter()
                        .position(|p| *p == port)
                        .expect("free input registered");
                    let value = external[pos]
                        .take()
                        .ok_or_else(|| Error::Graph("external input consumed twice".into()))?;
                    gathered.push(value);
                }
            }
            let op = &mut self.nodes[node_idx];
            let outputs = if train {
                dispatch_train(op, gathered, ctx)
            } else {
                if op.state.is_none() {
                    return Err(Error::pipeop(&op.id, "predict called before train"));
                }
                dispatch_predict(op, gathered, ctx)
            }
            .map_err(|e| match e {
                Error::PipeOp { .. } => e,
                other => Error::pipeop(&op.id, other.to_string()),
            })?;
            let out_arity = self.nodes[node_idx].signature().outputs.len();
            if outputs.len() != out_arity {
                return Err(Error::pipeop(
                    &self.nodes[node_idx].id,
                    format!("emitted {} outputs, declared {out_arity}", outputs.len()),
                ));
            }
            for (c, value) in outputs.into_iter().enumerate() {
                produced[node_idx][c] = Some(value);
            }
        }
        let mut results = Vec::new();
        for port in self.free_outputs() {
            results.push(
                produced[port.node][port.channel]
                    .clone()
                    .ok_or_else(|| Error::Graph("free output not produced".into()))?,
            );
        }
        Ok(results)
    }

    pub fn train(&mut self, inputs: Vec<Value>, ctx: &mut ExecCtx) -> Result<Vec<Value>> {
        self.run(inputs, ctx, true)
    }

    pub fn predict(&mut self, inputs: Vec<Value>, ctx: &mut ExecCtx) -> Result<Vec<Value>> {
        self.run(inputs, ctx, false)
    }

    pub fn reset_state(&mut self) {
        for op in &mut self.nodes {
            op.state = None;
            match &mut op.kind {
                OpKind::Branch { paths } => {
                    for (_, g) in paths {
                        g.reset_state();
                    }
                }
                OpKind::Block { segment } => segment.reset_state(),
                _ => {}
            }
        }
    }

    /// Route a dotted path ("node.param" or deeper for nested graphs) to the
    /// owning parameter set.
    pub fn set_param(&mut self, path: &str, value: ParamValue) -> Result<()> {
        let (node_id, rest) = split_path(path)?;
        let op = self
            .node_mut(node_id)
            .ok_or_else(|| Error::Param { param: path.into(), msg: "no such op".into() })?;
        if !rest.contains('.') && op.params.contains(rest) {
            return op.params.set(rest, value);
        }
        match &mut op.kind {
            OpKind::Block { segment } => segment.set_param(rest, value),
            OpKind::Branch { paths } => {
                let (path_name, inner) = split_path(rest)?;
                for (name, graph) in paths {
                    if name == path_name {
                        return graph.set_param(inner, value);
                    }
                }
                Err(Error::Param { param: path.into(), msg: "no such branch path".into() })
            }
            OpKind::AttachCallbacks { callbacks } => {
                set_callback_param(callbacks, rest, value, path)
            }
            _ => Err(Error::Param { param: path.into(), msg: "no such parameter".into() }),
        }
    }

    pub fn tune_param(&mut self, path: &str, spec: TuneSpec) -> Result<()> {
        let (node_id, rest) = split_path(path)?;
        let op = self
            .node_mut(node_id)
            .ok_or_else(|| Error::Param { param: path.into(), msg: "no such op".into() })?;
        if !rest.contains('.') && op.params.contains(rest) {
            return op.params.tune(rest, spec);
        }
        match &mut op.kind {
            OpKind::Block { segment } => segment.tune_param(rest, spec),
            OpKind::Branch { paths } => {
                let (path_name, inner) = split_path(rest)?;
                for (name, graph) in paths {
                    if name == path_name {
                        return graph.tune_param(inner, spec);
                    }
                }
                Err(Error::Param { param: path.into(), msg: "no such branch path".into() })
            }
            _ => Err(Error::Param { param: path.into(), msg: "no such parameter".into() }),
        }
    }

    /// Merged parameter set: every node's parameters under "<id>." prefixes,
    /// nested graphs recursively.
    pub fn merged_param_set(&self) -> Result<ParamSet> {
        let mut parts: Vec<(String, ParamSet)> = Vec::new();
        for op in &self.nodes {
            let mut base = op.params.clone();
            match &op.kind {
                OpKind::Block { segment } => {
                    let inner = segment.merged_param_set()?;
                    base = ParamSet::prefixed_union(&[("", &base), ("", &inner)])?;
                }
                OpKind::Branch { paths } => {
                    let mut pieces: Vec<(String, ParamSet)> = vec![(String::new(), base.clone())];
                    for (name, graph) in paths {
                        pieces.push((name.clone(), graph.merged_param_set()?));
                    }
                    let refs: Vec<(&str, &ParamSet)> =
                        pieces.iter().map(|(p, s)| (p.as_str(), s)).collect();
                    base = ParamSet::prefixed_union(&refs)?;
                }
                OpKind::AttachCallbacks { callbacks } => {
                    let mut pieces: Vec<(String, ParamSet)> = vec![(String::new(), base.clone())];
                    for cb in callbacks {
                        pieces.push((format!("cb.{}", cb.id()), cb.param_set()));
                    }
                    let refs: Vec<(&str, &ParamSet)> =
                        pieces.iter().map(|(p, s)| (p.as_str(), s)).collect();
                    base = ParamSet::prefixed_union(&refs)?;
                }
                _ => {}
            }
            parts.push((op.id.clone(), base));
        }
        let refs: Vec<(&str, &ParamSet)> = parts.iter().map(|(p, s)| (p.as_str(), s)).collect();
        ParamSet::prefixed_union(&refs)
    }

    /// Deterministic textual listing of nodes and edges.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for op in &self.nodes {
            let sig = op.signature();
            let fmt_types = |types: &[(ChannelType, ChannelType)]| {
                types
                    .iter()
                    .map(|(t, p)| format!("{t:?}/{p:?}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            out.push_str(&format!(
                "op {} in=[{}] out=[{}]\n",
                op.id,
                fmt_types(&sig.inputs),
                fmt_types(&sig.outputs)
            ));
        }
        for e in &self.edges {
            out.push_str(&format!(
                "edge {}[{}] -> {}[{}]\n",
                self.nodes[e.src.node].id, e.src.channel, self.nodes[e.dst.node].id, e.dst.channel
            ));
        }
        out
    }

    /// Collect fitted op states keyed by node path (marshal support).
    pub fn collect_states(&self, prefix: &str, out: &mut Vec<(String, OpState)>) {
        for op in &self.nodes {
            let key = if prefix.is_empty() {
                op.id.clone()
            } else {
                format!("{prefix}.{}", op.id)
            };
            if let Some(state) = &op.state {
                out.push((key.clone(), state.clone()));
            }
            match &op.kind {
                OpKind::Branch { paths } => {
                    for (name, graph) in paths {
                        graph.collect_states(&format!("{key}.{name}"), out);
                    }
                }
                OpKind::Block { segment } => segment.collect_states(&format!("{key}.segment"), out),
                _ => {}
            }
        }
    }

    pub fn restore_states(&mut self, prefix: &str, states: &[(String, OpState)]) {
        for op in &mut self.nodes {
            let key = if prefix.is_empty() {
                op.id.clone()
            } else {
                format!("{prefix}.{}", op.id)
            };
            if let Some((_, state)) = states.iter().find(|(k, _)| *k == key) {
                op.state = Some(state.clone());
            }
            match &mut op.kind {
                OpKind::Branch { paths } => {
                    for (name, graph) in paths {
                        graph.restore_states(&format!("{key}.{name}"), states);
                    }
                }
                OpKind::Block { segment } => {
                    segment.restore_states(&format!("{key}.segment"), states)
                }
                _ => {}
            }
        }
    }
}

fn split_path(path: &str) -> Result<(&str, &str)> {
    path.split_once('.')
        .ok_or_else(|| Error::Param { param: path.into(), msg: "expected `<op>.<param>`".into() })
}

fn set_callback_param(
    callbacks: &mut [CallbackConfig],
    rest: &str,
    value: ParamValue,
    full: &str,
) -> Result<()> {
    // rest looks like "cb.<id>.<param>"
    let parts: Vec<&str> = rest.splitn(3, '.').collect();
    if parts.len() != 3 || parts[0] != "cb" {
        return Err(Error::Param { param: full.into(), msg: "no such parameter".into() });
    }
    for cb in callbacks {
        if cb.id() == parts[1] {
            if let CallbackConfig::GradClip { max_norm, norm_type } = cb {
                match parts[2] {
                    "max_norm" => {
                        *max_norm = value.as_float()?;
                        return Ok(());
                    }
                    "norm_type" => {
                        let s = value.as_str()?;
                        *norm_type = if s == "inf" {
                            crate::optim::NormType::Inf
                        } else {
                            crate::optim::NormType::P(s.parse().map_err(|_| Error::Param {
                                param: full.into(),
                                msg: "norm_type must be a number or `inf`".into(),
                            })?)
                        };
                        return Ok(());
                    }
                    _ => {}
                }
            }
        }
    }
    Err(Error::Param { param: full.into(), msg: "no such callback parameter".into() })
}

fn dispatch_train(op: &mut PipeOp, inputs: Vec<Value>, ctx: &mut ExecCtx) -> Result<Vec<Value>> {
    match &op.kind {
        OpKind::Select { .. }
        | OpKind::EncodeOnehot
        | OpKind::ImputeHist
        | OpKind::ClassBalance
        | OpKind::FeatureUnion { .. }
        | OpKind::LazyReshape { .. }
        | OpKind::LazyResize
        | OpKind::AugmentFlip { .. }
        | OpKind::AugmentCrop { .. } => preproc::train(op, inputs, ctx),
        OpKind::Branch { .. } => branch_train(op, inputs, ctx),
        OpKind::Ingress { .. }
        | OpKind::Layer { .. }
        | OpKind::Merge { .. }
        | OpKind::Block { .. }
        | OpKind::AttachLoss { .. }
        | OpKind::AttachOptimizer { .. }
        | OpKind::AttachCallbacks { .. }
        | OpKind::Model => netops::train(op, inputs, ctx),
    }
}

fn dispatch_predict(op: &PipeOp, inputs: Vec<Value>, ctx: &mut ExecCtx) -> Result<Vec<Value>> {
    match &op.kind {
        OpKind::Select { .. }
        | OpKind::EncodeOnehot
        | OpKind::ImputeHist
        | OpKind::ClassBalance
        | OpKind::FeatureUnion { .. }
        | OpKind::LazyReshape { .. }
        | OpKind::LazyResize
        | OpKind::AugmentFlip { .. }
        | OpKind::AugmentCrop { .. } => preproc::predict(op, inputs, ctx),
        OpKind::Branch { .. } => branch_predict(op, inputs, ctx),
        OpKind::Ingress { .. }
        | OpKind::Layer { .. }
        | OpKind::Merge { .. }
        | OpKind::Block { .. }
        | OpKind::AttachLoss { .. }
        | OpKind::AttachOptimizer { .. }
        | OpKind::AttachCallbacks { .. }
        | OpKind::Model => netops::predict(op, inputs, ctx),
    }
}

fn branch_train(op: &mut PipeOp, inputs: Vec<Value>, ctx: &mut ExecCtx) -> Result<Vec<Value>> {
    let selection = op
        .params
        .get("selection")
        .ok_or_else(|| Error::pipeop(&op.id, "branch requires a selection"))?
        .as_str()?
        .to_string();
    let op_rng = ctx.op_rng(&op.id);
    let OpKind::Branch { paths } = &mut op.kind else { unreachable!() };
    let Some((_, graph)) = paths.iter_mut().find(|(n, _)| *n == selection) else {
        return Err(Error::pipeop(&op.id, format!("unknown branch path `{selection}`")));
    };
    // only the selected path trains; the rest stay untouched
    let mut inner_ctx = ExecCtx { rng: op_rng, exec: ctx.exec };
    let outputs = graph.train(inputs, &mut inner_ctx)?;
    op.state = Some(OpState::BranchChoice(selection));
    Ok(outputs)
}

fn branch_predict(op: &PipeOp, inputs: Vec<Value>, ctx: &mut ExecCtx) -> Result<Vec<Value>> {
    let Some(OpState::BranchChoice(selection)) = &op.state else {
        return Err(Error::pipeop(&op.id, "predict called before train"));
    };
    let op_rng = ctx.op_rng(&op.id);
    let OpKind::Branch { paths } = &op.kind else { unreachable!() };
    let Some((_, graph)) = paths.iter().find(|(n, _)| n == selection) else {
        return Err(Error::pipeop(&op.id, format!("unknown branch path `{selection}`")));
    };
    let mut inner_ctx = ExecCtx { rng: op_rng, exec: ctx.exec };
    // the path's op states were fitted in place during train
    graph.clone().predict(inputs, &mut inner_ctx)
}
