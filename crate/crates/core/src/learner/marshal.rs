//! Marshaling: converting a trained model to portable bytes and back without
//! loss of information.
//!
//! Container layout: magic `PGML`, format version, learner id, parameter
//! values as canonical text, then the structural sections (network graph,
//! state dicts in the tensor golden format, optimizer state, callback
//! states, task metadata).

use super::callbacks::CallbackState;
use super::prediction::Measure;
use super::train_loop::{TaskMeta, TrainedModel};
use crate::data::{Assembly, BatchPlan, TaskType};
use crate::error::{Error, Result};
use crate::netgraph::{Extent, ModuleGraph, NetInput, NetNode, NetworkModule, ShapeSpec};
use crate::nn::{LayerConfig, LossKind, LossSpec, NeuralModule};
use crate::optim::{OptimConfig, OptimKind};
use crate::rng::RngState;
use crate::tensor::{read_tensor, write_tensor, Tensor};

const MAGIC: &[u8; 4] = b"PGML";
const VERSION: u32 = 1;

pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor<f32>) {
        write_tensor(t, &mut self.buf);
    }
}

impl Default for ByteWriter {
    fn default() -> Self {
        Self::new()
    }
}

pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    /// Public raw-byte access for sibling container formats.
    pub fn take_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Marshal("truncated payload".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Marshal("invalid utf-8".into()))
    }

    pub fn tensor(&mut self) -> Result<Tensor<f32>> {
        let (t, used) = read_tensor::<f32>(&self.bytes[self.pos..])?;
        self.pos += used;
        Ok(t)
    }

    pub fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn write_layer_config(w: &mut ByteWriter, config: &LayerConfig) {
    match config {
        LayerConfig::Linear { in_features, out_features } => {
            w.str("linear");
            w.u64(*in_features as u64);
            w.u64(*out_features as u64);
        }
        LayerConfig::Relu => w.str("relu"),
        LayerConfig::Sigmoid => w.str("sigmoid"),
        LayerConfig::Dropout { p } => {
            w.str("dropout");
            w.f64(*p);
        }
        LayerConfig::Conv2d { in_channels, out_channels, kernel_size, stride, padding } => {
            w.str("conv2d");
            for v in [in_channels, out_channels, kernel_size, stride, padding] {
                w.u64(*v as u64);
            }
        }
        LayerConfig::MaxPool2d { kernel_size, stride, padding } => {
            w.str("max_pool2d");
            for v in [kernel_size, stride, padding] {
                w.u64(*v as u64);
            }
        }
        LayerConfig::BatchNorm2d { num_features, momentum, eps } => {
            w.str("batch_norm2d");
            w.u64(*num_features as u64);
            w.f64(*momentum);
            w.f64(*eps);
        }
        LayerConfig::Flatten => w.str("flatten"),
        LayerConfig::TokenizerNum { n_features, d_token } => {
            w.str("tokenizer_num");
            w.u64(*n_features as u64);
            w.u64(*d_token as u64);
        }
        LayerConfig::TokenizerCateg { cardinalities, d_token } => {
            w.str("tokenizer_categ");
            w.u64(cardinalities.len() as u64);
            for c in cardinalities {
                w.u64(*c as u64);
            }
            w.u64(*d_token as u64);
        }
        LayerConfig::MergeSum => w.str("merge_sum"),
        LayerConfig::MergeConcat { axis } => {
            w.str("merge_concat");
            w.u64(*axis as u64);
        }
        LayerConfig::Sequential(children) => {
            w.str("sequential");
            w.u64(children.len() as u64);
            for (name, child) in children {
                w.str(name);
                write_layer_config(w, child);
            }
        }
    }
}

fn read_layer_config(r: &mut ByteReader<'_>) -> Result<LayerConfig> {
    let tag = r.str()?;
    Ok(match tag.as_str() {
        "linear" => LayerConfig::Linear {
            in_features: r.u64()? as usize,
            out_features: r.u64()? as usize,
        },
        "relu" => LayerConfig::Relu,
        "sigmoid" => LayerConfig::Sigmoid,
        "dropout" => LayerConfig::Dropout { p: r.f64()? },
        "conv2d" => LayerConfig::Conv2d {
            in_channels: r.u64()? as usize,
            out_channels: r.u64()? as usize,
            kernel_size: r.u64()? as usize,
            stride: r.u64()? as usize,
            padding: r.u64()? as usize,
        },
        "max_pool2d" => LayerConfig::MaxPool2d {
            kernel_size: r.u64()? as usize,
            stride: r.u64()? as usize,
            padding: r.u64()? as usize,
        },
        "batch_norm2d" => LayerConfig::BatchNorm2d {
            num_features: r.u64()? as usize,
            momentum: r.f64()?,
            eps: r.f64()?,
        },
        "flatten" => LayerConfig::Flatten,
        "tokenizer_num" => LayerConfig::TokenizerNum {
            n_features: r.u64()? as usize,
            d_token: r.u64()? as usize,
        },
        "tokenizer_categ" => {
            let n = r.u64()? as usize;
            let mut cardinalities = Vec::with_capacity(n);
            for _ in 0..n {
                cardinalities.push(r.u64()? as usize);
            }
            LayerConfig::TokenizerCateg { cardinalities, d_token: r.u64()? as usize }
        }
        "merge_sum" => LayerConfig::MergeSum,
        "merge_concat" => LayerConfig::MergeConcat { axis: r.u64()? as usize },
        "sequential" => {
            let n = r.u64()? as usize;
            let mut children = Vec::with_capacity(n);
            for _ in 0..n {
                let name = r.str()?;
                children.push((name, read_layer_config(r)?));
            }
            LayerConfig::Sequential(children)
        }
        other => return Err(Error::Marshal(format!("unknown layer tag `{other}`"))),
    })
}

fn write_shape(w: &mut ByteWriter, shape: &ShapeSpec) {
    w.u64(shape.0.len() as u64);
    for e in &shape.0 {
        match e {
            Extent::Unknown => w.u64(u64::MAX),
            Extent::Known(v) => w.u64(*v as u64),
        }
    }
}

fn read_shape(r: &mut ByteReader<'_>) -> Result<ShapeSpec> {
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.u64()?;
        out.push(if v == u64::MAX { Extent::Unknown } else { Extent::Known(v as usize) });
    }
    Ok(ShapeSpec(out))
}

fn write_assembly(w: &mut ByteWriter, assembly: &Assembly) {
    match assembly {
        Assembly::NumericStack(cols) => {
            w.str("numeric");
            w.u64(cols.len() as u64);
            for c in cols {
                w.str(c);
            }
        }
        Assembly::CategoricalEncode(cols) => {
            w.str("categorical");
            w.u64(cols.len() as u64);
            for c in cols {
                w.str(c);
            }
        }
        Assembly::LazyColumn(col) => {
            w.str("lazy");
            w.str(col);
        }
    }
}

fn read_assembly(r: &mut ByteReader<'_>) -> Result<Assembly> {
    let tag = r.str()?;
    Ok(match tag.as_str() {
        "numeric" | "categorical" => {
            let n = r.u64()? as usize;
            let mut cols = Vec::with_capacity(n);
            for _ in 0..n {
                cols.push(r.str()?);
            }
            if tag == "numeric" {
                Assembly::NumericStack(cols)
            } else {
                Assembly::CategoricalEncode(cols)
            }
        }
        "lazy" => Assembly::LazyColumn(r.str()?),
        other => return Err(Error::Marshal(format!("unknown assembly tag `{other}`"))),
    })
}

fn write_callback_state(w: &mut ByteWriter, state: &CallbackState) {
    match state {
        CallbackState::None => w.str("none"),
        CallbackState::Norms(norms) => {
            w.str("norms");
            w.u64(norms.len() as u64);
            for n in norms {
                w.f64(*n);
            }
        }
        CallbackState::History(table) => {
            w.str("history");
            w.u64(table.rows.len() as u64);
            for (epoch, scores) in &table.rows {
                w.u64(*epoch as u64);
                w.u64(scores.len() as u64);
                for (name, value) in scores {
                    w.str(name);
                    w.f64(*value);
                }
            }
        }
        CallbackState::Bytes(bytes) => {
            w.str("bytes");
            w.u64(bytes.len() as u64);
            w.buf.extend_from_slice(bytes);
        }
    }
}

fn read_callback_state(r: &mut ByteReader<'_>) -> Result<CallbackState> {
    let tag = r.str()?;
    Ok(match tag.as_str() {
        "none" => CallbackState::None,
        "norms" => {
            let n = r.u64()? as usize;
            let mut norms = Vec::with_capacity(n);
            for _ in 0..n {
                norms.push(r.f64()?);
            }
            CallbackState::Norms(norms)
        }
        "history" => {
            let n = r.u64()? as usize;
            let mut rows = Vec::with_capacity(n);
            for _ in 0..n {
                let epoch = r.u64()? as usize;
                let k = r.u64()? as usize;
                let mut scores = Vec::with_capacity(k);
                for _ in 0..k {
                    let name = r.str()?;
                    scores.push((name, r.f64()?));
                }
                rows.push((epoch, scores));
            }
            CallbackState::History(super::callbacks::HistoryTable { rows })
        }
        "bytes" => {
            let n = r.u64()? as usize;
            CallbackState::Bytes(r.take(n)?.to_vec())
        }
        other => return Err(Error::Marshal(format!("unknown callback state tag `{other}`"))),
    })
}

fn write_loss(w: &mut ByteWriter, loss: &LossSpec) {
    let kind = match loss.kind {
        LossKind::CrossEntropy => "cross_entropy",
        LossKind::Mse => "mse",
        LossKind::WinsorizedMse => "winsorized_mse",
    };
    w.str(kind);
    match &loss.class_weight {
        Some(weights) => {
            w.u64(weights.len() as u64);
            for v in weights {
                w.f64(*v);
            }
        }
        None => w.u64(0),
    }
    w.f64(loss.max_loss.unwrap_or(f64::NAN));
}

fn read_loss(r: &mut ByteReader<'_>) -> Result<LossSpec> {
    let kind = match r.str()?.as_str() {
        "cross_entropy" => LossKind::CrossEntropy,
        "mse" => LossKind::Mse,
        "winsorized_mse" => LossKind::WinsorizedMse,
        other => return Err(Error::Marshal(format!("unknown loss `{other}`"))),
    };
    let n = r.u64()? as usize;
    let class_weight = if n == 0 {
        None
    } else {
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(r.f64()?);
        }
        Some(weights)
    };
    let max_loss = r.f64()?;
    Ok(LossSpec {
        kind,
        class_weight,
        max_loss: if max_loss.is_nan() { None } else { Some(max_loss) },
    })
}

fn write_optim(w: &mut ByteWriter, optim: &OptimConfig) {
    w.str(optim.kind.as_str());
    w.f64(optim.lr);
    w.f64(optim.weight_decay);
    w.f64(optim.betas.0);
    w.f64(optim.betas.1);
    w.f64(optim.eps);
}

fn read_optim(r: &mut ByteReader<'_>) -> Result<OptimConfig> {
    let kind: OptimKind = r.str()?.parse()?;
    Ok(OptimConfig {
        kind,
        lr: r.f64()?,
        weight_decay: r.f64()?,
        betas: (r.f64()?, r.f64()?),
        eps: r.f64()?,
    })
}

/// Serialize a trained model with the owning learner's identity and
/// canonical parameter text.
pub fn marshal(model: &TrainedModel, learner_id: &str, param_text: &str) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(learner_id);
    w.str(param_text);
    // network structure
    let graph = &model.network.graph;
    w.u64(graph.nodes.len() as u64);
    for node in &graph.nodes {
        w.str(&node.id);
        write_layer_config(&mut w, &node.module.config());
        w.u64(node.inputs.len() as u64);
        for input in &node.inputs {
            match input {
                NetInput::Ingress(name) => {
                    w.str("ingress");
                    w.str(name);
                }
                NetInput::Node(idx) => {
                    w.str("node");
                    w.u64(*idx as u64);
                }
            }
        }
        write_shape(&mut w, &node.out_shape);
    }
    w.u64(model.network.input_shapes.len() as u64);
    for (name, shape) in &model.network.input_shapes {
        w.str(name);
        write_shape(&mut w, shape);
    }
    w.u64(model.network.output as u64);
    // network state dict: name index then tensors
    let state = model.network.state_dict();
    w.u64(state.len() as u64);
    for (name, _) in &state {
        w.str(name);
    }
    for (_, tensor) in &state {
        w.tensor(tensor);
    }
    // optimizer
    write_optim(&mut w, &model.optim);
    w.u64(model.optimizer_step_count);
    w.u64(model.optimizer_slots.len() as u64);
    for (name, m, v) in &model.optimizer_slots {
        w.str(name);
        w.u64(m.len() as u64);
        for x in m {
            w.buf.extend_from_slice(&x.to_le_bytes());
        }
        for x in v {
            w.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    // callback states
    w.u64(model.callback_states.len() as u64);
    for (id, state) in &model.callback_states {
        w.str(id);
        write_callback_state(&mut w, state);
    }
    // scores and internal tuning
    w.u64(model.internal_valid_scores.len() as u64);
    for (name, value) in &model.internal_valid_scores {
        w.str(name);
        w.f64(*value);
    }
    match model.internal_tuned_epochs {
        Some(e) => {
            w.u64(1);
            w.u64(e as u64);
        }
        None => w.u64(0),
    }
    write_callback_state(&mut w, &CallbackState::History(model.epoch_log.clone()));
    // task meta + loss + plan + batch size
    w.str(model.meta.task_type.as_str());
    w.u64(model.meta.levels.len() as u64);
    for level in &model.meta.levels {
        w.str(level);
    }
    w.u64(model.meta.positive as u64);
    write_loss(&mut w, &model.loss);
    w.u64(model.plan.inputs.len() as u64);
    for (name, assembly) in &model.plan.inputs {
        w.str(name);
        write_assembly(&mut w, assembly);
    }
    w.u64(model.batch_size as u64);
    w.buf
}

/// Restore a trained model; returns it with the learner id and parameter
/// text recorded at marshal time.
pub fn unmarshal(bytes: &[u8]) -> Result<(TrainedModel, String, String)> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Marshal("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Marshal(format!("unsupported format version {version}")));
    }
    let learner_id = r.str()?;
    let param_text = r.str()?;
    let n_nodes = r.u64()? as usize;
    let mut rng = RngState::new(0);
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let id = r.str()?;
        let config = read_layer_config(&mut r)?;
        let n_inputs = r.u64()? as usize;
        let mut inputs = Vec::with_capacity(n_inputs);
        for _ in 0..n_inputs {
            let tag = r.str()?;
            inputs.push(match tag.as_str() {
                "ingress" => NetInput::Ingress(r.str()?),
                "node" => NetInput::Node(r.u64()? as usize),
                other => return Err(Error::Marshal(format!("unknown input tag `{other}`"))),
            });
        }
        let out_shape = read_shape(&mut r)?;
        let module = NeuralModule::from_config(id.clone(), &config, &mut rng)
            .map_err(|e| Error::Marshal(format!("rebuilding `{id}`: {e}")))?;
        nodes.push(NetNode { id, module, inputs, out_shape });
    }
    let n_inputs = r.u64()? as usize;
    let mut input_shapes = Vec::with_capacity(n_inputs);
    for _ in 0..n_inputs {
        let name = r.str()?;
        input_shapes.push((name, read_shape(&mut r)?));
    }
    let output = r.u64()? as usize;
    let mut network = NetworkModule::new(ModuleGraph { nodes }, input_shapes, output)?;
    let n_state = r.u64()? as usize;
    let mut names = Vec::with_capacity(n_state);
    for _ in 0..n_state {
        names.push(r.str()?);
    }
    let mut entries = Vec::with_capacity(n_state);
    for name in names {
        entries.push((name, r.tensor()?));
    }
    network.load_state_dict(&entries)?;
    let optim = read_optim(&mut r)?;
    let optimizer_step_count = r.u64()?;
    let n_slots = r.u64()? as usize;
    let mut optimizer_slots = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        let name = r.str()?;
        let len = r.u64()? as usize;
        let mut m = Vec::with_capacity(len);
        for _ in 0..len {
            m.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        optimizer_slots.push((name, m, v));
    }
    let n_cb = r.u64()? as usize;
    let mut callback_states = Vec::with_capacity(n_cb);
    for _ in 0..n_cb {
        let id = r.str()?;
        callback_states.push((id, read_callback_state(&mut r)?));
    }
    let n_scores = r.u64()? as usize;
    let mut internal_valid_scores = Vec::with_capacity(n_scores);
    for _ in 0..n_scores {
        let name = r.str()?;
        internal_valid_scores.push((name, r.f64()?));
    }
    let internal_tuned_epochs = if r.u64()? == 1 { Some(r.u64()? as usize) } else { None };
    let epoch_log = match read_callback_state(&mut r)? {
        CallbackState::History(table) => table,
        _ => return Err(Error::Marshal("expected the epoch log section".into())),
    };
    let task_type = match r.str()?.as_str() {
        "classif" => TaskType::Classif,
        "regr" => TaskType::Regr,
        other => return Err(Error::Marshal(format!("unknown task type `{other}`"))),
    };
    let n_levels = r.u64()? as usize;
    let mut levels = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        levels.push(r.str()?);
    }
    let positive = r.u64()? as usize;
    let loss = read_loss(&mut r)?;
    let n_plan = r.u64()? as usize;
    let mut inputs = Vec::with_capacity(n_plan);
    for _ in 0..n_plan {
        let name = r.str()?;
        inputs.push((name, read_assembly(&mut r)?));
    }
    let batch_size = r.u64()? as usize;
    if !r.done() {
        return Err(Error::Marshal("trailing bytes after container".into()));
    }
    Ok((
        TrainedModel {
            network,
            plan: BatchPlan { inputs },
            loss,
            optim,
            optimizer_step_count,
            optimizer_slots,
            callback_states,
            internal_valid_scores,
            internal_tuned_epochs,
            epoch_log,
            meta: TaskMeta { task_type, levels, positive },
            batch_size,
        },
        learner_id,
        param_text,
    ))
}

/// Canonical text for a set of parameter values: `name=value` lines sorted
/// by name.
pub fn canonical_param_text(values: &[(String, String)]) -> String {
    let mut sorted: Vec<&(String, String)> = values.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    sorted
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Helper kept close to the container code: the measures named in settings
/// are serialized by id.
pub fn measure_ids(measures: &[Measure]) -> Vec<String> {
    measures.iter().map(|m| m.id()).collect()
}
