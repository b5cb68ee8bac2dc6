//! Generating-graph operators: ingress entry points, layer attachment with
//! shape inference, merges, block repetition, training configuration, and
//! the model op that collapses and fits the network.
//!
//! During the predict phase these operators forward the input task (merges
//! feature-union theirs); only the model op produces predictions.

use super::preproc::feature_union;
use super::{ExecCtx, OpKind, OpState, PipeOp, TaskPair, Value};
use crate::error::{Error, Result};
use crate::learner::{
    marshal, predict_network, train_network, unmarshal, Measure, TrainSettings,
};
use crate::netgraph::{
    build_ingress_spec, collapse, infer_layer, Cursor, ModelDescriptor, ModuleGraph,
    NetInput, ShapeSpec,
};
use crate::nn::{LayerConfig, NeuralModule};
use crate::optim::{OptimConfig, OptimKind};
use crate::params::TuneSpec;
use std::cell::RefCell;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeKindSpec {
    Sum,
    /// Concatenation along a non-batch axis (0-based; defaults to 1).
    Concat,
}

pub fn train(op: &mut PipeOp, inputs: Vec<Value>, ctx: &mut ExecCtx) -> Result<Vec<Value>> {
    let mut op_rng = ctx.op_rng(&op.id);
    match &op.kind {
        OpKind::Ingress { kind, shape } => {
            let pair = one_task(inputs, &op.id)?;
            let spec = build_ingress_spec(*kind, &op.id, &pair.train, shape.as_ref())?;
            let cursor = Cursor { at: NetInput::Ingress(op.id.clone()), shape: spec.shape.clone() };
            let md = ModelDescriptor {
                graph: Rc::new(RefCell::new(ModuleGraph::new())),
                task: pair.train,
                valid_task: pair.valid,
                ingresses: vec![spec],
                cursor,
                loss: None,
                optimizer: None,
                callbacks: Vec::new(),
            };
            op.state = Some(OpState::Marker);
            Ok(vec![Value::Descriptor(md)])
        }
        OpKind::Layer { layer } => {
            let mut md = one_descriptor(inputs, &op.id)?;
            let (module, out_shape) = infer_layer(*layer, &op.params, &md, &mut op_rng)?;
            let idx = md.graph.borrow_mut().add_node(
                &op.id,
                module,
                vec![md.cursor.at.clone()],
                out_shape.clone(),
            );
            md.cursor = Cursor { at: NetInput::Node(idx), shape: out_shape };
            op.state = Some(OpState::Marker);
            Ok(vec![Value::Descriptor(md)])
        }
        OpKind::Merge { merge } => {
            let (a, b) = two_descriptors(inputs, &op.id)?;
            let md = merge_descriptors(op, *merge, a, b)?;
            op.state = Some(OpState::Marker);
            Ok(vec![Value::Descriptor(md)])
        }
        OpKind::Block { .. } => {
            let md = one_descriptor(inputs, &op.id)?;
            let n_blocks = op
                .params
                .get("n_blocks")
                .map(|v| v.as_usize())
                .transpose()?
                .unwrap_or(1);
            let OpKind::Block { segment } = &op.kind else { unreachable!() };
            let sig_in = segment.free_input_types();
            let sig_out = segment.free_output_types();
            if sig_in.len() != 1 || sig_out.len() != 1 {
                return Err(Error::pipeop(
                    &op.id,
                    "block segment must map one descriptor to one descriptor",
                ));
            }
            let mut value = Value::Descriptor(md);
            for rep in 0..n_blocks {
                // fresh parameters per repetition: independent rng stream and
                // a fresh copy of the segment's ops
                let mut template = segment.clone();
                template.reset_state();
                let mut rep_ctx =
                    ExecCtx { rng: op_rng.split(100 + rep as u64), exec: ctx.exec };
                let mut outputs = template.train(vec![value], &mut rep_ctx)?;
                value = outputs.pop().expect("segment emits one value");
            }
            op.state = Some(OpState::Marker);
            Ok(vec![value])
        }
        OpKind::AttachLoss { loss } => {
            let mut md = one_descriptor(inputs, &op.id)?;
            if md.loss.is_some() {
                return Err(Error::pipeop(&op.id, "loss already attached"));
            }
            md.loss = Some(loss.clone());
            op.state = Some(OpState::Marker);
            Ok(vec![Value::Descriptor(md)])
        }
        OpKind::AttachOptimizer { kind } => {
            let mut md = one_descriptor(inputs, &op.id)?;
            if md.optimizer.is_some() {
                return Err(Error::pipeop(&op.id, "optimizer already attached"));
            }
            let default_lr = match kind {
                OptimKind::AdamW => 1e-3,
                OptimKind::Sgd => 0.01,
            };
            let default_wd = match kind {
                OptimKind::AdamW => 0.01,
                OptimKind::Sgd => 0.0,
            };
            let lr = op.params.get("lr").map(|v| v.as_float()).transpose()?.unwrap_or(default_lr);
            let wd = op
                .params
                .get("weight_decay")
                .map(|v| v.as_float())
                .transpose()?
                .unwrap_or(default_wd);
            let config = match kind {
                OptimKind::AdamW => OptimConfig::adamw(lr).with_weight_decay(wd),
                OptimKind::Sgd => OptimConfig::sgd(lr).with_weight_decay(wd),
            };
            md.optimizer = Some(config);
            op.state = Some(OpState::Marker);
            Ok(vec![Value::Descriptor(md)])
        }
        OpKind::AttachCallbacks { callbacks } => {
            let mut md = one_descriptor(inputs, &op.id)?;
            md.callbacks.extend(callbacks.iter().cloned());
            op.state = Some(OpState::Marker);
            Ok(vec![Value::Descriptor(md)])
        }
        OpKind::Model => {
            let md = one_descriptor(inputs, &op.id)?;
            let loss = md
                .loss
                .clone()
                .ok_or_else(|| Error::pipeop(&op.id, "training requires an attached loss"))?;
            let optim = md
                .optimizer
                .clone()
                .ok_or_else(|| Error::pipeop(&op.id, "training requires an attached optimizer"))?;
            let settings = model_settings(op, &mut op_rng)?;
            let network = collapse(&md)?;
            let plan = crate::data::BatchPlan {
                inputs: md
                    .ingresses
                    .iter()
                    .map(|i| (i.name.clone(), i.assembly.clone()))
                    .collect(),
            };
            let model = train_network(
                network,
                plan,
                &md.task,
                md.valid_task.as_ref(),
                loss,
                optim,
                &md.callbacks,
                &settings,
            )?;
            let param_text = marshal_param_text(op);
            let bytes = marshal(&model, &op.id, &param_text);
            op.state = Some(OpState::Model(bytes));
            Ok(vec![Value::Null])
        }
        _ => unreachable!("not a net op"),
    }
}

pub fn predict(op: &PipeOp, inputs: Vec<Value>, _ctx: &mut ExecCtx) -> Result<Vec<Value>> {
    match &op.kind {
        OpKind::Ingress { .. }
        | OpKind::Layer { .. }
        | OpKind::Block { .. }
        | OpKind::AttachLoss { .. }
        | OpKind::AttachOptimizer { .. }
        | OpKind::AttachCallbacks { .. } => {
            // forward the input task
            let pair = one_task(inputs, &op.id)?;
            Ok(vec![Value::Task(TaskPair::new(pair.train))])
        }
        OpKind::Merge { .. } => {
            let (a, b) = two_tasks(inputs, &op.id)?;
            Ok(vec![Value::Task(TaskPair::new(feature_union(&[a.train, b.train])?))])
        }
        OpKind::Model => {
            let Some(OpState::Model(bytes)) = &op.state else {
                return Err(Error::pipeop(&op.id, "predict called before train"));
            };
            let pair = one_task(inputs, &op.id)?;
            let (mut model, _, _) = unmarshal(bytes)?;
            let prediction = predict_network(
                &mut model.network,
                &model.plan,
                &pair.train,
                model.batch_size,
                &model.meta,
            )?;
            Ok(vec![Value::Prediction(prediction)])
        }
        _ => unreachable!("not a net op"),
    }
}

fn model_settings(op: &PipeOp, op_rng: &mut crate::rng::RngState) -> Result<TrainSettings> {
    // epochs tuned internally run to their declared upper bound
    let epochs = match op.params.desc("epochs").map(|d| d.tune.clone()) {
        Ok(TuneSpec::Internal { upper }) => upper as usize,
        _ => op
            .params
            .get("epochs")
            .ok_or_else(|| Error::pipeop(&op.id, "parameter `epochs` is required"))?
            .as_usize()?,
    };
    let batch_size = op
        .params
        .get("batch_size")
        .map(|v| v.as_usize())
        .transpose()?
        .unwrap_or(32);
    let patience = op.params.get("patience").map(|v| v.as_usize()).transpose()?;
    if matches!(op.params.desc("epochs").map(|d| d.tune.clone()), Ok(TuneSpec::Internal { .. }))
        && patience.is_none()
    {
        return Err(Error::pipeop(&op.id, "internal epoch tuning requires `patience`"));
    }
    let seed = match op.params.get("seed") {
        Some(v) => v.as_int()? as u64,
        None => op_rng.split(7).next_u64(),
    };
    let shuffle = op.params.get("shuffle").map(|v| v.as_bool()).transpose()?.unwrap_or(true);
    let parse_measures = |name: &str| -> Result<Vec<Measure>> {
        match op.params.get(name) {
            None => Ok(Vec::new()),
            Some(v) => v
                .as_str()?
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse())
                .collect(),
        }
    };
    Ok(TrainSettings {
        epochs,
        batch_size,
        shuffle,
        patience,
        measures_train: parse_measures("measures_train")?,
        measures_valid: parse_measures("measures_valid")?,
        seed,
    })
}

fn marshal_param_text(op: &PipeOp) -> String {
    let values: Vec<(String, String)> = op
        .params
        .values()
        .iter()
        .map(|(k, v)| (k.clone(), v.to_string()))
        .collect();
    crate::learner::canonical_param_text(&values)
}

fn merge_descriptors(
    op: &PipeOp,
    merge: MergeKindSpec,
    a: ModelDescriptor,
    b: ModelDescriptor,
) -> Result<ModelDescriptor> {
    // Unify the underlying module graphs: shared-by-reference branches
    // already extend one graph; independent ingress paths get unioned.
    let (graph, cursor_b_at) = if Rc::ptr_eq(&a.graph, &b.graph) {
        (Rc::clone(&a.graph), b.cursor.at.clone())
    } else {
        let remapped = {
            let mut ga = a.graph.borrow_mut();
            let gb = b.graph.borrow();
            let mut index_map = Vec::with_capacity(gb.nodes.len());
            for node in &gb.nodes {
                let inputs = node
                    .inputs
                    .iter()
                    .map(|i| match i {
                        NetInput::Ingress(name) => NetInput::Ingress(name.clone()),
                        NetInput::Node(idx) => NetInput::Node(index_map[*idx]),
                    })
                    .collect();
                let idx = ga.add_node(
                    &node.id,
                    crate::netgraph::clone_module_sharing_params(&node.module),
                    inputs,
                    node.out_shape.clone(),
                );
                index_map.push(idx);
            }
            match &b.cursor.at {
                NetInput::Ingress(name) => NetInput::Ingress(name.clone()),
                NetInput::Node(idx) => NetInput::Node(index_map[*idx]),
            }
        };
        (Rc::clone(&a.graph), remapped)
    };
    // union the ingresses
    let mut ingresses = a.ingresses.clone();
    for spec in &b.ingresses {
        match ingresses.iter().find(|i| i.name == spec.name) {
            Some(existing) if existing == spec => {}
            Some(_) => {
                return Err(Error::pipeop(
                    &op.id,
                    format!("conflicting ingress `{}` across merged branches", spec.name),
                ))
            }
            None => ingresses.push(spec.clone()),
        }
    }
    // merged static shape + merge node
    let shapes = [&a.cursor.shape, &b.cursor.shape];
    let merge_config = match merge {
        MergeKindSpec::Sum => LayerConfig::MergeSum,
        MergeKindSpec::Concat => {
            let axis = op.params.get("axis").map(|v| v.as_usize()).transpose()?.unwrap_or(1);
            LayerConfig::MergeConcat { axis }
        }
    };
    let out_shape: ShapeSpec = crate::netgraph::merge_shape(&merge_config, &shapes)?;
    let module = NeuralModule::from_config(op.id.clone(), &merge_config, &mut crate::rng::RngState::new(0))?;
    let idx = graph.borrow_mut().add_node(
        &op.id,
        module,
        vec![a.cursor.at.clone(), cursor_b_at],
        out_shape.clone(),
    );
    // tasks feature-unioned for predict-phase routing
    let task = feature_union(&[a.task.clone(), b.task.clone()])?;
    let valid_task = match (&a.valid_task, &b.valid_task) {
        (Some(va), Some(vb)) => Some(feature_union(&[va.clone(), vb.clone()])?),
        _ => None,
    };
    fn merge_option<T>(x: Option<T>, y: Option<T>, what: &str, op: &str) -> Result<Option<T>> {
        match (x, y) {
            (Some(_), Some(_)) => {
                Err(Error::pipeop(op, format!("{what} attached on both merged branches")))
            }
            (a, b) => Ok(a.or(b)),
        }
    }
    let loss = merge_option(a.loss.clone(), b.loss.clone(), "loss", &op.id)?;
    let optimizer = merge_option(a.optimizer.clone(), b.optimizer.clone(), "optimizer", &op.id)?;
    let mut callbacks = a.callbacks.clone();
    callbacks.extend(b.callbacks.clone());
    Ok(ModelDescriptor {
        graph,
        task,
        valid_task,
        ingresses,
        cursor: Cursor { at: NetInput::Node(idx), shape: out_shape },
        loss,
        optimizer,
        callbacks,
    })
}

fn one_task(inputs: Vec<Value>, op: &str) -> Result<TaskPair> {
    let mut iter = inputs.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::pipeop(op, "expected one input"))?
        .into_task(op)?;
    if iter.next().is_some() {
        return Err(Error::pipeop(op, "expected exactly one input"));
    }
    Ok(first)
}

fn two_tasks(inputs: Vec<Value>, op: &str) -> Result<(TaskPair, TaskPair)> {
    let mut iter = inputs.into_iter();
    let a = iter
        .next()
        .ok_or_else(|| Error::pipeop(op, "expected two inputs"))?
        .into_task(op)?;
    let b = iter
        .next()
        .ok_or_else(|| Error::pipeop(op, "expected two inputs"))?
        .into_task(op)?;
    Ok((a, b))
}

fn one_descriptor(inputs: Vec<Value>, op: &str) -> Result<ModelDescriptor> {
    let mut iter = inputs.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::pipeop(op, "expected one input"))?
        .into_descriptor(op)?;
    if iter.next().is_some() {
        return Err(Error::pipeop(op, "expected exactly one input"));
    }
    Ok(first)
}

fn two_descriptors(inputs: Vec<Value>, op: &str) -> Result<(ModelDescriptor, ModelDescriptor)> {
    let mut iter = inputs.into_iter();
    let a = iter
        .next()
        .ok_or_else(|| Error::pipeop(op, "expected two inputs"))?
        .into_descriptor(op)?;
    let b = iter
        .next()
        .ok_or_else(|| Error::pipeop(op, "expected two inputs"))?
        .into_descriptor(op)?;
    Ok((a, b))
}
