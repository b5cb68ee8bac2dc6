//! Shared helpers for the integration and acceptance suites: the
//! finite-difference oracle, random graph generators, and the independent
//! node-by-node network executor.

#![allow(dead_code)]

use pipegrad::data::{categorical_from_labels, Column, Task, TaskType};
use pipegrad::netgraph::{IngressKind, LayerKind, NetInput, NetworkModule};
use pipegrad::params::ParamValue;
use pipegrad::pipeline::{OpKind, PipeOp};
use pipegrad::rng::RngState;
use pipegrad::tensor::{no_grad, Element, Fill, Tensor};
use std::sync::Arc;

pub const FD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-4;

/// Central-difference gradient check over every element of every parameter:
/// ‖autodiff − fd‖ / max(1, ‖fd‖) < tol. The numeric route only ever calls
/// forward code under `no_grad`.
pub fn check_grads(what: &str, params: &[&Tensor<f64>], loss_fn: &dyn Fn() -> Tensor<f64>) {
    for p in params {
        p.zero_grad();
        assert!(p.requires_grad(), "{what}: parameter must require grad");
    }
    let loss = loss_fn();
    loss.backward().unwrap();
    let mut analytic: Vec<f64> = Vec::new();
    for p in params {
        let g = p
            .grad()
            .unwrap_or_else(|| panic!("{what}: gradient missing for a parameter"));
        analytic.extend(g);
    }
    let mut numeric: Vec<f64> = Vec::new();
    no_grad(|| {
        for p in params {
            for i in 0..p.numel() {
                let original = p.data()[i];
                p.data_mut()[i] = original + FD_STEP;
                let up = loss_fn().item();
                p.data_mut()[i] = original - FD_STEP;
                let down = loss_fn().item();
                p.data_mut()[i] = original;
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
        }
    });
    let mut diff_sq = 0.0;
    let mut fd_sq = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        diff_sq += (a - n) * (a - n);
        fd_sq += n * n;
    }
    let rel = diff_sq.sqrt() / fd_sq.sqrt().max(1.0);
    assert!(rel < FD_TOL, "{what}: finite-difference mismatch, rel err {rel:.3e}");
}

pub fn randn<E: Element>(shape: &[usize], rng: &mut RngState, requires_grad: bool) -> Tensor<E> {
    Tensor::create(shape, Fill::Normal(0.0, 1.0), rng, requires_grad).unwrap()
}

/// Values nudged away from non-differentiable kinks (relu at 0, pool ties).
pub fn randn_spread(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let t = Tensor::<f64>::create(shape, Fill::Normal(0.0, 1.0), rng, true).unwrap();
    {
        let mut d = t.data_mut();
        for (i, v) in d.iter_mut().enumerate() {
            if v.abs() < 0.05 {
                *v += 0.1 * v.signum() + if *v == 0.0 { 0.1 } else { 0.0 };
            }
            *v += (i as f64) * 1e-3;
        }
    }
    t
}

/// Separable two-class tabular task.
pub fn classif_task(n: usize, seed: u64) -> Task {
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

pub fn numeric_task(features: usize, rows: usize, seed: u64) -> Task {
    let mut rng = RngState::new(seed);
    let mut columns: Vec<(String, Column)> = (0..features)
        .map(|j| {
            let v: Vec<f64> = (0..rows).map(|_| rng.normal(0.0, 1.0)).collect();
            (format!("x{j}"), Column::Numeric(Arc::new(v)))
        })
        .collect();
    let y: Vec<f64> = (0..rows).map(|_| rng.normal(0.0, 1.0)).collect();
    columns.push(("y".to_string(), Column::Numeric(Arc::new(y))));
    Task::new("prop", TaskType::Regr, columns, "y", None).unwrap()
}

/// Random generating chain of depth <= 6 consistent with the cursor rank.
/// Tokenizer layers are only emitted as the first op (they must directly
/// follow the ingress).
pub fn random_layer_chain(rng: &mut RngState, start_rank: usize) -> Vec<PipeOp> {
    let depth = 1 + rng.below(6) as usize;
    let mut rank = start_rank;
    let mut ops = Vec::new();
    for i in 0..depth {
        let id = format!("op{i}");
        let op = if rank == 2 {
            let choices = if i == 0 { 5 } else { 4 };
            match rng.below(choices) {
                0 => {
                    let mut op = PipeOp::new(id, OpKind::Layer { layer: LayerKind::Linear });
                    op.params
                        .set("out_features", ParamValue::Int(1 + rng.below(32) as i64))
                        .unwrap();
                    op
                }
                1 => PipeOp::new(id, OpKind::Layer { layer: LayerKind::Relu }),
                2 => PipeOp::new(id, OpKind::Layer { layer: LayerKind::Sigmoid }),
                3 => {
                    let mut op = PipeOp::new(id, OpKind::Layer { layer: LayerKind::Dropout });
                    op.params.set("p", ParamValue::Float(rng.uniform(0.0, 0.9))).unwrap();
                    op
                }
                _ => {
                    rank = 3;
                    let mut op =
                        PipeOp::new(id, OpKind::Layer { layer: LayerKind::TokenizerNum });
                    op.params
                        .set("d_token", ParamValue::Int(1 + rng.below(8) as i64))
                        .unwrap();
                    op
                }
            }
        } else {
            rank = 2;
            PipeOp::new(id, OpKind::Layer { layer: LayerKind::Flatten })
        };
        ops.push(op);
    }
    ops
}

pub fn numeric_ingress_op(id: &str) -> PipeOp {
    PipeOp::new(id, OpKind::Ingress { kind: IngressKind::Numeric, shape: None })
}

/// Node-by-node module-graph execution; an independent route from
/// `NetworkModule::forward` used by the collapse-equivalence checks.
pub fn execute_node_by_node(
    network: &mut NetworkModule,
    inputs: &[(String, Tensor<f32>)],
    rng: &mut RngState,
) -> Tensor<f32> {
    let mut values: Vec<Option<Tensor<f32>>> = vec![None; network.graph.nodes.len()];
    for idx in 0..network.graph.nodes.len() {
        let gathered: Vec<Tensor<f32>> = network.graph.nodes[idx]
            .inputs
            .clone()
            .iter()
            .map(|input| match input {
                NetInput::Ingress(name) => {
                    inputs.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone()).unwrap()
                }
                NetInput::Node(i) => values[*i].clone().unwrap(),
            })
            .collect();
        let node = &mut network.graph.nodes[idx];
        values[idx] = Some(node.module.forward(&gathered, rng).unwrap());
    }
    values[network.output].clone().unwrap()
}

pub fn bits(v: Vec<f32>) -> Vec<u32> {
    v.into_iter().map(f32::to_bits).collect()
}
