use super::*;
use crate::data::{
    categorical_from_labels, synth_multimodal, Column, MultimodalSpec, Task, TaskType,
};
use crate::learner::CallbackConfig;
use crate::netgraph::{Extent, IngressKind, LayerKind, ShapeSpec};
use crate::nn::LossSpec;
use crate::optim::OptimKind;
use crate::params::{ParamValue, TuneSpec};
use std::sync::Arc;

fn ctx() -> ExecCtx {
    ExecCtx::new(99)
}

fn tiny_classif_task() -> Task {
    let x: Vec<f64> = (0..12).map(|i| i as f64 / 3.0).collect();
    let labels: Vec<&str> = (0..12).map(|i| if i % 3 == 0 { "a" } else { "b" }).collect();
    Task::new(
        "tiny",
        TaskType::Classif,
        vec![
            ("x".to_string(), Column::Numeric(Arc::new(x))),
            (
                "color".to_string(),
                Column::Categorical(Arc::new(categorical_from_labels(&["r", "g", "r", "b", "g", "r", "b", "r", "g", "r", "b", "g"]))),
            ),
            (
                "y".to_string(),
                Column::Categorical(Arc::new(categorical_from_labels(&labels))),
            ),
        ],
        "y",
        None,
    )
    .unwrap()
}

fn train_task(graph: &mut PipelineGraph, task: Task) -> Task {
    let out = graph.train(vec![Value::Task(TaskPair::new(task))], &mut ctx()).unwrap();
    match out.into_iter().next().unwrap() {
        Value::Task(pair) => pair.train,
        _ => panic!("expected task output"),
    }
}

#[test]
fn concat_two_single_ops_yields_chain() {
    let a = PipelineGraph::from_op(PipeOp::new("select", OpKind::Select { selector: Selector::All }));
    let b = PipelineGraph::from_op(PipeOp::new("encode", OpKind::EncodeOnehot));
    let g = PipelineGraph::concat(a, b).unwrap();
    assert_eq!(g.node_count(), 2);
    assert_eq!(g.edge_count(), 1);
    assert_eq!(g.free_input_count(), 1);
    assert_eq!(g.free_output_count(), 1);
}

#[test]
fn concat_arity_mismatch_is_an_error() {
    let two_outputs = PipelineGraph::parallel(vec![
        PipelineGraph::from_op(PipeOp::new("s1", OpKind::Select { selector: Selector::All })),
        PipelineGraph::from_op(PipeOp::new("s2", OpKind::Select { selector: Selector::All })),
    ])
    .unwrap();
    let one_input = PipelineGraph::from_op(PipeOp::new("encode", OpKind::EncodeOnehot));
    assert!(PipelineGraph::concat(two_outputs, one_input).is_err());
}

#[test]
fn concat_type_mismatch_fails_at_construction() {
    // Layer wants a descriptor on the train channel, select emits a task.
    let select = PipelineGraph::from_op(PipeOp::new("s", OpKind::Select { selector: Selector::All }));
    let layer = PipelineGraph::from_op(PipeOp::new("lin", OpKind::Layer { layer: LayerKind::Linear }));
    assert!(PipelineGraph::concat(select, layer).is_err());
}

#[test]
fn fan_in_of_two_graphs_into_a_merge() {
    let paths = PipelineGraph::parallel(vec![
        PipelineGraph::from_op(PipeOp::new("in1", OpKind::Ingress { kind: IngressKind::Numeric, shape: None })),
        PipelineGraph::from_op(PipeOp::new("in2", OpKind::Ingress { kind: IngressKind::Categorical, shape: None })),
    ])
    .unwrap();
    let merge = PipelineGraph::from_op(PipeOp::new("sum", OpKind::Merge { merge: MergeKindSpec::Sum }));
    let g = PipelineGraph::concat(paths, merge).unwrap();
    assert_eq!(g.node_count(), 3);
    assert_eq!(g.edge_count(), 2);
    assert_eq!(g.free_input_count(), 2);
    assert_eq!(g.free_output_count(), 1);
}

#[test]
fn id_collisions_resolve_with_numeric_suffix() {
    let a = PipelineGraph::from_op(PipeOp::new("select", OpKind::Select { selector: Selector::All }));
    let b = PipelineGraph::from_op(PipeOp::new("select", OpKind::Select { selector: Selector::All }));
    let g = PipelineGraph::concat(a, b).unwrap();
    assert_eq!(g.node_ids(), vec!["select", "select_2"]);
}

#[test]
fn select_by_type_and_name() {
    let task = synth_multimodal(&MultimodalSpec { n: 40, ..Default::default() }).unwrap();
    // numeric selector drops factor and lazy columns
    let mut g = PipelineGraph::from_op(PipeOp::new(
        "select",
        OpKind::Select { selector: Selector::Types(vec!["numeric".into(), "integer".into()]) },
    ));
    let out = train_task(&mut g, task.clone());
    assert_eq!(out.feature_names(), &["age".to_string()]);

    let mut by_name = PipelineGraph::from_op(PipeOp::new(
        "select",
        OpKind::Select { selector: Selector::Names(vec!["image".into()]) },
    ));
    let out = train_task(&mut by_name, task.clone());
    assert_eq!(out.feature_names(), &["image".to_string()]);

    let mut all = PipelineGraph::from_op(PipeOp::new(
        "select",
        OpKind::Select { selector: Selector::All },
    ));
    let out = train_task(&mut all, task.clone());
    assert_eq!(out.feature_names(), task.feature_names());
}

#[test]
fn selector_matching_zero_features_yields_an_empty_feature_task() {
    let task = tiny_classif_task();
    let mut g = PipelineGraph::from_op(PipeOp::new(
        "select",
        OpKind::Select { selector: Selector::Types(vec!["lazy_tensor".into()]) },
    ));
    let out = train_task(&mut g, task);
    assert!(out.feature_names().is_empty(), "empty feature task is allowed");
}

#[test]
fn encode_onehot_expands_factors() {
    let task = tiny_classif_task();
    let mut g = PipelineGraph::from_op(PipeOp::new("encode", OpKind::EncodeOnehot));
    let out = train_task(&mut g, task);
    assert!(out.feature_names().contains(&"color.r".to_string()));
    assert!(out.feature_names().contains(&"color.g".to_string()));
    assert!(out.feature_names().contains(&"color.b".to_string()));
    assert!(out.feature_names().contains(&"x".to_string()));
    let Column::Numeric(r) = out.column("color.r").unwrap() else { panic!() };
    assert_eq!(r[0], 1.0);
    assert_eq!(r[1], 0.0);
}

#[test]
fn encode_indicator_pattern_matches_example() {
    // factor {a,b} over rows (a,b,a) -> columns (1,0),(0,1),(1,0)
    let task = Task::new(
        "t",
        TaskType::Regr,
        vec![
            (
                "f".to_string(),
                Column::Categorical(Arc::new(categorical_from_labels(&["a", "b", "a"]))),
            ),
            ("y".to_string(), Column::Numeric(Arc::new(vec![0.0, 1.0, 2.0]))),
        ],
        "y",
        None,
    )
    .unwrap();
    let mut g = PipelineGraph::from_op(PipeOp::new("encode", OpKind::EncodeOnehot));
    let out = train_task(&mut g, task);
    let Column::Numeric(a) = out.column("f.a").unwrap() else { panic!() };
    let Column::Numeric(b) = out.column("f.b").unwrap() else { panic!() };
    assert_eq!(a.as_ref(), &vec![1.0, 0.0, 1.0]);
    assert_eq!(b.as_ref(), &vec![0.0, 1.0, 0.0]);
}

#[test]
fn encode_without_factors_is_identity_and_unseen_level_errors() {
    let plain = Task::new(
        "t",
        TaskType::Regr,
        vec![
            ("x".to_string(), Column::Numeric(Arc::new(vec![1.0, 2.0]))),
            ("y".to_string(), Column::Numeric(Arc::new(vec![0.0, 1.0]))),
        ],
        "y",
        None,
    )
    .unwrap();
    let mut g = PipelineGraph::from_op(PipeOp::new("encode", OpKind::EncodeOnehot));
    let out = train_task(&mut g, plain.clone());
    assert_eq!(out.feature_names(), plain.feature_names());

    // train on {a,b}, predict a row with level c
    let train = Task::new(
        "t",
        TaskType::Regr,
        vec![
            (
                "f".to_string(),
                Column::Categorical(Arc::new(categorical_from_labels(&["a", "b"]))),
            ),
            ("y".to_string(), Column::Numeric(Arc::new(vec![0.0, 1.0]))),
        ],
        "y",
        None,
    )
    .unwrap();
    let predict = Task::new(
        "t",
        TaskType::Regr,
        vec![
            (
                "f".to_string(),
                Column::Categorical(Arc::new(categorical_from_labels(&["c"]))),
            ),
            ("y".to_string(), Column::Numeric(Arc::new(vec![0.0]))),
        ],
        "y",
        None,
    )
    .unwrap();
    let mut g = PipelineGraph::from_op(PipeOp::new("encode", OpKind::EncodeOnehot));
    train_task(&mut g, train);
    let err = g.predict(vec![Value::Task(TaskPair::new(predict))], &mut ctx());
    assert!(err.is_err(), "unseen level at predict is an error");
}

#[test]
fn impute_hist_draws_from_the_empirical_distribution() {
    let n = 3000;
    let mut values = vec![f64::NAN; n];
    // observed multiset {1,1,3}
    values[0] = 1.0;
    values[1] = 1.0;
    values[2] = 3.0;
    let task = Task::new(
        "t",
        TaskType::Regr,
        vec![
            ("x".to_string(), Column::Numeric(Arc::new(values))),
            ("y".to_string(), Column::Numeric(Arc::new(vec![0.0; n]))),
        ],
        "y",
        None,
    )
    .unwrap();
    let mut g = PipelineGraph::from_op(PipeOp::new("impute", OpKind::ImputeHist));
    let out = train_task(&mut g, task);
    let Column::Numeric(x) = out.column("x").unwrap() else { panic!() };
    let ones = x.iter().filter(|&&v| v == 1.0).count();
    let threes = x.iter().filter(|&&v| v == 3.0).count();
    assert_eq!(ones + threes, n, "imputed values come from {{1,3}}");
    let share = ones as f64 / n as f64;
    assert!((share - 2.0 / 3.0).abs() < 0.05, "P(1) ~ 2/3, got {share}");
}

#[test]
fn impute_without_missings_is_identity_and_uses_train_distribution_at_predict() {
    let complete = Task::new(
        "t",
        TaskType::Regr,
        vec![
            ("x".to_string(), Column::Numeric(Arc::new(vec![5.0, 6.0]))),
            ("y".to_string(), Column::Numeric(Arc::new(vec![0.0, 1.0]))),
        ],
        "y",
        None,
    )
    .unwrap();
    let mut g = PipelineGraph::from_op(PipeOp::new("impute", OpKind::ImputeHist));
    let out = train_task(&mut g, complete);
    let Column::Numeric(x) = out.column("x").unwrap() else { panic!() };
    assert_eq!(x.as_ref(), &vec![5.0, 6.0]);

    // predict-time missing cells draw from the train-time distribution {5,6}
    let with_missing = Task::new(
        "t",
        TaskType::Regr,
        vec![
            ("x".to_string(), Column::Numeric(Arc::new(vec![f64::NAN, 100.0]))),
            ("y".to_string(), Column::Numeric(Arc::new(vec![0.0, 1.0]))),
        ],
        "y",
        None,
    )
    .unwrap();
    let out = g
        .predict(vec![Value::Task(TaskPair::new(with_missing))], &mut ctx())
        .unwrap();
    let Value::Task(pair) = &out[0] else { panic!() };
    let Column::Numeric(x) = pair.train.column("x").unwrap() else { panic!() };
    assert!(x[0] == 5.0 || x[0] == 6.0, "imputed from train distribution, got {}", x[0]);
    assert_eq!(x[1], 100.0);
}

#[test]
fn impute_entirely_missing_feature_is_an_error() {
    let task = Task::new(
        "t",
        TaskType::Regr,
        vec![
            ("x".to_string(), Column::Numeric(Arc::new(vec![f64::NAN, f64::NAN]))),
            ("y".to_string(), Column::Numeric(Arc::new(vec![0.0, 1.0]))),
        ],
        "y",
        None,
    )
    .unwrap();
    let mut g = PipelineGraph::from_op(PipeOp::new("impute", OpKind::ImputeHist));
    assert!(g.train(vec![Value::Task(TaskPair::new(task))], &mut ctx()).is_err());
}

fn imbalanced_task(minority: usize, majority: usize) -> Task {
    let labels: Vec<&str> = (0..minority + majority)
        .map(|i| if i < minority { "pos" } else { "neg" })
        .collect();
    let x: Vec<f64> = (0..labels.len()).map(|i| i as f64).collect();
    Task::new(
        "t",
        TaskType::Classif,
        vec![
            ("x".to_string(), Column::Numeric(Arc::new(x))),
            (
                "y".to_string(),
                Column::Categorical(Arc::new(categorical_from_labels(&labels))),
            ),
        ],
        "y",
        None,
    )
    .unwrap()
}

#[test]
fn class_balance_upsamples_the_minority() {
    let task = imbalanced_task(10, 100);
    let mut op = PipeOp::new("balance", OpKind::ClassBalance);
    op.params.set("ratio", ParamValue::Float(4.0)).unwrap();
    let mut g = PipelineGraph::from_op(op);
    let out = train_task(&mut g, task);
    let codes = out.class_codes().unwrap();
    let pos = codes.iter().filter(|&&c| c == 0).count();
    let neg = codes.iter().filter(|&&c| c == 1).count();
    assert_eq!((pos, neg), (40, 100));
}

#[test]
fn class_balance_identity_and_phase_rules() {
    let task = imbalanced_task(10, 100);
    let mut op = PipeOp::new("balance", OpKind::ClassBalance);
    op.params.set("ratio", ParamValue::Float(1.0)).unwrap();
    assert!(op.params.set("ratio", ParamValue::Float(0.5)).is_err(), "ratio below 1 rejected");
    let mut g = PipelineGraph::from_op(op);
    let out = train_task(&mut g, task.clone());
    assert_eq!(out.row_ids(), task.row_ids(), "ratio 1 is the identity");
    // predict phase ignores the ratio entirely
    let out = g
        .predict(vec![Value::Task(TaskPair::new(task.clone()))], &mut ctx())
        .unwrap();
    let Value::Task(pair) = &out[0] else { panic!() };
    assert_eq!(pair.train.row_ids(), task.row_ids());
}

#[test]
fn feature_union_rules() {
    let task = tiny_classif_task();
    let mut g = PipelineGraph::from_op(PipeOp::new("union", OpKind::FeatureUnion { arity: 2 }));
    let out = g
        .train(
            vec![
                Value::Task(TaskPair::new(task.clone())),
                Value::Task(TaskPair::new(task.clone())),
            ],
            &mut ctx(),
        )
        .unwrap();
    let Value::Task(pair) = &out[0] else { panic!() };
    assert_eq!(pair.train.feature_names(), task.feature_names(), "union(t, t) = t");

    // conflicting content with the same name errors
    let other = Task::new(
        "t2",
        TaskType::Classif,
        vec![
            ("x".to_string(), Column::Numeric(Arc::new(vec![9.0; 12]))),
            ("y".to_string(), task.column("y").unwrap().clone()),
        ],
        "y",
        None,
    )
    .unwrap();
    let mut g = PipelineGraph::from_op(PipeOp::new("union", OpKind::FeatureUnion { arity: 2 }));
    let err = g.train(
        vec![Value::Task(TaskPair::new(task.clone())), Value::Task(TaskPair::new(other))],
        &mut ctx(),
    );
    assert!(err.is_err());
}

#[test]
fn predict_before_train_is_an_error() {
    let mut g = PipelineGraph::from_op(PipeOp::new("encode", OpKind::EncodeOnehot));
    let err = g.predict(vec![Value::Task(TaskPair::new(tiny_classif_task()))], &mut ctx());
    assert!(err.is_err());
}

fn branch_of_activations() -> PipeOp {
    let relu = PipelineGraph::from_op(PipeOp::new("relu", OpKind::Layer { layer: LayerKind::Relu }));
    let sigmoid =
        PipelineGraph::from_op(PipeOp::new("sigmoid", OpKind::Layer { layer: LayerKind::Sigmoid }));
    PipeOp::new(
        "branch",
        OpKind::Branch { paths: vec![("relu".into(), relu), ("sigmoid".into(), sigmoid)] },
    )
}

fn numeric_regr_task(n: usize) -> Task {
    let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    let x2: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
    let y: Vec<f64> = x.iter().zip(&x2).map(|(a, b)| 2.0 * a - b).collect();
    Task::new(
        "numeric",
        TaskType::Regr,
        vec![
            ("x1".to_string(), Column::Numeric(Arc::new(x))),
            ("x2".to_string(), Column::Numeric(Arc::new(x2))),
            ("y".to_string(), Column::Numeric(Arc::new(y))),
        ],
        "y",
        None,
    )
    .unwrap()
}

#[test]
fn branch_executes_only_the_selected_path() {
    let task = numeric_regr_task(8);
    let ingress = PipeOp::new("ingress", OpKind::Ingress { kind: IngressKind::Numeric, shape: None });
    let mut branch = branch_of_activations();
    branch.params.set("selection", ParamValue::Str("relu".into())).unwrap();
    assert!(
        branch.params.set("selection", ParamValue::Str("tanh".into())).is_err(),
        "absent path name rejected"
    );
    let mut g = PipelineGraph::chain(vec![ingress, branch]).unwrap();
    let out = g.train(vec![Value::Task(TaskPair::new(task))], &mut ctx()).unwrap();
    let Value::Descriptor(md) = &out[0] else { panic!("descriptor expected") };
    let graph = md.graph.borrow();
    assert_eq!(graph.nodes.len(), 1, "only the selected path was elaborated");
    assert_eq!(graph.nodes[0].id, "relu");
}

#[test]
fn ingress_shapes_and_label_coding() {
    // 10 numeric features -> (NA,10)
    let mut columns: Vec<(String, Column)> = (0..10)
        .map(|j| (format!("x{j}"), Column::Numeric(Arc::new(vec![0.0, 1.0]))))
        .collect();
    columns.push(("y".to_string(), Column::Numeric(Arc::new(vec![0.0, 1.0]))));
    let task = Task::new("t", TaskType::Regr, columns, "y", None).unwrap();
    let mut g = PipelineGraph::from_op(PipeOp::new(
        "ingress",
        OpKind::Ingress { kind: IngressKind::Numeric, shape: None },
    ));
    let out = g.train(vec![Value::Task(TaskPair::new(task))], &mut ctx()).unwrap();
    let Value::Descriptor(md) = &out[0] else { panic!() };
    assert_eq!(md.cursor.shape.to_string(), "(NA,10)");

    // categorical coding is 0-based first-appearance: row "b" of {a,b,c} -> 1
    let task = Task::new(
        "t",
        TaskType::Regr,
        vec![
            (
                "f".to_string(),
                Column::Categorical(Arc::new(categorical_from_labels(&["a", "b", "c"]))),
            ),
            ("y".to_string(), Column::Numeric(Arc::new(vec![0.0, 1.0, 2.0]))),
        ],
        "y",
        None,
    )
    .unwrap();
    let plan = crate::data::BatchPlan {
        inputs: vec![(
            "ingress".to_string(),
            crate::data::Assembly::CategoricalEncode(vec!["f".to_string()]),
        )],
    };
    let mut rng = crate::rng::RngState::new(0);
    let batch = crate::data::assemble_batch(
        &task,
        &plan,
        &[0, 1, 2],
        crate::data::Phase::Train,
        &mut rng,
    )
    .unwrap();
    assert_eq!(batch.x[0].1.to_vec(), vec![0.0, 1.0, 2.0]);
}

#[test]
fn ingress_with_no_matching_features_errors() {
    let task = numeric_regr_task(4);
    let mut g = PipelineGraph::from_op(PipeOp::new(
        "ingress",
        OpKind::Ingress { kind: IngressKind::Categorical, shape: None },
    ));
    assert!(g.train(vec![Value::Task(TaskPair::new(task))], &mut ctx()).is_err());
}

#[test]
fn layer_op_infers_aux_parameters_from_the_cursor() {
    let task = numeric_regr_task(6);
    let ingress = PipeOp::new("ingress", OpKind::Ingress { kind: IngressKind::Numeric, shape: None });
    let mut linear = PipeOp::new("linear", OpKind::Layer { layer: LayerKind::Linear });
    linear.params.set("out_features", ParamValue::Int(7)).unwrap();
    let head = PipeOp::new("head", OpKind::Layer { layer: LayerKind::Head });
    let mut g = PipelineGraph::chain(vec![ingress, linear, head]).unwrap();
    let out = g.train(vec![Value::Task(TaskPair::new(task))], &mut ctx()).unwrap();
    let Value::Descriptor(md) = &out[0] else { panic!() };
    assert_eq!(md.cursor.shape, ShapeSpec(vec![Extent::Unknown, Extent::Known(1)]));
    let graph = md.graph.borrow();
    assert_eq!(graph.nodes.len(), 2);
    // linear inferred in_features = 2 from the (NA,2) cursor
    let params = graph.nodes[0].module.named_parameters();
    assert_eq!(params[0].1.shape(), &[7, 2]);
}

#[test]
fn block_repetition_traces_shapes_and_keeps_parameters_fresh() {
    let task = numeric_regr_task(6);
    let mut inner = PipeOp::new("linear", OpKind::Layer { layer: LayerKind::Linear });
    inner.params.set("out_features", ParamValue::Int(32)).unwrap();
    let segment = PipelineGraph::from_op(inner);
    let mut block = PipeOp::new("block", OpKind::Block { segment });
    block.params.set("n_blocks", ParamValue::Int(3)).unwrap();
    let ingress = PipeOp::new("ingress", OpKind::Ingress { kind: IngressKind::Numeric, shape: None });
    let mut g = PipelineGraph::chain(vec![ingress, block]).unwrap();
    let out = g.train(vec![Value::Task(TaskPair::new(task))], &mut ctx()).unwrap();
    let Value::Descriptor(md) = &out[0] else { panic!() };
    let graph = md.graph.borrow();
    assert_eq!(graph.nodes.len(), 3);
    let shapes: Vec<Vec<usize>> = graph
        .nodes
        .iter()
        .map(|n| n.module.named_parameters()[0].1.shape().to_vec())
        .collect();
    // in_features trace: 2 (task features), then 32, then 32
    assert_eq!(shapes[0], vec![32, 2]);
    assert_eq!(shapes[1], vec![32, 32]);
    assert_eq!(shapes[2], vec![32, 32]);
    // fresh parameters per repetition
    let w1 = graph.nodes[1].module.named_parameters()[0].1.to_vec();
    let w2 = graph.nodes[2].module.named_parameters()[0].1.to_vec();
    assert_ne!(w1, w2, "repetitions own disjoint, independently initialized weights");
}

#[test]
fn attach_ops_populate_descriptor_slots_once() {
    let task = numeric_regr_task(6);
    let g_ops = vec![
        PipeOp::new("ingress", OpKind::Ingress { kind: IngressKind::Numeric, shape: None }),
        PipeOp::new("loss", OpKind::AttachLoss { loss: LossSpec::mse() }),
    ];
    let mut g = PipelineGraph::chain(g_ops).unwrap();
    let out = g.train(vec![Value::Task(TaskPair::new(task.clone()))], &mut ctx()).unwrap();
    let Value::Descriptor(md) = &out[0] else { panic!() };
    assert!(md.loss.is_some());
    assert!(md.optimizer.is_none(), "optimizer still absent");

    // attach order is interchangeable
    let g_ops = vec![
        PipeOp::new("ingress", OpKind::Ingress { kind: IngressKind::Numeric, shape: None }),
        PipeOp::new("optimizer", OpKind::AttachOptimizer { kind: OptimKind::AdamW }),
        PipeOp::new("loss", OpKind::AttachLoss { loss: LossSpec::mse() }),
    ];
    let mut g = PipelineGraph::chain(g_ops).unwrap();
    let out = g.train(vec![Value::Task(TaskPair::new(task.clone()))], &mut ctx()).unwrap();
    let Value::Descriptor(md) = &out[0] else { panic!() };
    assert!(md.loss.is_some() && md.optimizer.is_some());

    // double attachment errors
    let g_ops = vec![
        PipeOp::new("ingress", OpKind::Ingress { kind: IngressKind::Numeric, shape: None }),
        PipeOp::new("loss1", OpKind::AttachLoss { loss: LossSpec::mse() }),
        PipeOp::new("loss2", OpKind::AttachLoss { loss: LossSpec::mse() }),
    ];
    let mut g = PipelineGraph::chain(g_ops).unwrap();
    assert!(g.train(vec![Value::Task(TaskPair::new(task))], &mut ctx()).is_err());
}

#[test]
fn model_op_requires_loss_and_optimizer() {
    let task = numeric_regr_task(6);
    let mut model = PipeOp::new("model", OpKind::Model);
    model.params.set("epochs", ParamValue::Int(1)).unwrap();
    let g_ops = vec![
        PipeOp::new("ingress", OpKind::Ingress { kind: IngressKind::Numeric, shape: None }),
        PipeOp::new("head", OpKind::Layer { layer: LayerKind::Head }),
        PipeOp::new("loss", OpKind::AttachLoss { loss: LossSpec::mse() }),
        model,
    ];
    let mut g = PipelineGraph::chain(g_ops).unwrap();
    let err = g.train(vec![Value::Task(TaskPair::new(task))], &mut ctx());
    assert!(err.is_err(), "training with an absent optimizer fails");
}

#[test]
fn full_generating_pipeline_trains_and_predicts() {
    let task = numeric_regr_task(24);
    let ingress = PipeOp::new("ingress", OpKind::Ingress { kind: IngressKind::Numeric, shape: None });
    let mut linear = PipeOp::new("linear", OpKind::Layer { layer: LayerKind::Linear });
    linear.params.set("out_features", ParamValue::Int(8)).unwrap();
    let relu = PipeOp::new("relu", OpKind::Layer { layer: LayerKind::Relu });
    let head = PipeOp::new("head", OpKind::Layer { layer: LayerKind::Head });
    let loss = PipeOp::new("loss", OpKind::AttachLoss { loss: LossSpec::mse() });
    let optim = PipeOp::new("optimizer", OpKind::AttachOptimizer { kind: OptimKind::AdamW });
    let callbacks = PipeOp::new(
        "callbacks",
        OpKind::AttachCallbacks { callbacks: vec![CallbackConfig::History] },
    );
    let mut model = PipeOp::new("model", OpKind::Model);
    model.params.set("epochs", ParamValue::Int(3)).unwrap();
    model.params.set("batch_size", ParamValue::Int(8)).unwrap();
    model.params.set("measures_train", ParamValue::Str("regr.mse".into())).unwrap();
    let mut g =
        PipelineGraph::chain(vec![ingress, linear, relu, head, loss, optim, callbacks, model])
            .unwrap();
    let out = g.train(vec![Value::Task(TaskPair::new(task.clone()))], &mut ctx()).unwrap();
    assert!(matches!(out.as_slice(), [Value::Null]));
    let pred = g
        .predict(vec![Value::Task(TaskPair::new(task.filter(&[0, 1, 2])))], &mut ctx())
        .unwrap();
    let Value::Prediction(p) = &pred[0] else { panic!("prediction expected") };
    assert_eq!(p.len(), 3, "one prediction per row");
}

#[test]
fn merged_param_set_prefixes_partition_names() {
    let mut linear = PipeOp::new("linear", OpKind::Layer { layer: LayerKind::Linear });
    linear.params.set("out_features", ParamValue::Int(32)).unwrap();
    let branch = branch_of_activations();
    let dropout = PipeOp::new("dropout", OpKind::Layer { layer: LayerKind::Dropout });
    let segment = PipelineGraph::chain(vec![linear, branch, dropout]).unwrap();
    let mut block = PipeOp::new("block", OpKind::Block { segment });
    block.params.set("n_blocks", ParamValue::Int(2)).unwrap();
    let ingress = PipeOp::new("ingress", OpKind::Ingress { kind: IngressKind::Numeric, shape: None });
    let optimizer = PipeOp::new("optimizer", OpKind::AttachOptimizer { kind: OptimKind::AdamW });
    let model = PipeOp::new("model", OpKind::Model);
    let g = PipelineGraph::chain(vec![ingress, block, optimizer, model]).unwrap();
    let ps = g.merged_param_set().unwrap();
    for name in [
        "block.n_blocks",
        "block.linear.out_features",
        "block.branch.selection",
        "block.dropout.p",
        "optimizer.lr",
        "model.epochs",
    ] {
        assert!(ps.contains(name), "missing `{name}`");
    }
}

#[test]
fn param_routing_reaches_nested_graphs() {
    let mut linear = PipeOp::new("linear", OpKind::Layer { layer: LayerKind::Linear });
    linear.params.set("out_features", ParamValue::Int(32)).unwrap();
    let branch = branch_of_activations();
    let segment = PipelineGraph::chain(vec![linear, branch]).unwrap();
    let block = PipeOp::new("block", OpKind::Block { segment });
    let mut g = PipelineGraph::from_op(block);
    g.set_param("block.n_blocks", ParamValue::Int(4)).unwrap();
    g.set_param("block.linear.out_features", ParamValue::Int(64)).unwrap();
    g.set_param("block.branch.selection", ParamValue::Str("sigmoid".into())).unwrap();
    assert!(g.set_param("block.branch.selection", ParamValue::Str("tanh".into())).is_err());
    assert!(g.set_param("missing.param", ParamValue::Int(0)).is_err());
    g.tune_param("block.linear.out_features", TuneSpec::IntRange { lo: 20, hi: 500 }).unwrap();
    let ps = g.merged_param_set().unwrap();
    assert_eq!(ps.get("block.linear.out_features"), Some(&ParamValue::Int(64)));
    assert_eq!(ps.tunable(), vec!["block.linear.out_features"]);
}

#[test]
fn evaluation_is_invariant_to_construction_order() {
    // The same logical DAG assembled in two different node orders produces
    // identical outputs.
    let build = |flip: bool| -> PipelineGraph {
        let select = PipeOp::new("select", OpKind::Select { selector: Selector::All });
        let encode = PipeOp::new("encode", OpKind::EncodeOnehot);
        if flip {
            // encode inserted first, connected backwards via parallel+concat
            let g = PipelineGraph::parallel(vec![
                PipelineGraph::from_op(encode),
                PipelineGraph::from_op(select),
            ])
            .unwrap();
            // wire select -> encode by hand
            let mut g = g;
            g.connect_by_ids("select", 0, "encode", 0).unwrap();
            g
        } else {
            PipelineGraph::chain(vec![select, encode]).unwrap()
        }
    };
    let task = tiny_classif_task();
    let mut a = build(false);
    let mut b = build(true);
    let out_a = train_task(&mut a, task.clone());
    let out_b = train_task(&mut b, task);
    assert_eq!(out_a.feature_names(), out_b.feature_names());
}

#[test]
fn describe_lists_nodes_and_edges_deterministically() {
    let g = PipelineGraph::chain(vec![
        PipeOp::new("select", OpKind::Select { selector: Selector::All }),
        PipeOp::new("encode", OpKind::EncodeOnehot),
    ])
    .unwrap();
    let text = g.describe();
    assert!(text.contains("op select"));
    assert!(text.contains("edge select[0] -> encode[0]"));
}
