use super::*;
use crate::nn::{LayerConfig, ModuleKind};
use crate::rng::RngState;
use crate::tensor::Fill;

fn node_module(config: &LayerConfig, rng: &mut RngState) -> NeuralModule<f32> {
    NeuralModule::from_config("m", config, rng).unwrap()
}

#[test]
fn shape_spec_prints_na_for_the_batch_slot() {
    let s = ShapeSpec::batched(&[784]);
    assert_eq!(s.to_string(), "(NA,784)");
    assert!(s.matches_runtime(&[32, 784]));
    assert!(!s.matches_runtime(&[32, 10]));
    assert!(!s.matches_runtime(&[784]));
}

#[test]
fn unique_ids_get_numeric_suffixes() {
    let mut g = ModuleGraph::new();
    let mut rng = RngState::new(0);
    for _ in 0..3 {
        let m = node_module(&LayerConfig::Relu, &mut rng);
        g.add_node("relu", m, vec![NetInput::Ingress("x".into())], ShapeSpec::batched(&[4]));
    }
    let ids: Vec<&str> = g.nodes.iter().map(|n| n.id.as_str()).collect();
    assert_eq!(ids, vec!["relu", "relu_2", "relu_3"]);
}

#[test]
fn collapsed_three_node_chain_maps_batch_two_to_width_one() {
    let mut rng = RngState::new(42);
    let mut g = ModuleGraph::new();
    let l1 = node_module(&LayerConfig::Linear { in_features: 10, out_features: 100 }, &mut rng);
    let i1 = g.add_node("linear_1", l1, vec![NetInput::Ingress("input".into())], ShapeSpec::batched(&[100]));
    let r = node_module(&LayerConfig::Relu, &mut rng);
    let i2 = g.add_node("relu", r, vec![NetInput::Node(i1)], ShapeSpec::batched(&[100]));
    let l2 = node_module(&LayerConfig::Linear { in_features: 100, out_features: 1 }, &mut rng);
    let i3 = g.add_node("linear_2", l2, vec![NetInput::Node(i2)], ShapeSpec::batched(&[1]));
    let mut net =
        NetworkModule::new(g, vec![("input".into(), ShapeSpec::batched(&[10]))], i3).unwrap();
    let x = crate::tensor::Tensor::<f32>::create(&[2, 10], Fill::Normal(0.0, 1.0), &mut rng, false)
        .unwrap();
    let y = net.forward(&[("input".into(), x)], &mut rng).unwrap();
    assert_eq!(y.shape(), &[2, 1]);
}

#[test]
fn residual_graph_equals_direct_composition() {
    // x W1^T + b1  +  relu(x W2^T + b2) W3^T + b3, collapsed vs hand-composed
    // on shared weights.
    let mut rng = RngState::new(7);
    let mut g = ModuleGraph::new();
    let lin1 = crate::nn::Linear::<f32>::new(6, 8, &mut rng).unwrap();
    let lin2 = crate::nn::Linear::<f32>::new(6, 5, &mut rng).unwrap();
    let lin3 = crate::nn::Linear::<f32>::new(5, 8, &mut rng).unwrap();
    let (w1, b1) = (lin1.weight.clone(), lin1.bias.clone());
    let (w2, b2) = (lin2.weight.clone(), lin2.bias.clone());
    let (w3, b3) = (lin3.weight.clone(), lin3.bias.clone());
    let n1 = g.add_node(
        "linear_1",
        NeuralModule::new("m", ModuleKind::Linear(lin1)),
        vec![NetInput::Ingress("x".into())],
        ShapeSpec::batched(&[8]),
    );
    let n2 = g.add_node(
        "linear_2",
        NeuralModule::new("m", ModuleKind::Linear(lin2)),
        vec![NetInput::Ingress("x".into())],
        ShapeSpec::batched(&[5]),
    );
    let n3 = g.add_node(
        "relu",
        NeuralModule::new("m", ModuleKind::Relu),
        vec![NetInput::Node(n2)],
        ShapeSpec::batched(&[5]),
    );
    let n4 = g.add_node(
        "linear_3",
        NeuralModule::new("m", ModuleKind::Linear(lin3)),
        vec![NetInput::Node(n3)],
        ShapeSpec::batched(&[8]),
    );
    let n5 = g.add_node(
        "sum",
        NeuralModule::new("m", ModuleKind::MergeSum),
        vec![NetInput::Node(n1), NetInput::Node(n4)],
        ShapeSpec::batched(&[8]),
    );
    let mut net =
        NetworkModule::new(g, vec![("x".into(), ShapeSpec::batched(&[6]))], n5).unwrap();
    let x = crate::tensor::Tensor::<f32>::create(&[3, 6], Fill::Normal(0.0, 1.0), &mut rng, false)
        .unwrap();
    let via_graph = net.forward(&[("x".into(), x.clone())], &mut rng).unwrap();
    let direct = {
        let lin = x.matmul_t(&w1).unwrap().add(&b1).unwrap();
        let nonlin = x
            .matmul_t(&w2)
            .unwrap()
            .add(&b2)
            .unwrap()
            .relu()
            .matmul_t(&w3)
            .unwrap()
            .add(&b3)
            .unwrap();
        lin.add(&nonlin).unwrap()
    };
    assert_eq!(via_graph.to_vec(), direct.to_vec(), "bit-identical to the closed form");
}

#[test]
fn single_node_graph_is_the_wrapped_layer() {
    let mut rng = RngState::new(3);
    let lin = crate::nn::Linear::<f32>::new(4, 2, &mut rng).unwrap();
    let (w, b) = (lin.weight.clone(), lin.bias.clone());
    let mut g = ModuleGraph::new();
    let idx = g.add_node(
        "only",
        NeuralModule::new("m", ModuleKind::Linear(lin)),
        vec![NetInput::Ingress("x".into())],
        ShapeSpec::batched(&[2]),
    );
    let mut net =
        NetworkModule::new(g, vec![("x".into(), ShapeSpec::batched(&[4]))], idx).unwrap();
    let x = crate::tensor::Tensor::<f32>::create(&[2, 4], Fill::Normal(0.0, 1.0), &mut rng, false)
        .unwrap();
    let via_net = net.forward(&[("x".into(), x.clone())], &mut rng).unwrap();
    let direct = x.matmul_t(&w).unwrap().add(&b).unwrap();
    assert_eq!(via_net.to_vec(), direct.to_vec());
}

#[test]
fn merge_shape_rules() {
    let a = ShapeSpec::batched(&[32]);
    let b = ShapeSpec::batched(&[32]);
    let merged = merge_shape(&LayerConfig::MergeSum, &[&a, &b]).unwrap();
    assert_eq!(merged, ShapeSpec::batched(&[32]));
    let c = ShapeSpec::batched(&[16]);
    assert!(merge_shape(&LayerConfig::MergeSum, &[&a, &c]).is_err());

    let t1 = ShapeSpec::batched(&[3, 10]);
    let t2 = ShapeSpec::batched(&[5, 10]);
    let merged = merge_shape(&LayerConfig::MergeConcat { axis: 1 }, &[&t1, &t2]).unwrap();
    assert_eq!(merged, ShapeSpec::batched(&[8, 10]));
    let bad = ShapeSpec::batched(&[5, 7]);
    assert!(merge_shape(&LayerConfig::MergeConcat { axis: 1 }, &[&t1, &bad]).is_err());
}

#[test]
fn network_input_shape_validation() {
    let mut rng = RngState::new(1);
    let mut g = ModuleGraph::new();
    let idx = g.add_node(
        "relu",
        node_module(&LayerConfig::Relu, &mut rng),
        vec![NetInput::Ingress("x".into())],
        ShapeSpec::batched(&[4]),
    );
    let mut net =
        NetworkModule::new(g, vec![("x".into(), ShapeSpec::batched(&[4]))], idx).unwrap();
    let bad = crate::tensor::Tensor::<f32>::zeros(&[2, 5]).unwrap();
    assert!(net.forward(&[("x".into(), bad)], &mut rng).is_err());
    let missing_shape = {
        let mut g = ModuleGraph::new();
        g.add_node(
            "relu",
            node_module(&LayerConfig::Relu, &mut rng),
            vec![NetInput::Ingress("y".into())],
            ShapeSpec::batched(&[4]),
        );
        NetworkModule::new(g, vec![], 0)
    };
    assert!(missing_shape.is_err(), "free input without declared shape is rejected");
}
