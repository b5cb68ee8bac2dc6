//! Neural networks as graphs: shape descriptors with an unknown batch slot,
//! ingress specifications, the module graph built during elaboration, and
//! its collapse into a single callable network.

mod shapes;
#[cfg(test)]
mod tests;

pub use shapes::{infer_layer, merge_shape, LayerHyper, LayerKind};

use crate::data::{Assembly, Task};
use crate::error::{Error, Result};
use crate::nn::{LossSpec, NeuralModule};
use crate::optim::OptimConfig;
use crate::rng::RngState;
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

/// One extent of a shape descriptor; `Unknown` is the batch placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extent {
    Known(usize),
    Unknown,
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extent::Known(v) => write!(f, "{v}"),
            Extent::Unknown => write!(f, "NA"),
        }
    }
}

/// Static shape with at most the leading entry unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeSpec(pub Vec<Extent>);

impl ShapeSpec {
    pub fn batched(rest: &[usize]) -> Self {
        let mut v = vec![Extent::Unknown];
        v.extend(rest.iter().map(|&d| Extent::Known(d)));
        ShapeSpec(v)
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Concrete trailing extents; errors if any non-batch extent is unknown.
    pub fn known_tail(&self) -> Result<Vec<usize>> {
        self.0[1..]
            .iter()
            .map(|e| match e {
                Extent::Known(v) => Ok(*v),
                Extent::Unknown => {
                    Err(Error::shape("unknown non-batch extent where a concrete one is required"))
                }
            })
            .collect()
    }

    /// Bind the unknown batch slot and compare with a runtime shape.
    pub fn matches_runtime(&self, runtime: &[usize]) -> bool {
        if runtime.len() != self.0.len() {
            return false;
        }
        self.0.iter().zip(runtime).all(|(e, &r)| match e {
            Extent::Known(v) => *v == r,
            Extent::Unknown => true,
        })
    }
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// A network entry point: how task columns become one input tensor, and the
/// static shape of that tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct IngressSpec {
    pub name: String,
    pub assembly: Assembly,
    pub shape: ShapeSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngressKind {
    Numeric,
    Categorical,
    Lazy,
}

impl IngressKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            IngressKind::Numeric => "ingress_num",
            IngressKind::Categorical => "ingress_categ",
            IngressKind::Lazy => "ingress_lazy",
        }
    }
}

/// Build the ingress specification for `kind` against a task: which columns
/// are assembled, and the static input shape with the unknown batch slot.
pub fn build_ingress_spec(
    kind: IngressKind,
    name: &str,
    task: &Task,
    declared: Option<&ShapeSpec>,
) -> Result<IngressSpec> {
    match kind {
        IngressKind::Numeric => {
            let cols = task.features_of_type(&["numeric", "integer"]);
            if cols.is_empty() {
                return Err(Error::Task("numeric ingress found no matching features".into()));
            }
            let shape = ShapeSpec::batched(&[cols.len()]);
            Ok(IngressSpec { name: name.into(), assembly: Assembly::NumericStack(cols), shape })
        }
        IngressKind::Categorical => {
            let cols = task.features_of_type(&["categorical"]);
            if cols.is_empty() {
                return Err(Error::Task("categorical ingress found no matching features".into()));
            }
            let shape = ShapeSpec::batched(&[cols.len()]);
            Ok(IngressSpec {
                name: name.into(),
                assembly: Assembly::CategoricalEncode(cols),
                shape,
            })
        }
        IngressKind::Lazy => {
            let cols = task.features_of_type(&["lazy_tensor"]);
            let [col] = cols.as_slice() else {
                return Err(Error::Task(format!(
                    "lazy ingress expects exactly one lazy feature, found {}",
                    cols.len()
                )));
            };
            let crate::data::Column::Lazy(lazy) = task.column(col)? else { unreachable!() };
            let shape = match declared {
                Some(s) => s.clone(),
                None => match lazy.declared_shape() {
                    crate::data::ElementShape::Known(dims) => ShapeSpec::batched(dims),
                    crate::data::ElementShape::Varying => {
                        return Err(Error::shape(
                            "lazy column has varying shapes; declare the ingress shape",
                        ))
                    }
                },
            };
            Ok(IngressSpec {
                name: name.into(),
                assembly: Assembly::LazyColumn(col.clone()),
                shape,
            })
        }
    }
}

/// Where a module-graph node reads its inputs from.
#[derive(Debug, Clone, PartialEq)]
pub enum NetInput {
    Ingress(String),
    Node(usize),
}

pub struct NetNode {
    pub id: String,
    pub module: NeuralModule<f32>,
    pub inputs: Vec<NetInput>,
    pub out_shape: ShapeSpec,
}

/// DAG of instantiated layers; nodes are appended during elaboration, so
/// index order is a topological order.
#[derive(Default)]
pub struct ModuleGraph {
    pub nodes: Vec<NetNode>,
}

impl ModuleGraph {
    pub fn new() -> Self {
        ModuleGraph { nodes: Vec::new() }
    }

    /// Unique node id derived from `base` by numeric suffixing.
    pub fn unique_id(&self, base: &str) -> String {
        if !self.nodes.iter().any(|n| n.id == base) {
            return base.to_string();
        }
        let mut k = 2usize;
        loop {
            let candidate = format!("{base}_{k}");
            if !self.nodes.iter().any(|n| n.id == candidate) {
                return candidate;
            }
            k += 1;
        }
    }

    pub fn add_node(
        &mut self,
        base_id: &str,
        module: NeuralModule<f32>,
        inputs: Vec<NetInput>,
        out_shape: ShapeSpec,
    ) -> usize {
        let id = self.unique_id(base_id);
        self.nodes.push(NetNode { id, module, inputs, out_shape });
        self.nodes.len() - 1
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Deterministic textual dump: one line per node with id, structure and
    /// inferred output shape.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let inputs: Vec<String> = node
                .inputs
                .iter()
                .map(|i| match i {
                    NetInput::Ingress(name) => format!("<{name}>"),
                    NetInput::Node(idx) => self.nodes[*idx].id.clone(),
                })
                .collect();
            out.push_str(&format!(
                "{} <- [{}] {:?} out={}\n",
                node.id,
                inputs.join(", "),
                node.module.config(),
                node.out_shape
            ));
        }
        out
    }
}

/// Output cursor of a descriptor: the graph position the next layer attaches
/// to, plus its static shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Cursor {
    pub at: NetInput,
    pub shape: ShapeSpec,
}

/// The communication object threaded through a generating graph. The module
/// graph is shared by reference so parallel branches extend one network.
#[derive(Clone)]
pub struct ModelDescriptor {
    pub graph: Rc<RefCell<ModuleGraph>>,
    pub task: Task,
    pub valid_task: Option<Task>,
    pub ingresses: Vec<IngressSpec>,
    pub cursor: Cursor,
    pub loss: Option<LossSpec>,
    pub optimizer: Option<OptimConfig>,
    pub callbacks: Vec<crate::learner::CallbackConfig>,
}

impl ModelDescriptor {
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let graph = self.graph.borrow();
        out.push_str(&format!("<ModelDescriptor: {} ops>\n", graph.nodes.len()));
        for ing in &self.ingresses {
            out.push_str(&format!("* Ingress: {}: {}\n", ing.name, ing.shape));
        }
        out.push_str(&format!("* Task: {} [{}]\n", self.task.id, self.task.task_type.as_str()));
        out.push_str(&format!(
            "* Callbacks: {}\n",
            if self.callbacks.is_empty() {
                "N/A".to_string()
            } else {
                self.callbacks.iter().map(|c| c.id()).collect::<Vec<_>>().join(",")
            }
        ));
        out.push_str(&format!(
            "* Optimizer: {}\n",
            self.optimizer.as_ref().map_or("N/A".into(), |o| o.kind.as_str().to_string())
        ));
        out.push_str(&format!(
            "* Loss: {}\n",
            self.loss.as_ref().map_or("N/A".into(), |l| format!("{:?}", l.kind))
        ));
        let cursor_name = match &self.cursor.at {
            NetInput::Ingress(name) => format!("<{name}>"),
            NetInput::Node(idx) => graph.nodes[*idx].id.clone(),
        };
        out.push_str(&format!("* pointer: {} {}\n", cursor_name, self.cursor.shape));
        out
    }
}

/// A collapsed module graph: callable on named ingress tensors.
pub struct NetworkModule {
    pub graph: ModuleGraph,
    pub input_shapes: Vec<(String, ShapeSpec)>,
    pub output: usize,
}

impl NetworkModule {
    pub fn new(graph: ModuleGraph, input_shapes: Vec<(String, ShapeSpec)>, output: usize) -> Result<Self> {
        if output >= graph.nodes.len() {
            return Err(Error::Graph("collapse output index out of range".into()));
        }
        for node in &graph.nodes {
            for input in &node.inputs {
                if let NetInput::Ingress(name) = input {
                    if !input_shapes.iter().any(|(n, _)| n == name) {
                        return Err(Error::Graph(format!(
                            "free input `{name}` has no declared shape"
                        )));
                    }
                }
            }
        }
        Ok(NetworkModule { graph, input_shapes, output })
    }

    pub fn set_training(&mut self, training: bool) {
        for node in &mut self.graph.nodes {
            node.module.set_training(training);
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for node in &self.graph.nodes {
            node.module.visit_params(&node.id, &mut |name, t| out.push((name, t.clone())));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn state_dict(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for node in &self.graph.nodes {
            node.module.state_dict(&node.id, &mut out);
        }
        out
    }

    pub fn load_state_dict(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        for node in &mut self.graph.nodes {
            let id = node.id.clone();
            node.module.load_state_dict(&id, entries)?;
        }
        Ok(())
    }

    /// Topological forward over the module graph with named inputs.
    pub fn forward(
        &mut self,
        inputs: &[(String, Tensor<f32>)],
        rng: &mut RngState,
    ) -> Result<Tensor<f32>> {
        for (name, tensor) in inputs {
            let Some((_, spec)) = self.input_shapes.iter().find(|(n, _)| n == name) else {
                return Err(Error::Graph(format!("unexpected input `{name}`")));
            };
            if !spec.matches_runtime(tensor.shape()) {
                return Err(Error::shape(format!(
                    "input `{name}` has shape {:?}, declared {spec}",
                    tensor.shape()
                )));
            }
        }
        let mut outputs: Vec<Option<Tensor<f32>>> = vec![None; self.graph.nodes.len()];
        for idx in 0..self.graph.nodes.len() {
            let gathered: Vec<Tensor<f32>> = {
                let node = &self.graph.nodes[idx];
                node.inputs
                    .iter()
                    .map(|input| match input {
                        NetInput::Ingress(name) => inputs
                            .iter()
                            .find(|(n, _)| n == name)
                            .map(|(_, t)| t.clone())
                            .ok_or_else(|| Error::Graph(format!("missing input `{name}`"))),
                        NetInput::Node(i) => outputs[*i]
                            .clone()
                            .ok_or_else(|| Error::Graph("node evaluated before its input".into())),
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let node = &mut self.graph.nodes[idx];
            let value = node
                .module
                .forward(&gathered, rng)
                .map_err(|e| Error::Graph(format!("node `{}`: {e}", node.id)))?;
            outputs[idx] = Some(value);
        }
        Ok(outputs[self.output].clone().expect("output node evaluated"))
    }
}

/// Collapse a descriptor's module graph into a callable network ending at
/// the cursor.
pub fn collapse(descriptor: &ModelDescriptor) -> Result<NetworkModule> {
    let graph_ref = descriptor.graph.borrow();
    let NetInput::Node(output) = descriptor.cursor.at else {
        return Err(Error::Graph("cursor still points at an ingress; nothing to collapse".into()));
    };
    // Move the nodes out by rebuilding from configs + state copy would lose
    // parameter identity; instead take ownership via Rc when unique, else
    // rebuild sharing tensors through state-dict handles.
    let mut nodes = Vec::with_capacity(graph_ref.nodes.len());
    for node in &graph_ref.nodes {
        // Parameter tensors are reference-counted, so cloning the module via
        // its parameter handles preserves identity with the descriptor.
        nodes.push(NetNode {
            id: node.id.clone(),
            module: clone_module_sharing_params(&node.module),
            inputs: node.inputs.clone(),
            out_shape: node.out_shape.clone(),
        });
    }
    let input_shapes: Vec<(String, ShapeSpec)> = descriptor
        .ingresses
        .iter()
        .map(|i| (i.name.clone(), i.shape.clone()))
        .collect();
    NetworkModule::new(ModuleGraph { nodes }, input_shapes, output)
}

/// Clone a module so the clone's parameter tensors are the same tensors
/// (shared buffers), keeping training effects visible through either handle.
pub(crate) fn clone_module_sharing_params(module: &NeuralModule<f32>) -> NeuralModule<f32> {
    use crate::nn::ModuleKind;
    let kind = match &module.kind {
        ModuleKind::Linear(l) => ModuleKind::Linear(crate::nn::Linear {
            weight: l.weight.clone(),
            bias: l.bias.clone(),
        }),
        ModuleKind::Relu => ModuleKind::Relu,
        ModuleKind::Sigmoid => ModuleKind::Sigmoid,
        ModuleKind::Dropout(d) => ModuleKind::Dropout(crate::nn::Dropout { p: d.p }),
        ModuleKind::Conv2d(c) => ModuleKind::Conv2d(crate::nn::Conv2d {
            weight: c.weight.clone(),
            bias: c.bias.clone(),
            stride: c.stride,
            padding: c.padding,
        }),
        ModuleKind::MaxPool2d(m) => ModuleKind::MaxPool2d(crate::nn::MaxPool2d {
            kernel_size: m.kernel_size,
            stride: m.stride,
            padding: m.padding,
        }),
        ModuleKind::BatchNorm2d(bn) => ModuleKind::BatchNorm2d(crate::nn::BatchNorm2d {
            scale: bn.scale.clone(),
            shift: bn.shift.clone(),
            running_mean: bn.running_mean.clone(),
            running_var: bn.running_var.clone(),
            momentum: bn.momentum,
            eps: bn.eps,
        }),
        ModuleKind::Flatten => ModuleKind::Flatten,
        ModuleKind::TokenizerNum(t) => ModuleKind::TokenizerNum(crate::nn::TokenizerNum {
            weight: t.weight.clone(),
            bias: t.bias.clone(),
        }),
        ModuleKind::TokenizerCateg(t) => ModuleKind::TokenizerCateg(crate::nn::TokenizerCateg {
            embeddings: t.embeddings.clone(),
            bias: t.bias.clone(),
        }),
        ModuleKind::MergeSum => ModuleKind::MergeSum,
        ModuleKind::MergeConcat(axis) => ModuleKind::MergeConcat(*axis),
        ModuleKind::Sequential(children) => {
            ModuleKind::Sequential(children.iter().map(clone_module_sharing_params).collect())
        }
    };
    let mut out = NeuralModule::new(module.name.clone(), kind);
    out.set_training(module.is_training());
    out
}
