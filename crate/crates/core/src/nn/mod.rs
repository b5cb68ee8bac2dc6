//! Neural modules: parametrized differentiable layers with a parameter
//! dictionary of stable hierarchical names ("0.weight", "head.bias", ...).

pub mod layers;
pub mod loss;

pub use layers::{
    conv_out_extent, flatten, gather_rows, Activation, BatchNorm2d, Conv2d, Dropout, Linear,
    MaxPool2d, TokenizerCateg, TokenizerNum,
};
pub use loss::{loss_forward, softmax_rows, LossKind, LossSpec, LossTarget};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Element, Tensor};

/// Structural description of a module; enough to rebuild it with fresh
/// parameters and to serialize trained networks.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerConfig {
    Linear { in_features: usize, out_features: usize },
    Relu,
    Sigmoid,
    Dropout { p: f64 },
    Conv2d { in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, padding: usize },
    MaxPool2d { kernel_size: usize, stride: usize, padding: usize },
    BatchNorm2d { num_features: usize, momentum: f64, eps: f64 },
    Flatten,
    TokenizerNum { n_features: usize, d_token: usize },
    TokenizerCateg { cardinalities: Vec<usize>, d_token: usize },
    MergeSum,
    MergeConcat { axis: usize },
    Sequential(Vec<(String, LayerConfig)>),
}

pub enum ModuleKind<E: Element> {
    Linear(Linear<E>),
    Relu,
    Sigmoid,
    Dropout(Dropout),
    Conv2d(Conv2d<E>),
    MaxPool2d(MaxPool2d),
    BatchNorm2d(BatchNorm2d<E>),
    Flatten,
    TokenizerNum(TokenizerNum<E>),
    TokenizerCateg(TokenizerCateg<E>),
    MergeSum,
    MergeConcat(usize),
    Sequential(Vec<NeuralModule<E>>),
}

/// A named module tree. `training_mode` gates dropout masks and batch-norm
/// statistics and nothing else.
pub struct NeuralModule<E: Element = f32> {
    pub name: String,
    pub kind: ModuleKind<E>,
    training: bool,
}

impl<E: Element> NeuralModule<E> {
    pub fn new(name: impl Into<String>, kind: ModuleKind<E>) -> Self {
        NeuralModule { name: name.into(), kind, training: true }
    }

    pub fn from_config(name: impl Into<String>, config: &LayerConfig, rng: &mut RngState) -> Result<Self> {
        let kind = match config {
            LayerConfig::Linear { in_features, out_features } => {
                ModuleKind::Linear(Linear::new(*in_features, *out_features, rng)?)
            }
            LayerConfig::Relu => ModuleKind::Relu,
            LayerConfig::Sigmoid => ModuleKind::Sigmoid,
            LayerConfig::Dropout { p } => ModuleKind::Dropout(Dropout::new(*p)?),
            LayerConfig::Conv2d { in_channels, out_channels, kernel_size, stride, padding } => {
                ModuleKind::Conv2d(Conv2d::new(
                    *in_channels,
                    *out_channels,
                    *kernel_size,
                    *stride,
                    *padding,
                    rng,
                )?)
            }
            LayerConfig::MaxPool2d { kernel_size, stride, padding } => {
                ModuleKind::MaxPool2d(MaxPool2d::new(*kernel_size, *stride, *padding)?)
            }
            LayerConfig::BatchNorm2d { num_features, momentum, eps } => {
                ModuleKind::BatchNorm2d(BatchNorm2d::new(*num_features, *momentum, *eps)?)
            }
            LayerConfig::Flatten => ModuleKind::Flatten,
            LayerConfig::TokenizerNum { n_features, d_token } => {
                ModuleKind::TokenizerNum(TokenizerNum::new(*n_features, *d_token, rng)?)
            }
            LayerConfig::TokenizerCateg { cardinalities, d_token } => {
                ModuleKind::TokenizerCateg(TokenizerCateg::new(cardinalities, *d_token, rng)?)
            }
            LayerConfig::MergeSum => ModuleKind::MergeSum,
            LayerConfig::MergeConcat { axis } => ModuleKind::MergeConcat(*axis),
            LayerConfig::Sequential(children) => {
                let mut built = Vec::with_capacity(children.len());
                for (child_name, child_config) in children {
                    built.push(NeuralModule::from_config(child_name.clone(), child_config, rng)?);
                }
                ModuleKind::Sequential(built)
            }
        };
        Ok(NeuralModule::new(name, kind))
    }

    pub fn config(&self) -> LayerConfig {
        match &self.kind {
            ModuleKind::Linear(l) => LayerConfig::Linear {
                in_features: l.in_features(),
                out_features: l.out_features(),
            },
            ModuleKind::Relu => LayerConfig::Relu,
            ModuleKind::Sigmoid => LayerConfig::Sigmoid,
            ModuleKind::Dropout(d) => LayerConfig::Dropout { p: d.p },
            ModuleKind::Conv2d(c) => LayerConfig::Conv2d {
                in_channels: c.in_channels(),
                out_channels: c.out_channels(),
                kernel_size: c.kernel_size(),
                stride: c.stride,
                padding: c.padding,
            },
            ModuleKind::MaxPool2d(m) => LayerConfig::MaxPool2d {
                kernel_size: m.kernel_size,
                stride: m.stride,
                padding: m.padding,
            },
            ModuleKind::BatchNorm2d(bn) => LayerConfig::BatchNorm2d {
                num_features: bn.num_features(),
                momentum: bn.momentum,
                eps: bn.eps,
            },
            ModuleKind::Flatten => LayerConfig::Flatten,
            ModuleKind::TokenizerNum(t) => LayerConfig::TokenizerNum {
                n_features: t.weight.shape()[0],
                d_token: t.weight.shape()[1],
            },
            ModuleKind::TokenizerCateg(t) => LayerConfig::TokenizerCateg {
                cardinalities: t.embeddings.iter().map(|e| e.shape()[0]).collect(),
                d_token: t.bias.shape()[1],
            },
            ModuleKind::MergeSum => LayerConfig::MergeSum,
            ModuleKind::MergeConcat(axis) => LayerConfig::MergeConcat { axis: *axis },
            ModuleKind::Sequential(children) => LayerConfig::Sequential(
                children.iter().map(|c| (c.name.clone(), c.config())).collect(),
            ),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
        if let ModuleKind::Sequential(children) = &mut self.kind {
            for child in children {
                child.set_training(training);
            }
        }
    }

    /// Number of tensor inputs the module consumes.
    pub fn input_arity_min(&self) -> usize {
        match self.kind {
            ModuleKind::MergeSum | ModuleKind::MergeConcat(_) => 2,
            _ => 1,
        }
    }

    pub fn forward(&mut self, inputs: &[Tensor<E>], rng: &mut RngState) -> Result<Tensor<E>> {
        let single = |inputs: &[Tensor<E>]| -> Result<Tensor<E>> {
            if inputs.len() != 1 {
                return Err(Error::Graph(format!(
                    "module `{}` expects one input, got {}",
                    self.name,
                    inputs.len()
                )));
            }
            Ok(inputs[0].clone())
        };
        match &mut self.kind {
            ModuleKind::Linear(l) => l.forward(&single(inputs)?),
            ModuleKind::Relu => Ok(single(inputs)?.relu()),
            ModuleKind::Sigmoid => Ok(single(inputs)?.sigmoid()),
            ModuleKind::Dropout(d) => d.forward(&single(inputs)?, self.training, rng),
            ModuleKind::Conv2d(c) => c.forward(&single(inputs)?),
            ModuleKind::MaxPool2d(m) => m.forward(&single(inputs)?),
            ModuleKind::BatchNorm2d(bn) => bn.forward(&single(inputs)?, self.training),
            ModuleKind::Flatten => flatten(&single(inputs)?),
            ModuleKind::TokenizerNum(t) => t.forward(&single(inputs)?),
            ModuleKind::TokenizerCateg(t) => t.forward(&single(inputs)?),
            ModuleKind::MergeSum => {
                if inputs.len() < 2 {
                    return Err(Error::Graph("merge_sum needs at least two inputs".into()));
                }
                let mut acc = inputs[0].clone();
                for other in &inputs[1..] {
                    acc = acc.add(other)?;
                }
                Ok(acc)
            }
            ModuleKind::MergeConcat(axis) => Tensor::concat(inputs, *axis),
            ModuleKind::Sequential(children) => {
                let mut value = single(inputs)?;
                for child in children {
                    value = child.forward(&[value], rng)?;
                }
                Ok(value)
            }
        }
    }

    /// Visit parameters depth-first with hierarchical names.
    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        let qualify = |leaf: &str| {
            if prefix.is_empty() {
                leaf.to_string()
            } else {
                format!("{prefix}.{leaf}")
            }
        };
        match &self.kind {
            ModuleKind::Linear(l) => {
                f(qualify("weight"), &l.weight);
                f(qualify("bias"), &l.bias);
            }
            ModuleKind::Conv2d(c) => {
                f(qualify("weight"), &c.weight);
                f(qualify("bias"), &c.bias);
            }
            ModuleKind::BatchNorm2d(bn) => {
                f(qualify("weight"), &bn.scale);
                f(qualify("bias"), &bn.shift);
            }
            ModuleKind::TokenizerNum(t) => {
                f(qualify("weight"), &t.weight);
                f(qualify("bias"), &t.bias);
            }
            ModuleKind::TokenizerCateg(t) => {
                for (j, emb) in t.embeddings.iter().enumerate() {
                    f(qualify(&format!("emb{j}")), emb);
                }
                f(qualify("bias"), &t.bias);
            }
            ModuleKind::Sequential(children) => {
                for child in children {
                    child.visit_params(&qualify(&child.name), f);
                }
            }
            _ => {}
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut count = 0;
        self.visit_params("", &mut |_, t| count += t.numel());
        count
    }

    pub fn children(&self) -> &[NeuralModule<E>] {
        match &self.kind {
            ModuleKind::Sequential(children) => children,
            _ => &[],
        }
    }

    /// Parameters plus buffers (running statistics), the serializable state.
    pub fn state_dict(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.visit_params(prefix, &mut |name, t| out.push((name, t.clone())));
        self.visit_buffers(prefix, &mut |name, t| out.push((name, t)));
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, Tensor<E>)) {
        let qualify = |leaf: &str| {
            if prefix.is_empty() {
                leaf.to_string()
            } else {
                format!("{prefix}.{leaf}")
            }
        };
        match &self.kind {
            ModuleKind::BatchNorm2d(bn) => {
                let c = bn.num_features();
                f(
                    qualify("running_mean"),
                    Tensor::from_vec(&[c], bn.running_mean.clone()).unwrap(),
                );
                f(
                    qualify("running_var"),
                    Tensor::from_vec(&[c], bn.running_var.clone()).unwrap(),
                );
            }
            ModuleKind::Sequential(children) => {
                for child in children {
                    child.visit_buffers(&qualify(&child.name), f);
                }
            }
            _ => {}
        }
    }

    /// Restore parameters and buffers from `entries` (names as produced by
    /// [`NeuralModule::state_dict`] with the same prefix).
    pub fn load_state_dict(&mut self, prefix: &str, entries: &[(String, Tensor<E>)]) -> Result<()> {
        let lookup = |name: &str| -> Result<&Tensor<E>> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Marshal(format!("state dict missing entry `{name}`")))
        };
        let qualify = |leaf: &str| {
            if prefix.is_empty() {
                leaf.to_string()
            } else {
                format!("{prefix}.{leaf}")
            }
        };
        let assign = |target: &Tensor<E>, source: &Tensor<E>| -> Result<()> {
            if target.shape() != source.shape() {
                return Err(Error::Marshal(format!(
                    "state entry shape {:?} does not match parameter {:?}",
                    source.shape(),
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(&source.data());
            Ok(())
        };
        match &mut self.kind {
            ModuleKind::Linear(l) => {
                assign(&l.weight, lookup(&qualify("weight"))?)?;
                assign(&l.bias, lookup(&qualify("bias"))?)?;
            }
            ModuleKind::Conv2d(c) => {
                assign(&c.weight, lookup(&qualify("weight"))?)?;
                assign(&c.bias, lookup(&qualify("bias"))?)?;
            }
            ModuleKind::BatchNorm2d(bn) => {
                assign(&bn.scale, lookup(&qualify("weight"))?)?;
                assign(&bn.shift, lookup(&qualify("bias"))?)?;
                bn.running_mean = lookup(&qualify("running_mean"))?.to_vec();
                bn.running_var = lookup(&qualify("running_var"))?.to_vec();
            }
            ModuleKind::TokenizerNum(t) => {
                assign(&t.weight, lookup(&qualify("weight"))?)?;
                assign(&t.bias, lookup(&qualify("bias"))?)?;
            }
            ModuleKind::TokenizerCateg(t) => {
                for (j, emb) in t.embeddings.iter().enumerate() {
                    assign(emb, lookup(&qualify(&format!("emb{j}")))?)?;
                }
                assign(&t.bias, lookup(&qualify("bias"))?)?;
            }
            ModuleKind::Sequential(children) => {
                for child in children {
                    let child_prefix = qualify(&child.name);
                    child.load_state_dict(&child_prefix, entries)?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// The reference MLP: for each hidden width a linear map, activation and
/// dropout, then a linear head. Children are named "0", "1", ... so the
/// parameter dictionary reads "0.weight", "3.bias", "6.weight".
pub fn mlp<E: Element>(
    d_in: usize,
    neurons: &[usize],
    d_out: usize,
    dropout_p: f64,
    activation: Activation,
    rng: &mut RngState,
) -> Result<NeuralModule<E>> {
    let mut children: Vec<NeuralModule<E>> = Vec::new();
    let mut d_prev = d_in;
    for &width in neurons {
        children.push(NeuralModule::new(
            children.len().to_string(),
            ModuleKind::Linear(Linear::new(d_prev, width, rng)?),
        ));
        let act = match activation {
            Activation::Relu => ModuleKind::Relu,
            Activation::Sigmoid => ModuleKind::Sigmoid,
        };
        children.push(NeuralModule::new(children.len().to_string(), act));
        children.push(NeuralModule::new(
            children.len().to_string(),
            ModuleKind::Dropout(Dropout::new(dropout_p)?),
        ));
        d_prev = width;
    }
    children.push(NeuralModule::new(
        children.len().to_string(),
        ModuleKind::Linear(Linear::new(d_prev, d_out, rng)?),
    ));
    Ok(NeuralModule::new("mlp", ModuleKind::Sequential(children)))
}
