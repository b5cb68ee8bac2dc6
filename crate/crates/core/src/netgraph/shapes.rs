//! Per-layer shape rules and auxiliary-parameter inference: a layer kind
//! plus hyperparameters plus the cursor shape yields an instantiated module
//! and the new cursor shape.

use super::{Extent, ModelDescriptor, NetInput, ShapeSpec};
use crate::data::{Assembly, Column, TaskType};
use crate::error::{Error, Result};
use crate::nn::{
    conv_out_extent, BatchNorm2d, Conv2d, Dropout, Linear, MaxPool2d, ModuleKind, NeuralModule,
    TokenizerCateg, TokenizerNum,
};
use crate::params::ParamSet;
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Relu,
    Sigmoid,
    Dropout,
    Conv2d,
    MaxPool2d,
    BatchNorm2d,
    Flatten,
    TokenizerNum,
    TokenizerCateg,
    /// Output layer; its width is inferred from the task (class count for
    /// classification, 1 for regression).
    Head,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Dropout => "dropout",
            LayerKind::Conv2d => "conv2d",
            LayerKind::MaxPool2d => "max_pool2d",
            LayerKind::BatchNorm2d => "batch_norm2d",
            LayerKind::Flatten => "flatten",
            LayerKind::TokenizerNum => "tokenizer_num",
            LayerKind::TokenizerCateg => "tokenizer_categ",
            LayerKind::Head => "head",
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "linear" => LayerKind::Linear,
            "relu" => LayerKind::Relu,
            "sigmoid" => LayerKind::Sigmoid,
            "dropout" => LayerKind::Dropout,
            "conv2d" => LayerKind::Conv2d,
            "max_pool2d" => LayerKind::MaxPool2d,
            "batch_norm2d" => LayerKind::BatchNorm2d,
            "flatten" => LayerKind::Flatten,
            "tokenizer_num" => LayerKind::TokenizerNum,
            "tokenizer_categ" => LayerKind::TokenizerCateg,
            "head" => LayerKind::Head,
            other => return Err(Error::invalid(format!("unknown layer kind `{other}`"))),
        })
    }
}

/// Accessors over a layer op's hyperparameter values with defaults.
pub struct LayerHyper<'a>(pub &'a ParamSet);

impl LayerHyper<'_> {
    fn req_usize(&self, name: &str) -> Result<usize> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Param { param: name.into(), msg: "required but unset".into() })?
            .as_usize()
    }

    fn opt_usize(&self, name: &str, default: usize) -> Result<usize> {
        match self.0.get(name) {
            Some(v) => v.as_usize(),
            None => Ok(default),
        }
    }

    fn opt_f64(&self, name: &str, default: f64) -> Result<f64> {
        match self.0.get(name) {
            Some(v) => v.as_float(),
            None => Ok(default),
        }
    }
}

fn last_known(shape: &ShapeSpec) -> Result<usize> {
    match shape.0.last() {
        Some(Extent::Known(v)) => Ok(*v),
        _ => Err(Error::shape(format!("cursor shape {shape} has no known trailing extent"))),
    }
}

/// Instantiate `kind` against the descriptor's cursor, inferring auxiliary
/// parameters from the cursor shape and the task. Returns the module and the
/// advanced cursor shape.
pub fn infer_layer(
    kind: LayerKind,
    params: &ParamSet,
    md: &ModelDescriptor,
    rng: &mut RngState,
) -> Result<(NeuralModule<f32>, ShapeSpec)> {
    let hp = LayerHyper(params);
    let cursor = &md.cursor.shape;
    match kind {
        LayerKind::Linear => {
            if cursor.rank() != 2 {
                return Err(Error::shape(format!("linear requires a rank-2 cursor, got {cursor}")));
            }
            let in_features = last_known(cursor)?;
            let out_features = hp.req_usize("out_features")?;
            let module = NeuralModule::new(
                "linear",
                ModuleKind::Linear(Linear::new(in_features, out_features, rng)?),
            );
            Ok((module, ShapeSpec(vec![cursor.0[0], Extent::Known(out_features)])))
        }
        LayerKind::Head => {
            if cursor.rank() != 2 {
                return Err(Error::shape(format!("head requires a rank-2 cursor, got {cursor}")));
            }
            let in_features = last_known(cursor)?;
            let out_features = match md.task.task_type {
                TaskType::Classif => md.task.n_classes()?,
                TaskType::Regr => 1,
            };
            let module = NeuralModule::new(
                "head",
                ModuleKind::Linear(Linear::new(in_features, out_features, rng)?),
            );
            Ok((module, ShapeSpec(vec![cursor.0[0], Extent::Known(out_features)])))
        }
        LayerKind::Relu => Ok((NeuralModule::new("relu", ModuleKind::Relu), cursor.clone())),
        LayerKind::Sigmoid => {
            Ok((NeuralModule::new("sigmoid", ModuleKind::Sigmoid), cursor.clone()))
        }
        LayerKind::Dropout => {
            let p = hp.opt_f64("p", 0.5)?;
            Ok((
                NeuralModule::new("dropout", ModuleKind::Dropout(Dropout::new(p)?)),
                cursor.clone(),
            ))
        }
        LayerKind::Conv2d => {
            if cursor.rank() != 4 {
                return Err(Error::shape(format!("conv2d requires a rank-4 cursor, got {cursor}")));
            }
            let tail = cursor.known_tail()?;
            let (c, h, w) = (tail[0], tail[1], tail[2]);
            let out_channels = hp.req_usize("out_channels")?;
            let kernel_size = hp.req_usize("kernel_size")?;
            let stride = hp.opt_usize("stride", 1)?;
            let padding = hp.opt_usize("padding", 0)?;
            let (ho, wo) = conv_out_extent(h, w, kernel_size, stride, padding)?;
            let module = NeuralModule::new(
                "conv2d",
                ModuleKind::Conv2d(Conv2d::new(c, out_channels, kernel_size, stride, padding, rng)?),
            );
            Ok((
                module,
                ShapeSpec(vec![
                    cursor.0[0],
                    Extent::Known(out_channels),
                    Extent::Known(ho),
                    Extent::Known(wo),
                ]),
            ))
        }
        LayerKind::MaxPool2d => {
            if cursor.rank() != 4 {
                return Err(Error::shape(format!(
                    "max_pool2d requires a rank-4 cursor, got {cursor}"
                )));
            }
            let tail = cursor.known_tail()?;
            let (c, h, w) = (tail[0], tail[1], tail[2]);
            let kernel_size = hp.req_usize("kernel_size")?;
            let stride = hp.opt_usize("stride", kernel_size)?;
            let padding = hp.opt_usize("padding", 0)?;
            let (ho, wo) = conv_out_extent(h, w, kernel_size, stride, padding)?;
            let module = NeuralModule::new(
                "max_pool2d",
                ModuleKind::MaxPool2d(MaxPool2d::new(kernel_size, stride, padding)?),
            );
            Ok((
                module,
                ShapeSpec(vec![
                    cursor.0[0],
                    Extent::Known(c),
                    Extent::Known(ho),
                    Extent::Known(wo),
                ]),
            ))
        }
        LayerKind::BatchNorm2d => {
            if cursor.rank() != 4 {
                return Err(Error::shape(format!(
                    "batch_norm2d requires a rank-4 cursor, got {cursor}"
                )));
            }
            let c = match cursor.0[1] {
                Extent::Known(c) => c,
                Extent::Unknown => {
                    return Err(Error::shape("batch_norm2d requires a known channel extent"))
                }
            };
            let momentum = hp.opt_f64("momentum", 0.1)?;
            let eps = hp.opt_f64("eps", 1e-5)?;
            let module = NeuralModule::new(
                "batch_norm2d",
                ModuleKind::BatchNorm2d(BatchNorm2d::new(c, momentum, eps)?),
            );
            Ok((module, cursor.clone()))
        }
        LayerKind::Flatten => {
            if cursor.rank() < 2 {
                return Err(Error::shape(format!("flatten requires rank >= 2, got {cursor}")));
            }
            let tail = cursor.known_tail()?;
            let flat: usize = tail.iter().product();
            Ok((
                NeuralModule::new("flatten", ModuleKind::Flatten),
                ShapeSpec(vec![cursor.0[0], Extent::Known(flat)]),
            ))
        }
        LayerKind::TokenizerNum => {
            if cursor.rank() != 2 {
                return Err(Error::shape(format!(
                    "tokenizer_num requires a rank-2 cursor, got {cursor}"
                )));
            }
            let n_features = last_known(cursor)?;
            let d_token = hp.req_usize("d_token")?;
            let module = NeuralModule::new(
                "tokenizer_num",
                ModuleKind::TokenizerNum(TokenizerNum::new(n_features, d_token, rng)?),
            );
            Ok((
                module,
                ShapeSpec(vec![
                    cursor.0[0],
                    Extent::Known(n_features),
                    Extent::Known(d_token),
                ]),
            ))
        }
        LayerKind::TokenizerCateg => {
            if cursor.rank() != 2 {
                return Err(Error::shape(format!(
                    "tokenizer_categ requires a rank-2 cursor, got {cursor}"
                )));
            }
            let d_token = hp.req_usize("d_token")?;
            // Vocabulary sizes come from the categorical ingress feeding the
            // cursor.
            let NetInput::Ingress(ingress_name) = &md.cursor.at else {
                return Err(Error::Graph(
                    "tokenizer_categ must directly follow a categorical ingress".into(),
                ));
            };
            let ingress = md
                .ingresses
                .iter()
                .find(|i| &i.name == ingress_name)
                .ok_or_else(|| Error::Graph(format!("unknown ingress `{ingress_name}`")))?;
            let Assembly::CategoricalEncode(cols) = &ingress.assembly else {
                return Err(Error::Graph(
                    "tokenizer_categ must directly follow a categorical ingress".into(),
                ));
            };
            let mut cardinalities = Vec::with_capacity(cols.len());
            for col in cols {
                match md.task.column(col)? {
                    Column::Categorical(c) => cardinalities.push(c.levels.len()),
                    other => {
                        return Err(Error::Task(format!(
                            "`{col}` is {} but must be categorical",
                            other.type_name()
                        )))
                    }
                }
            }
            let n_features = cardinalities.len();
            let module = NeuralModule::new(
                "tokenizer_categ",
                ModuleKind::TokenizerCateg(TokenizerCateg::new(&cardinalities, d_token, rng)?),
            );
            Ok((
                module,
                ShapeSpec(vec![
                    cursor.0[0],
                    Extent::Known(n_features),
                    Extent::Known(d_token),
                ]),
            ))
        }
    }
}

/// Static shape of a merge over the given cursor shapes.
pub fn merge_shape(kind: &crate::nn::LayerConfig, shapes: &[&ShapeSpec]) -> Result<ShapeSpec> {
    match kind {
        crate::nn::LayerConfig::MergeSum => {
            for s in &shapes[1..] {
                if s.0 != shapes[0].0 {
                    return Err(Error::shape(format!(
                        "merge_sum requires identical shapes, got {} vs {}",
                        shapes[0], s
                    )));
                }
            }
            Ok(shapes[0].clone())
        }
        crate::nn::LayerConfig::MergeConcat { axis } => {
            let axis = *axis;
            let rank = shapes[0].rank();
            if axis == 0 || axis >= rank {
                return Err(Error::shape(format!(
                    "concat axis {axis} invalid for rank {rank} (batch axis excluded)"
                )));
            }
            let mut total = 0usize;
            for s in shapes {
                if s.rank() != rank {
                    return Err(Error::shape("merge_concat rank mismatch"));
                }
                for d in 0..rank {
                    if d == axis {
                        match s.0[d] {
                            Extent::Known(v) => total += v,
                            Extent::Unknown => {
                                return Err(Error::shape(
                                    "merge_concat requires known extents on the concat axis",
                                ))
                            }
                        }
                    } else if s.0[d] != shapes[0].0[d] {
                        return Err(Error::shape(format!(
                            "merge_concat shapes differ off axis {axis}: {} vs {}",
                            shapes[0], s
                        )));
                    }
                }
            }
            let mut out = shapes[0].0.clone();
            out[axis] = Extent::Known(total);
            Ok(ShapeSpec(out))
        }
        other => Err(Error::Graph(format!("not a merge kind: {other:?}"))),
    }
}
