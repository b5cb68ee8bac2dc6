//! Index-addressable datasets and the lazy tensor column.
//!
//! A [`LazyTensorColumn`] never touches its backing dataset during
//! construction, subsetting or transform appending; elements are fetched and
//! transformed only inside [`LazyTensorColumn::materialize`].

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Train-time materialization applies the full transform chain; predict-time
/// skips train-only (augmentation) entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Predict,
}

/// A plain shaped buffer, the exchange type produced by dataset backings
/// (kept free of tape machinery so backings can be `Send + Sync`).
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        RawTensor { shape, data }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&self.shape, self.data.clone()).expect("raw tensor is consistent")
    }
}

/// How a dataset produces one element: a named map of raw tensors.
pub trait DatasetBacking: Send + Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<BTreeMap<String, RawTensor>>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Backing over in-memory elements.
pub struct InMemoryBacking {
    pub elements: Vec<BTreeMap<String, RawTensor>>,
}

impl InMemoryBacking {
    pub fn of_tensors(key: &str, tensors: Vec<RawTensor>) -> Self {
        InMemoryBacking {
            elements: tensors
                .into_iter()
                .map(|t| {
                    let mut m = BTreeMap::new();
                    m.insert(key.to_string(), t);
                    m
                })
                .collect(),
        }
    }
}

impl DatasetBacking for InMemoryBacking {
    fn len(&self) -> usize {
        self.elements.len()
    }

    fn get(&self, index: usize) -> Result<BTreeMap<String, RawTensor>> {
        self.elements
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Task(format!("dataset index {index} out of range")))
    }
}

/// Wrapper adding the observable getter-invocation counter.
#[derive(Clone)]
pub struct IndexedDataset {
    backing: Arc<dyn DatasetBacking>,
    calls: Arc<AtomicUsize>,
}

impl IndexedDataset {
    pub fn new(backing: Arc<dyn DatasetBacking>) -> Self {
        IndexedDataset { backing, calls: Arc::new(AtomicUsize::new(0)) }
    }

    pub fn len(&self) -> usize {
        self.backing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backing.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<BTreeMap<String, RawTensor>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.backing.get(index)
    }

    /// Number of getter invocations so far (shared across clones).
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub(crate) fn backing_arc(&self) -> Arc<dyn DatasetBacking> {
        Arc::clone(&self.backing)
    }
}

/// Element shape declared by a lazy column: fully known extents or varying.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElementShape {
    Known(Vec<usize>),
    Varying,
}

/// One deferred transform with its phase applicability.
#[derive(Debug, Clone, PartialEq)]
pub enum LazyTransform {
    Reshape { shape: Vec<i64> },
    ResizeBilinear { height: usize, width: usize },
    Normalize { mean: Vec<f32>, std: Vec<f32> },
    /// Random flip; `vertical` flips along the height axis.
    Flip { vertical: bool, p: f64 },
    RandomCrop { height: usize, width: usize, pad_if_needed: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformEntry {
    pub op: LazyTransform,
    pub train_only: bool,
}

/// Index-addressable vector of tensors with a deferred transform chain.
#[derive(Clone)]
pub struct LazyTensorColumn {
    dataset: IndexedDataset,
    key: String,
    indices: Arc<Vec<usize>>,
    transforms: Vec<TransformEntry>,
    declared_shape: ElementShape,
}

impl LazyTensorColumn {
    pub fn new(dataset: IndexedDataset, key: impl Into<String>, declared_shape: ElementShape) -> Self {
        let indices = Arc::new((0..dataset.len()).collect());
        LazyTensorColumn {
            dataset,
            key: key.into(),
            indices,
            transforms: Vec::new(),
            declared_shape,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn declared_shape(&self) -> &ElementShape {
        &self.declared_shape
    }

    pub fn dataset(&self) -> &IndexedDataset {
        &self.dataset
    }

    pub fn transform_count(&self) -> usize {
        self.transforms.len()
    }

    /// Structural equality: same backing dataset object, same element key,
    /// same row indices and the same transform chain.
    pub fn same_source(&self, other: &LazyTensorColumn) -> bool {
        Arc::ptr_eq(&self.dataset.backing_arc(), &other.dataset.backing_arc())
            && self.key == other.key
            && self.indices == other.indices
            && self.transforms == other.transforms
    }

    /// Restrict to the given positions (no dataset access).
    pub fn subset(&self, positions: &[usize]) -> LazyTensorColumn {
        let indices = positions.iter().map(|&p| self.indices[p]).collect();
        LazyTensorColumn {
            dataset: self.dataset.clone(),
            key: self.key.clone(),
            indices: Arc::new(indices),
            transforms: self.transforms.clone(),
            declared_shape: self.declared_shape.clone(),
        }
    }

    /// Append a transform, updating the declared shape by the transform's
    /// shape rule (no dataset access). A train-only transform that would
    /// change the shape demotes the declaration to varying, since the
    /// predict phase skips it.
    pub fn with_transform(&self, op: LazyTransform, train_only: bool) -> Result<LazyTensorColumn> {
        let new_shape = transform_shape(&self.declared_shape, &op)?;
        let declared_shape = if train_only && new_shape != self.declared_shape {
            ElementShape::Varying
        } else {
            new_shape
        };
        let mut out = self.clone();
        out.transforms.push(TransformEntry { op, train_only });
        out.declared_shape = declared_shape;
        Ok(out)
    }

    /// Fetch and transform the elements at the given active positions.
    pub fn materialize(
        &self,
        positions: &[usize],
        phase: Phase,
        rng: &mut RngState,
    ) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(positions.len());
        for &pos in positions {
            let index = *self
                .indices
                .get(pos)
                .ok_or_else(|| Error::Task(format!("lazy column position {pos} out of range")))?;
            let element = self.dataset.get(index)?;
            let raw = element.get(&self.key).ok_or_else(|| {
                Error::Task(format!("dataset element has no entry `{}`", self.key))
            })?;
            let mut tensor = raw.to_tensor();
            for entry in &self.transforms {
                if entry.train_only && phase == Phase::Predict {
                    continue;
                }
                tensor = apply_transform(&tensor, &entry.op, rng)?;
            }
            if let ElementShape::Known(shape) = &self.declared_shape {
                if phase == Phase::Predict && tensor.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "materialized element shape {:?} does not match declared {:?}",
                        tensor.shape(),
                        shape
                    )));
                }
            }
            out.push(tensor);
        }
        Ok(out)
    }
}

fn transform_shape(input: &ElementShape, op: &LazyTransform) -> Result<ElementShape> {
    match op {
        LazyTransform::Reshape { shape } => {
            if shape.iter().any(|&d| d == -1) {
                match input {
                    ElementShape::Known(in_shape) => {
                        let numel: usize = in_shape.iter().product();
                        let known: usize =
                            shape.iter().filter(|&&d| d != -1).map(|&d| d as usize).product();
                        if known == 0 || numel % known != 0 {
                            return Err(Error::shape(format!(
                                "reshape {shape:?} incompatible with element shape {in_shape:?}"
                            )));
                        }
                        Ok(ElementShape::Known(
                            shape
                                .iter()
                                .map(|&d| if d == -1 { numel / known } else { d as usize })
                                .collect(),
                        ))
                    }
                    ElementShape::Varying => Ok(ElementShape::Varying),
                }
            } else {
                Ok(ElementShape::Known(shape.iter().map(|&d| d as usize).collect()))
            }
        }
        LazyTransform::ResizeBilinear { height, width } => match input {
            ElementShape::Known(s) if s.len() == 3 => {
                Ok(ElementShape::Known(vec![s[0], *height, *width]))
            }
            ElementShape::Known(s) => Err(Error::shape(format!(
                "resize expects rank-3 images, column declares {s:?}"
            ))),
            ElementShape::Varying => Ok(ElementShape::Varying),
        },
        LazyTransform::Normalize { .. } | LazyTransform::Flip { .. } => Ok(input.clone()),
        LazyTransform::RandomCrop { height, width, .. } => match input {
            ElementShape::Known(s) if s.len() == 3 => {
                Ok(ElementShape::Known(vec![s[0], *height, *width]))
            }
            ElementShape::Known(s) => Err(Error::shape(format!(
                "crop expects rank-3 images, column declares {s:?}"
            ))),
            ElementShape::Varying => Ok(ElementShape::Varying),
        },
    }
}

fn apply_transform(x: &Tensor<f32>, op: &LazyTransform, rng: &mut RngState) -> Result<Tensor<f32>> {
    match op {
        LazyTransform::Reshape { shape } => x.reshape(shape),
        LazyTransform::ResizeBilinear { height, width } => resize_bilinear(x, *height, *width),
        LazyTransform::Normalize { mean, std } => normalize(x, mean, std),
        LazyTransform::Flip { vertical, p } => {
            if rng.bernoulli(*p) {
                flip(x, *vertical)
            } else {
                Ok(x.clone())
            }
        }
        LazyTransform::RandomCrop { height, width, pad_if_needed } => {
            random_crop(x, *height, *width, *pad_if_needed, rng)
        }
    }
}

/// Bilinear resampling with align-corners = false semantics.
pub fn resize_bilinear(x: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!("resize expects (C,H,W), got {:?}", x.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target extents must be positive"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = vec![0.0f32; c * out_h * out_w];
    let scale_h = h as f64 / out_h as f64;
    let scale_w = w as f64 / out_w as f64;
    for ci in 0..c {
        for i in 0..out_h {
            let src_i = ((i as f64 + 0.5) * scale_h - 0.5).clamp(0.0, (h - 1) as f64);
            let i0 = src_i.floor() as usize;
            let i1 = (i0 + 1).min(h - 1);
            let di = (src_i - i0 as f64) as f32;
            for j in 0..out_w {
                let src_j = ((j as f64 + 0.5) * scale_w - 0.5).clamp(0.0, (w - 1) as f64);
                let j0 = src_j.floor() as usize;
                let j1 = (j0 + 1).min(w - 1);
                let dj = (src_j - j0 as f64) as f32;
                let p00 = xd[(ci * h + i0) * w + j0];
                let p01 = xd[(ci * h + i0) * w + j1];
                let p10 = xd[(ci * h + i1) * w + j0];
                let p11 = xd[(ci * h + i1) * w + j1];
                let top = p00 + (p01 - p00) * dj;
                let bottom = p10 + (p11 - p10) * dj;
                out[(ci * out_h + i) * out_w + j] = top + (bottom - top) * di;
            }
        }
    }
    drop(xd);
    Tensor::from_vec(&[c, out_h, out_w], out)
}

fn normalize(x: &Tensor<f32>, mean: &[f32], std: &[f32]) -> Result<Tensor<f32>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!("normalize expects (C,H,W), got {:?}", x.shape())));
    }
    let c = x.shape()[0];
    if (mean.len() != c && mean.len() != 1) || (std.len() != c && std.len() != 1) {
        return Err(Error::invalid("normalize mean/std must have 1 or C entries"));
    }
    let hw = x.shape()[1] * x.shape()[2];
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    for ci in 0..c {
        let m = mean[ci.min(mean.len() - 1)];
        let s = std[ci.min(std.len() - 1)];
        for k in 0..hw {
            out.push((xd[ci * hw + k] - m) / s);
        }
    }
    drop(xd);
    Tensor::from_vec(x.shape(), out)
}

pub fn flip(x: &Tensor<f32>, vertical: bool) -> Result<Tensor<f32>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!("flip expects (C,H,W), got {:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = vec![0.0f32; xd.len()];
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = if vertical { (h - 1 - i, j) } else { (i, w - 1 - j) };
                out[(ci * h + i) * w + j] = xd[(ci * h + si) * w + sj];
            }
        }
    }
    drop(xd);
    Tensor::from_vec(x.shape(), out)
}

fn random_crop(
    x: &Tensor<f32>,
    out_h: usize,
    out_w: usize,
    pad_if_needed: bool,
    rng: &mut RngState,
) -> Result<Tensor<f32>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!("crop expects (C,H,W), got {:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if (out_h > h || out_w > w) && !pad_if_needed {
        return Err(Error::invalid(format!(
            "crop {out_h}x{out_w} larger than image {h}x{w} without pad_if_needed"
        )));
    }
    // Zero-pad evenly first when needed (extra pixel goes to the far edge).
    let (ph, pw) = (h.max(out_h), w.max(out_w));
    let data = if ph != h || pw != w {
        let top = (ph - h) / 2;
        let left = (pw - w) / 2;
        let xd = x.data();
        let mut padded = vec![0.0f32; c * ph * pw];
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    padded[(ci * ph + i + top) * pw + j + left] = xd[(ci * h + i) * w + j];
                }
            }
        }
        padded
    } else {
        x.to_vec()
    };
    let max_i = ph - out_h;
    let max_j = pw - out_w;
    let oi = if max_i == 0 { 0 } else { rng.below(max_i as u64 + 1) as usize };
    let oj = if max_j == 0 { 0 } else { rng.below(max_j as u64 + 1) as usize };
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ci in 0..c {
        for i in 0..out_h {
            for j in 0..out_w {
                out[(ci * out_h + i) * out_w + j] = data[(ci * ph + i + oi) * pw + j + oj];
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}
