//! Assembling task rows into named input tensors plus a target tensor.

use super::lazy::Phase;
use super::{Column, Task, TaskType};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// How one network input is assembled from task columns.
#[derive(Debug, Clone, PartialEq)]
pub enum Assembly {
    /// Stack numeric/integer columns into a float `(B, F)` tensor.
    NumericStack(Vec<String>),
    /// Label-encode categorical columns into an integer-valued `(B, F)`
    /// tensor (0-based first-appearance codes).
    CategoricalEncode(Vec<String>),
    /// Materialize a lazy column and stack into `(B, ...)`.
    LazyColumn(String),
}

/// Named inputs assembled per batch; the order matches the network's
/// ingress order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub inputs: Vec<(String, Assembly)>,
}

/// One mini-batch: named feature tensors, the target tensor, and the active
/// row positions it came from.
pub struct Batch {
    pub x: Vec<(String, Tensor<f32>)>,
    pub y: Tensor<f32>,
    pub index: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.index.len()
    }
}

/// Assemble specific active-row positions into one batch.
pub fn assemble_batch(
    task: &Task,
    plan: &BatchPlan,
    positions: &[usize],
    phase: Phase,
    rng: &mut RngState,
) -> Result<Batch> {
    let row_ids = task.row_ids();
    let rows: Vec<usize> = positions.iter().map(|&p| row_ids[p]).collect();
    let b = rows.len();
    let mut x = Vec::with_capacity(plan.inputs.len());
    for (name, assembly) in &plan.inputs {
        let tensor = match assembly {
            Assembly::NumericStack(cols) => {
                let f = cols.len();
                let mut data = vec![0.0f32; b * f];
                for (ci, col_name) in cols.iter().enumerate() {
                    match task.column(col_name)? {
                        Column::Numeric(v) => {
                            for (bi, &r) in rows.iter().enumerate() {
                                data[bi * f + ci] = v[r] as f32;
                            }
                        }
                        Column::Integer(c) => {
                            for (bi, &r) in rows.iter().enumerate() {
                                data[bi * f + ci] =
                                    if c.missing[r] { f32::NAN } else { c.values[r] as f32 };
                            }
                        }
                        other => {
                            return Err(Error::Task(format!(
                                "numeric ingress cannot stack `{col_name}` of type {}",
                                other.type_name()
                            )))
                        }
                    }
                }
                Tensor::from_vec(&[b, f], data)?
            }
            Assembly::CategoricalEncode(cols) => {
                let f = cols.len();
                let mut data = vec![0.0f32; b * f];
                for (ci, col_name) in cols.iter().enumerate() {
                    match task.column(col_name)? {
                        Column::Categorical(c) => {
                            for (bi, &r) in rows.iter().enumerate() {
                                let code = c.codes[r].ok_or_else(|| {
                                    Error::Task(format!("missing level in `{col_name}` row {r}"))
                                })?;
                                data[bi * f + ci] = code as f32;
                            }
                        }
                        other => {
                            return Err(Error::Task(format!(
                                "categorical ingress cannot encode `{col_name}` of type {}",
                                other.type_name()
                            )))
                        }
                    }
                }
                Tensor::from_vec(&[b, f], data)?
            }
            Assembly::LazyColumn(col_name) => {
                let Column::Lazy(lazy) = task.column(col_name)? else {
                    return Err(Error::Task(format!("`{col_name}` is not a lazy column")));
                };
                let elements = lazy.materialize(&rows, phase, rng)?;
                stack_elements(&elements)?
            }
        };
        x.push((name.clone(), tensor));
    }
    let y = match task.task_type {
        TaskType::Classif => {
            let codes = task.class_codes()?;
            let data: Vec<f32> = positions.iter().map(|&p| codes[p] as f32).collect();
            Tensor::from_vec(&[b], data)?
        }
        TaskType::Regr => {
            let values = task.target_values()?;
            let data: Vec<f32> = positions.iter().map(|&p| values[p] as f32).collect();
            Tensor::from_vec(&[b], data)?
        }
    };
    Ok(Batch { x, y, index: positions.to_vec() })
}

fn stack_elements(elements: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first_shape = elements
        .first()
        .ok_or_else(|| Error::Task("cannot stack zero elements".into()))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(elements.len() * elements[0].numel());
    for e in elements {
        if e.shape() != first_shape.as_slice() {
            return Err(Error::shape(format!(
                "lazy elements do not share one shape: {:?} vs {:?}",
                first_shape,
                e.shape()
            )));
        }
        data.extend_from_slice(&e.data());
    }
    let mut shape = vec![elements.len()];
    shape.extend_from_slice(&first_shape);
    Tensor::from_vec(&shape, data)
}

/// Split active-row positions into epoch batches: every active row exactly
/// once, last batch possibly smaller, optional shuffled order.
pub fn epoch_batches(
    n_rows: usize,
    batch_size: usize,
    shuffle: bool,
    rng: &mut RngState,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if n_rows == 0 {
        return Err(Error::Task("cannot iterate batches of an empty task".into()));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Stream of batches over one epoch.
pub fn batch_iter(
    task: &Task,
    plan: &BatchPlan,
    batch_size: usize,
    shuffle: bool,
    rng: &mut RngState,
    phase: Phase,
) -> Result<Vec<Batch>> {
    let chunks = epoch_batches(task.n_rows(), batch_size, shuffle, rng)?;
    chunks
        .into_iter()
        .map(|positions| assemble_batch(task, plan, &positions, phase, rng))
        .collect()
}
