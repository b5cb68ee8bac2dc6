//! Tabular tasks: typed columns, active-row views, lazy tensor columns,
//! batching, CSV ingestion and synthetic generators.

pub mod batch;
pub mod csv_io;
pub mod lazy;
pub mod synth;

pub use batch::{assemble_batch, batch_iter, epoch_batches, Assembly, Batch, BatchPlan};
pub use csv_io::{load_csv, write_csv, ColType};
pub use lazy::{
    DatasetBacking, ElementShape, IndexedDataset, InMemoryBacking, LazyTensorColumn, LazyTransform,
    Phase, RawTensor,
};
pub use synth::{synth_multimodal, synth_regression, synth_tabular_regression, MultimodalSpec};

use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskType {
    Classif,
    Regr,
}

impl TaskType {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskType::Classif => "classif",
            TaskType::Regr => "regr",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntColumn {
    pub values: Vec<i64>,
    pub missing: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategColumn {
    /// Level codes in first-appearance order; `None` marks a missing cell.
    pub codes: Vec<Option<u32>>,
    pub levels: Vec<String>,
}

/// One task column. Numeric missing values use a NaN sentinel; integers
/// carry an explicit mask.
#[derive(Clone)]
pub enum Column {
    Numeric(Arc<Vec<f64>>),
    Integer(Arc<IntColumn>),
    Categorical(Arc<CategColumn>),
    Lazy(LazyTensorColumn),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Integer(c) => c.values.len(),
            Column::Categorical(c) => c.codes.len(),
            Column::Lazy(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Column::Numeric(_) => "numeric",
            Column::Integer(_) => "integer",
            Column::Categorical(_) => "categorical",
            Column::Lazy(_) => "lazy_tensor",
        }
    }

    /// Number of missing cells (lazy columns report 0).
    pub fn missing_count(&self, rows: &[usize]) -> usize {
        match self {
            Column::Numeric(v) => rows.iter().filter(|&&r| v[r].is_nan()).count(),
            Column::Integer(c) => rows.iter().filter(|&&r| c.missing[r]).count(),
            Column::Categorical(c) => rows.iter().filter(|&&r| c.codes[r].is_none()).count(),
            Column::Lazy(_) => 0,
        }
    }

    /// Restrict the column storage to `rows` (used by ops that re-base a
    /// task onto its active rows).
    pub fn take_rows(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(Arc::new(rows.iter().map(|&r| v[r]).collect())),
            Column::Integer(c) => Column::Integer(Arc::new(IntColumn {
                values: rows.iter().map(|&r| c.values[r]).collect(),
                missing: rows.iter().map(|&r| c.missing[r]).collect(),
            })),
            Column::Categorical(c) => Column::Categorical(Arc::new(CategColumn {
                codes: rows.iter().map(|&r| c.codes[r]).collect(),
                levels: c.levels.clone(),
            })),
            Column::Lazy(l) => Column::Lazy(l.subset(rows)),
        }
    }
}

struct TaskData {
    columns: Vec<(String, Column)>,
}

impl TaskData {
    fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }
}

/// Tabular dataset plus metadata. Immutable after construction except row
/// filtering, which clones only the active-row list.
#[derive(Clone)]
pub struct Task {
    pub id: String,
    pub task_type: TaskType,
    data: Arc<TaskData>,
    target: String,
    features: Vec<String>,
    row_ids: Vec<usize>,
    group: Option<String>,
    /// Class index scored as positive for binary measures (classif only).
    pub positive: Option<usize>,
}

impl Task {
    pub fn new(
        id: impl Into<String>,
        task_type: TaskType,
        columns: Vec<(String, Column)>,
        target: impl Into<String>,
        group: Option<String>,
    ) -> Result<Task> {
        let id = id.into();
        let target = target.into();
        let mut len: Option<usize> = None;
        let mut seen = BTreeSet::new();
        for (name, col) in &columns {
            if !seen.insert(name.clone()) {
                return Err(Error::Task(format!("duplicate column `{name}`")));
            }
            match len {
                None => len = Some(col.len()),
                Some(l) if l != col.len() => {
                    return Err(Error::Task(format!(
                        "column `{name}` has {} rows, expected {l}",
                        col.len()
                    )))
                }
                _ => {}
            }
        }
        let n = len.unwrap_or(0);
        let data = TaskData { columns };
        let target_col = data
            .column(&target)
            .ok_or_else(|| Error::Task(format!("target column `{target}` not found")))?;
        match task_type {
            TaskType::Classif => {
                if !matches!(target_col, Column::Categorical(_)) {
                    return Err(Error::Task("classif target must be categorical".into()));
                }
            }
            TaskType::Regr => {
                if !matches!(target_col, Column::Numeric(_)) {
                    return Err(Error::Task("regr target must be numeric".into()));
                }
            }
        }
        if let Some(g) = &group {
            if data.column(g).is_none() {
                return Err(Error::Task(format!("group column `{g}` not found")));
            }
        }
        let features: Vec<String> = data
            .columns
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| n != &target && Some(n) != group.as_ref())
            .collect();
        Ok(Task {
            id,
            task_type,
            data: Arc::new(data),
            target,
            features,
            row_ids: (0..n).collect(),
            group,
            positive: None,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn storage_rows(&self) -> usize {
        self.data.columns.first().map_or(0, |(_, c)| c.len())
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn target_name(&self) -> &str {
        &self.target
    }

    pub fn group_name(&self) -> Option<&str> {
        self.group.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.features
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.data
            .column(name)
            .ok_or_else(|| Error::Task(format!("column `{name}` not found in task `{}`", self.id)))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.data.column(name).is_some()
    }

    /// Feature names whose column type is in `types`.
    pub fn features_of_type(&self, types: &[&str]) -> Vec<String> {
        self.features
            .iter()
            .filter(|n| {
                let col = self.data.column(n).expect("feature column exists");
                types.contains(&col.type_name())
            })
            .cloned()
            .collect()
    }

    /// Keep only the active rows whose row id is in `keep`; survivors stay
    /// in their current order.
    pub fn filter(&self, keep: &[usize]) -> Task {
        let keep_set: BTreeSet<usize> = keep.iter().copied().collect();
        let mut out = self.clone();
        out.row_ids = self.row_ids.iter().copied().filter(|r| keep_set.contains(r)).collect();
        out
    }

    /// Replace the active-row list wholesale (may repeat rows; used by
    /// class balancing).
    pub fn with_row_ids(&self, row_ids: Vec<usize>) -> Result<Task> {
        let n = self.storage_rows();
        if let Some(&bad) = row_ids.iter().find(|&&r| r >= n) {
            return Err(Error::Task(format!("row id {bad} out of range 0..{n}")));
        }
        let mut out = self.clone();
        out.row_ids = row_ids;
        Ok(out)
    }

    /// New task with a different feature subset (target and group pass
    /// through untouched).
    pub fn select_features(&self, keep: &[String]) -> Result<Task> {
        for name in keep {
            if !self.features.contains(name) {
                return Err(Error::Task(format!("`{name}` is not a feature of this task")));
            }
        }
        let mut out = self.clone();
        out.features = self
            .features
            .iter()
            .filter(|n| keep.contains(n))
            .cloned()
            .collect();
        Ok(out)
    }

    /// New task with replaced/added columns; `features` lists the new
    /// feature order.
    pub fn with_columns(&self, columns: Vec<(String, Column)>, features: Vec<String>) -> Result<Task> {
        let n = self.storage_rows();
        for (name, col) in &columns {
            if col.len() != n {
                return Err(Error::Task(format!(
                    "replacement column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
        }
        let mut all: Vec<(String, Column)> = columns;
        // keep target and group columns
        for keep in [Some(&self.target), self.group.as_ref()].into_iter().flatten() {
            if !all.iter().any(|(n, _)| n == keep) {
                all.push((keep.clone(), self.data.column(keep).unwrap().clone()));
            }
        }
        let mut out = self.clone();
        out.data = Arc::new(TaskData { columns: all });
        out.features = features;
        Ok(out)
    }

    /// Rebuild the task so its storage holds exactly the active rows. Used
    /// by ops whose output is a fresh table (imputation, encoding).
    pub fn rebase_to_active(&self) -> Task {
        let rows = &self.row_ids;
        let columns: Vec<(String, Column)> = self
            .data
            .columns
            .iter()
            .map(|(n, c)| (n.clone(), c.take_rows(rows)))
            .collect();
        let mut out = self.clone();
        out.data = Arc::new(TaskData { columns });
        out.row_ids = (0..rows.len()).collect();
        out
    }

    /// Target classes (classif): level table of the target column.
    pub fn class_levels(&self) -> Result<&[String]> {
        match self.column(&self.target)? {
            Column::Categorical(c) => Ok(&c.levels),
            _ => Err(Error::Task("target is not categorical".into())),
        }
    }

    pub fn n_classes(&self) -> Result<usize> {
        Ok(self.class_levels()?.len())
    }

    /// Class code per active row; missing target is an error.
    pub fn class_codes(&self) -> Result<Vec<usize>> {
        match self.column(&self.target)? {
            Column::Categorical(c) => self
                .row_ids
                .iter()
                .map(|&r| {
                    c.codes[r]
                        .map(|v| v as usize)
                        .ok_or_else(|| Error::Task(format!("missing target in row {r}")))
                })
                .collect(),
            _ => Err(Error::Task("target is not categorical".into())),
        }
    }

    /// Numeric target per active row (regr).
    pub fn target_values(&self) -> Result<Vec<f64>> {
        match self.column(&self.target)? {
            Column::Numeric(v) => Ok(self.row_ids.iter().map(|&r| v[r]).collect()),
            _ => Err(Error::Task("target is not numeric".into())),
        }
    }

    /// Group label per active row, as an opaque code.
    pub fn group_codes(&self) -> Result<Option<Vec<u64>>> {
        let Some(g) = &self.group else {
            return Ok(None);
        };
        let col = self.column(g)?;
        let codes = match col {
            Column::Categorical(c) => self
                .row_ids
                .iter()
                .map(|&r| {
                    c.codes[r]
                        .map(|v| v as u64)
                        .ok_or_else(|| Error::Task("missing group label".into()))
                })
                .collect::<Result<Vec<u64>>>()?,
            Column::Integer(c) => self
                .row_ids
                .iter()
                .map(|&r| {
                    if c.missing[r] {
                        Err(Error::Task("missing group label".into()))
                    } else {
                        Ok(c.values[r] as u64)
                    }
                })
                .collect::<Result<Vec<u64>>>()?,
            _ => return Err(Error::Task("group column must be categorical or integer".into())),
        };
        Ok(Some(codes))
    }

    pub fn missing_count(&self, column: &str) -> Result<usize> {
        Ok(self.column(column)?.missing_count(&self.row_ids))
    }
}

/// Build a categorical column from string labels, levels in first-appearance
/// order.
pub fn categorical_from_labels<S: AsRef<str>>(labels: &[S]) -> CategColumn {
    let mut levels: Vec<String> = Vec::new();
    let codes = labels
        .iter()
        .map(|l| {
            let l = l.as_ref();
            if l.is_empty() {
                return None;
            }
            match levels.iter().position(|x| x == l) {
                Some(i) => Some(i as u32),
                None => {
                    levels.push(l.to_string());
                    Some((levels.len() - 1) as u32)
                }
            }
        })
        .collect();
    CategColumn { codes, levels }
}
