//! CSV ingestion (RFC-4180 subset, UTF-8, header row required) and export.

use super::{categorical_from_labels, CategColumn, Column, IntColumn, Task, TaskType};
use crate::error::{Error, Result};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColType {
    Numeric,
    Integer,
    Categorical,
}

impl std::str::FromStr for ColType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "numeric" => Ok(ColType::Numeric),
            "integer" => Ok(ColType::Integer),
            "categorical" | "factor" => Ok(ColType::Categorical),
            other => Err(Error::invalid(format!("unknown column type `{other}`"))),
        }
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "NA" || cell == "NaN"
}

/// Load a task from CSV. `schema` assigns a type per column name; columns
/// absent from the schema default to numeric. Missing cells are recorded as
/// missing (NaN sentinel / mask / missing level).
pub fn load_csv(
    path: &Path,
    schema: &[(String, ColType)],
    target: &str,
    task_type: TaskType,
    group: Option<String>,
) -> Result<Task> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::Csv("empty header row".into()));
    }
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(format!("row {}: {e}", line + 2)))?;
        if record.len() != headers.len() {
            return Err(Error::Csv(format!(
                "row {} has {} fields, header has {}",
                line + 2,
                record.len(),
                headers.len()
            )));
        }
        for (i, field) in record.iter().enumerate() {
            cells[i].push(field.to_string());
        }
    }
    if cells[0].is_empty() {
        return Err(Error::Csv(format!("{}: no data rows", path.display())));
    }
    let col_type = |name: &str| -> ColType {
        schema
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| *t)
            .unwrap_or(ColType::Numeric)
    };
    let mut columns: Vec<(String, Column)> = Vec::with_capacity(headers.len());
    for (name, values) in headers.iter().zip(cells) {
        let column = match col_type(name) {
            ColType::Numeric => {
                let parsed: Result<Vec<f64>> = values
                    .iter()
                    .enumerate()
                    .map(|(r, v)| {
                        if is_missing(v) {
                            Ok(f64::NAN)
                        } else {
                            v.parse::<f64>().map_err(|_| {
                                Error::Csv(format!(
                                    "column `{name}` row {}: `{v}` is not numeric",
                                    r + 2
                                ))
                            })
                        }
                    })
                    .collect();
                Column::Numeric(Arc::new(parsed?))
            }
            ColType::Integer => {
                let mut ints = Vec::with_capacity(values.len());
                let mut missing = Vec::with_capacity(values.len());
                for (r, v) in values.iter().enumerate() {
                    if is_missing(v) {
                        ints.push(0);
                        missing.push(true);
                    } else {
                        let parsed = v.parse::<i64>().map_err(|_| {
                            Error::Csv(format!(
                                "column `{name}` row {}: `{v}` is not an integer",
                                r + 2
                            ))
                        })?;
                        ints.push(parsed);
                        missing.push(false);
                    }
                }
                Column::Integer(Arc::new(IntColumn { values: ints, missing }))
            }
            ColType::Categorical => {
                Column::Categorical(Arc::new(categorical_from_labels(&values)))
            }
        };
        columns.push((name.clone(), column));
    }
    Task::new(
        path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default(),
        task_type,
        columns,
        target,
        group,
    )
}

/// Write the active rows of a task (features, then group, then target).
pub fn write_csv(task: &Task, path: &Path) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let mut names: Vec<String> = task.feature_names().to_vec();
    if let Some(g) = task.group_name() {
        names.push(g.to_string());
    }
    names.push(task.target_name().to_string());
    writer.write_record(&names).map_err(|e| Error::Csv(e.to_string()))?;
    for &r in task.row_ids() {
        let mut record: Vec<String> = Vec::with_capacity(names.len());
        for name in &names {
            let cell = match task.column(name)? {
                Column::Numeric(v) => {
                    if v[r].is_nan() {
                        String::new()
                    } else {
                        format!("{:?}", v[r])
                    }
                }
                Column::Integer(c) => {
                    if c.missing[r] {
                        String::new()
                    } else {
                        c.values[r].to_string()
                    }
                }
                Column::Categorical(c) => match c.codes[r] {
                    Some(code) => c.levels[code as usize].clone(),
                    None => String::new(),
                },
                Column::Lazy(_) => {
                    return Err(Error::Csv(format!(
                        "lazy column `{name}` cannot be exported to CSV"
                    )))
                }
            };
            record.push(cell);
        }
        writer.write_record(&record).map_err(|e| Error::Csv(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// CategColumn helper for tests and generators.
pub fn levels_of(column: &CategColumn) -> &[String] {
    &column.levels
}
