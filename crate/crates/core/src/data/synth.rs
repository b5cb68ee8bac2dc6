//! Synthetic task generators: a wide linear-regression table for the runtime
//! harness, a small car-style regression table, and a grouped multimodal
//! classification task with a lazy image column.

use super::lazy::{DatasetBacking, ElementShape, IndexedDataset, LazyTensorColumn, RawTensor};
use super::{CategColumn, Column, IntColumn, Task, TaskType};
use crate::error::Result;
use crate::rng::RngState;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Regression task: `n` rows, `d` standard-normal features, linear target
/// plus noise.
pub fn synth_regression(n: usize, d: usize, rng: &mut RngState) -> Result<Task> {
    let mut weights = Vec::with_capacity(d);
    let mut w_rng = rng.split(0xC0EF);
    for _ in 0..d {
        weights.push(w_rng.normal(0.0, 1.0) / (d as f64).sqrt());
    }
    let mut feature_data: Vec<Vec<f64>> = vec![Vec::with_capacity(n); d];
    let mut target = Vec::with_capacity(n);
    for _ in 0..n {
        let mut y = 0.0;
        for (j, w) in weights.iter().enumerate() {
            let x = rng.normal(0.0, 1.0);
            feature_data[j].push(x);
            y += w * x;
        }
        target.push(y + rng.normal(0.0, 0.1));
    }
    let mut columns: Vec<(String, Column)> = feature_data
        .into_iter()
        .enumerate()
        .map(|(j, v)| (format!("x{:04}", j + 1), Column::Numeric(Arc::new(v))))
        .collect();
    columns.push(("y".to_string(), Column::Numeric(Arc::new(target))));
    Task::new(format!("synth_regr_{n}x{d}"), TaskType::Regr, columns, "y", None)
}

/// Small regression table shaped like the classic 32-row car dataset:
/// 10 numeric features, target `mpg`.
pub fn synth_tabular_regression(rng: &mut RngState) -> Result<Task> {
    let names = ["am", "carb", "cyl", "disp", "drat", "gear", "hp", "qsec", "vs", "wt"];
    let n = 32;
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    for (j, _) in names.iter().enumerate() {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let x = match j {
                0 | 8 => f64::from(rng.bernoulli(0.45)),                 // binary-ish
                1 => (1 + rng.below(8)) as f64,                          // small counts
                2 => [4.0, 6.0, 8.0][rng.below(3) as usize],             // cylinders
                3 => rng.uniform(70.0, 480.0),                           // displacement
                5 => (3 + rng.below(3)) as f64,                          // gears
                6 => rng.uniform(50.0, 340.0),                           // horsepower
                9 => rng.uniform(1.5, 5.5),                              // weight
                _ => rng.uniform(2.5, 23.0),
            };
            v.push(x);
        }
        columns.push(v);
    }
    // mpg correlates negatively with weight and horsepower.
    let mpg: Vec<f64> = (0..n)
        .map(|i| {
            30.0 - 3.5 * columns[9][i] - 0.02 * columns[6][i] + 2.0 * columns[0][i]
                + rng.normal(0.0, 1.0)
        })
        .collect();
    let mut cols: Vec<(String, Column)> = names
        .iter()
        .zip(columns)
        .map(|(n, v)| (n.to_string(), Column::Numeric(Arc::new(v))))
        .collect();
    cols.push(("mpg".to_string(), Column::Numeric(Arc::new(mpg))));
    Task::new("cars_synth", TaskType::Regr, cols, "mpg", None)
}

/// Configuration for [`synth_multimodal`].
#[derive(Debug, Clone)]
pub struct MultimodalSpec {
    pub n: usize,
    pub image_shape: (usize, usize, usize),
    /// Expected share of positive rows.
    pub positive_ratio: f64,
    /// Expected share of missing cells in the integer feature.
    pub missing_ratio: f64,
    pub seed: u64,
}

impl Default for MultimodalSpec {
    fn default() -> Self {
        MultimodalSpec {
            n: 500,
            image_shape: (3, 16, 16),
            positive_ratio: 0.1,
            missing_ratio: 0.08,
            seed: 1,
        }
    }
}

/// Image source generated on demand; positive rows receive a bright blob so
/// the convolutional path has signal to find.
struct GeneratedImages {
    n: usize,
    shape: (usize, usize, usize),
    positive: Vec<bool>,
    seed: u64,
}

impl DatasetBacking for GeneratedImages {
    fn len(&self) -> usize {
        self.n
    }

    fn get(&self, index: usize) -> Result<BTreeMap<String, RawTensor>> {
        let (c, h, w) = self.shape;
        let mut rng = RngState::new(self.seed).split(index as u64);
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c * h * w {
            data.push(rng.normal(0.0, 0.3) as f32);
        }
        if self.positive[index] {
            let ci = rng.below(h as u64 - 3) as usize;
            let cj = rng.below(w as u64 - 3) as usize;
            for ch in 0..c {
                for i in ci..ci + 4 {
                    for j in cj..cj + 4 {
                        data[(ch * h + i) * w + j] += 2.0;
                    }
                }
            }
        }
        let mut m = BTreeMap::new();
        m.insert("image".to_string(), RawTensor::new(vec![c, h, w], data));
        Ok(m)
    }
}

/// Grouped binary classification with an integer feature carrying missing
/// values, two categorical features, and a lazy image column. The positive
/// class is the minority (`positive` level index 1).
pub fn synth_multimodal(spec: &MultimodalSpec) -> Result<Task> {
    let mut rng = RngState::new(spec.seed);
    let n = spec.n;
    let mut positive = Vec::with_capacity(n);
    for _ in 0..n {
        positive.push(rng.bernoulli(spec.positive_ratio));
    }
    // Integer age-like feature: shifted upward for positive rows, with
    // injected missing values (at least one).
    let mut ages = Vec::with_capacity(n);
    let mut missing = Vec::with_capacity(n);
    for &pos in &positive {
        let base = if pos { 62.0 } else { 46.0 };
        ages.push(rng.normal(base, 12.0).clamp(1.0, 95.0) as i64);
        missing.push(rng.bernoulli(spec.missing_ratio));
    }
    if !missing.iter().any(|&m| m) {
        missing[0] = true;
    }
    let sites = ["torso", "limb", "head", "other"];
    let sexes = ["female", "male"];
    let site_codes: Vec<Option<u32>> = (0..n).map(|_| Some(rng.below(4) as u32)).collect();
    let sex_codes: Vec<Option<u32>> = (0..n).map(|_| Some(rng.below(2) as u32)).collect();
    // Group column: consecutive rows share a patient id, group sizes 1..=4.
    let mut groups = Vec::with_capacity(n);
    let mut gid: u32 = 0;
    while groups.len() < n {
        let size = 1 + rng.below(4) as usize;
        for _ in 0..size.min(n - groups.len()) {
            groups.push(Some(gid));
        }
        gid += 1;
    }
    let group_levels: Vec<String> = (0..gid).map(|g| format!("p{g:04}")).collect();
    let outcome_codes: Vec<Option<u32>> =
        positive.iter().map(|&p| Some(u32::from(p))).collect();
    let images = IndexedDataset::new(Arc::new(GeneratedImages {
        n,
        shape: spec.image_shape,
        positive: positive.clone(),
        seed: spec.seed ^ 0x1111_2222,
    }));
    let (c, h, w) = spec.image_shape;
    let image_col =
        LazyTensorColumn::new(images, "image", ElementShape::Known(vec![c, h, w]));
    let columns: Vec<(String, Column)> = vec![
        (
            "age".to_string(),
            Column::Integer(Arc::new(IntColumn { values: ages, missing })),
        ),
        (
            "site".to_string(),
            Column::Categorical(Arc::new(CategColumn {
                codes: site_codes,
                levels: sites.iter().map(|s| s.to_string()).collect(),
            })),
        ),
        (
            "sex".to_string(),
            Column::Categorical(Arc::new(CategColumn {
                codes: sex_codes,
                levels: sexes.iter().map(|s| s.to_string()).collect(),
            })),
        ),
        ("image".to_string(), Column::Lazy(image_col)),
        (
            "patient".to_string(),
            Column::Categorical(Arc::new(CategColumn { codes: groups, levels: group_levels })),
        ),
        (
            "outcome".to_string(),
            Column::Categorical(Arc::new(CategColumn {
                codes: outcome_codes,
                levels: vec!["benign".to_string(), "malignant".to_string()],
            })),
        ),
    ];
    let mut task = Task::new(
        "multimodal_synth",
        TaskType::Classif,
        columns,
        "outcome",
        Some("patient".to_string()),
    )?;
    task.positive = Some(1);
    Ok(task)
}
