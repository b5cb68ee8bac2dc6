//! Prediction objects and evaluation measures, including ROC/AUC for binary
//! probability predictions.

use crate::error::{Error, Result};
use std::fmt;
use std::sync::Arc;

/// Output of a predict call. Classification rows may carry a probability
/// matrix; its rows sum to one and the response is its argmax (ties resolve
/// to the lowest class index).
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Classif {
        row_ids: Vec<usize>,
        truth: Vec<usize>,
        response: Vec<usize>,
        /// Flat row-major `(n, n_classes)` matrix.
        prob: Option<Vec<f64>>,
        levels: Vec<String>,
        positive: usize,
    },
    Regr {
        row_ids: Vec<usize>,
        truth: Vec<f64>,
        response: Vec<f64>,
    },
}

impl Prediction {
    pub fn len(&self) -> usize {
        match self {
            Prediction::Classif { row_ids, .. } | Prediction::Regr { row_ids, .. } => row_ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_ids(&self) -> &[usize] {
        match self {
            Prediction::Classif { row_ids, .. } | Prediction::Regr { row_ids, .. } => row_ids,
        }
    }

    /// Probability of the positive class per row (binary classif with
    /// probabilities only).
    pub fn positive_scores(&self) -> Result<Vec<f64>> {
        match self {
            Prediction::Classif { prob: Some(p), levels, positive, row_ids, .. } => {
                let k = levels.len();
                Ok((0..row_ids.len()).map(|i| p[i * k + positive]).collect())
            }
            Prediction::Classif { prob: None, .. } => {
                Err(Error::invalid("prediction has no probabilities"))
            }
            Prediction::Regr { .. } => Err(Error::invalid("regression prediction has no classes")),
        }
    }
}

/// Classification response from a probability matrix: argmax per row, ties
/// to the lowest index.
pub fn argmax_response(prob: &[f64], n: usize, k: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let row = &prob[i * k..(i + 1) * k];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone)]
pub struct CustomMeasure {
    pub id: String,
    pub minimize: bool,
    pub f: Arc<dyn Fn(&Prediction) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomMeasure({})", self.id)
    }
}

#[derive(Debug, Clone)]
pub enum Measure {
    Rmse,
    Mse,
    /// Misclassification rate.
    Ce,
    Acc,
    Logloss,
    Auc,
    Custom(CustomMeasure),
}

impl Measure {
    pub fn id(&self) -> String {
        match self {
            Measure::Rmse => "regr.rmse".into(),
            Measure::Mse => "regr.mse".into(),
            Measure::Ce => "classif.ce".into(),
            Measure::Acc => "classif.acc".into(),
            Measure::Logloss => "classif.logloss".into(),
            Measure::Auc => "classif.auc".into(),
            Measure::Custom(c) => c.id.clone(),
        }
    }

    pub fn minimize(&self) -> bool {
        match self {
            Measure::Rmse | Measure::Mse | Measure::Ce | Measure::Logloss => true,
            Measure::Acc | Measure::Auc => false,
            Measure::Custom(c) => c.minimize,
        }
    }

    /// Whether the measure needs a probability matrix.
    pub fn needs_prob(&self) -> bool {
        matches!(self, Measure::Logloss | Measure::Auc)
    }

    pub fn score(&self, pred: &Prediction) -> Result<f64> {
        match (self, pred) {
            (Measure::Rmse, Prediction::Regr { truth, response, .. }) => {
                Ok(mse_of(truth, response).sqrt())
            }
            (Measure::Mse, Prediction::Regr { truth, response, .. }) => Ok(mse_of(truth, response)),
            (Measure::Ce, Prediction::Classif { truth, response, .. }) => {
                let wrong = truth.iter().zip(response).filter(|(t, r)| t != r).count();
                Ok(wrong as f64 / truth.len().max(1) as f64)
            }
            (Measure::Acc, Prediction::Classif { truth, response, .. }) => {
                let right = truth.iter().zip(response).filter(|(t, r)| t == r).count();
                Ok(right as f64 / truth.len().max(1) as f64)
            }
            (Measure::Logloss, Prediction::Classif { truth, prob, levels, .. }) => {
                let p = prob
                    .as_ref()
                    .ok_or_else(|| Error::invalid("logloss requires probabilities"))?;
                let k = levels.len();
                let mut total = 0.0;
                for (i, &t) in truth.iter().enumerate() {
                    total -= p[i * k + t].max(1e-15).ln();
                }
                Ok(total / truth.len().max(1) as f64)
            }
            (Measure::Auc, _) => auc(pred),
            (Measure::Custom(c), _) => Ok((c.f)(pred)),
            _ => Err(Error::invalid(format!(
                "measure {} does not apply to this prediction type",
                self.id()
            ))),
        }
    }
}

impl std::str::FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "regr.rmse" | "rmse" => Measure::Rmse,
            "regr.mse" | "mse" => Measure::Mse,
            "classif.ce" | "ce" => Measure::Ce,
            "classif.acc" | "acc" => Measure::Acc,
            "classif.logloss" | "logloss" => Measure::Logloss,
            "classif.auc" | "auc" => Measure::Auc,
            other => return Err(Error::invalid(format!("unknown measure `{other}`"))),
        })
    }
}

fn mse_of(truth: &[f64], response: &[f64]) -> f64 {
    let n = truth.len().max(1);
    truth.iter().zip(response).map(|(t, r)| (t - r) * (t - r)).sum::<f64>() / n as f64
}

/// AUC of the positive-class score via the rank statistic (equivalent to the
/// trapezoid area under the ROC curve), with average ranks on ties.
pub fn auc(pred: &Prediction) -> Result<f64> {
    let Prediction::Classif { truth, positive, .. } = pred else {
        return Err(Error::invalid("auc applies to classification predictions"));
    };
    let scores = pred.positive_scores()?;
    let n_pos = truth.iter().filter(|&&t| t == *positive).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc undefined without both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks over tied scores
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = truth
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == *positive)
        .map(|(i, _)| ranks[i])
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// ROC curve points `(threshold, fpr, tpr)`, monotone in the threshold
/// (descending); predictions score positive when `score >= threshold`.
pub fn roc_points(pred: &Prediction) -> Result<Vec<(f64, f64, f64)>> {
    let Prediction::Classif { truth, positive, .. } = pred else {
        return Err(Error::invalid("roc applies to classification predictions"));
    };
    let scores = pred.positive_scores()?;
    let n_pos = truth.iter().filter(|&&t| t == *positive).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("roc undefined without both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // consume all rows tied at this threshold
        while i < order.len() && scores[order[i]] == threshold {
            if truth[order[i]] == *positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((threshold, fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(truth: &[usize], scores: &[f64]) -> Prediction {
        let n = truth.len();
        let prob: Vec<f64> = scores.iter().flat_map(|&s| [1.0 - s, s]).collect();
        Prediction::Classif {
            row_ids: (0..n).collect(),
            truth: truth.to_vec(),
            response: argmax_response(&prob, n, 2),
            prob: Some(prob),
            levels: vec!["neg".into(), "pos".into()],
            positive: 1,
        }
    }

    #[test]
    fn perfect_prediction_scores() {
        let pred = binary(&[1, 0, 1, 0], &[0.9, 0.1, 0.8, 0.2]);
        assert_eq!(Measure::Ce.score(&pred).unwrap(), 0.0);
        assert_eq!(Measure::Acc.score(&pred).unwrap(), 1.0);
        assert_eq!(Measure::Auc.score(&pred).unwrap(), 1.0);
        let regr = Prediction::Regr {
            row_ids: vec![0, 1],
            truth: vec![1.0, 2.0],
            response: vec![1.0, 2.0],
        };
        assert_eq!(Measure::Rmse.score(&regr).unwrap(), 0.0);
    }

    #[test]
    fn logloss_of_uniform_ten_class_prob() {
        let n = 4;
        let k = 10;
        let prob = vec![0.1f64; n * k];
        let pred = Prediction::Classif {
            row_ids: (0..n).collect(),
            truth: vec![0, 3, 5, 9],
            response: argmax_response(&prob, n, k),
            prob: Some(prob),
            levels: (0..k).map(|i| i.to_string()).collect(),
            positive: 0,
        };
        assert!((Measure::Logloss.score(&pred).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let truth = [1usize, 0, 1, 0];
        let scores = [0.8, 0.7, 0.6, 0.2];
        let pred = binary(&truth, &scores);
        // Exhaustive Mann-Whitney count over positive/negative pairs.
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &t) in truth.iter().enumerate() {
            if t != 1 {
                continue;
            }
            for (j, &u) in truth.iter().enumerate() {
                if u != 0 {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        let expected = wins / total;
        assert!((Measure::Auc.score(&pred).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.75).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone_and_reaches_the_corners() {
        let pred = binary(&[1, 0, 1, 0, 1], &[0.9, 0.8, 0.7, 0.3, 0.2]);
        let points = roc_points(&pred).unwrap();
        assert_eq!(points.first().unwrap().1, 0.0);
        assert_eq!(points.first().unwrap().2, 0.0);
        assert_eq!(points.last().unwrap().1, 1.0);
        assert_eq!(points.last().unwrap().2, 1.0);
        for w in points.windows(2) {
            assert!(w[1].0 <= w[0].0, "thresholds descend");
            assert!(w[1].1 >= w[0].1 && w[1].2 >= w[0].2, "fpr/tpr non-decreasing");
        }
    }

    #[test]
    fn random_scores_on_balanced_data_give_auc_near_half() {
        let n = 2000;
        let mut rng = crate::rng::RngState::new(20);
        let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let pred = binary(&truth, &scores);
        let auc = Measure::Auc.score(&pred).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "uninformative scores give auc {auc}");
    }

    #[test]
    fn measures_requiring_prob_reject_response_only() {
        let pred = Prediction::Classif {
            row_ids: vec![0, 1],
            truth: vec![0, 1],
            response: vec![0, 1],
            prob: None,
            levels: vec!["a".into(), "b".into()],
            positive: 1,
        };
        assert!(Measure::Logloss.score(&pred).is_err());
        assert!(Measure::Auc.score(&pred).is_err());
        assert!(Measure::Acc.score(&pred).is_ok());
    }
}
