//! Loss functions. Cross-entropy consumes raw logits and is fused with
//! log-softmax for numerical stability; MSE variants are composed from tape
//! primitives so the winsorized clamp inherits its gradient rule.

use crate::error::{Error, Result};
use crate::tensor::{CustomGrad, Element, Tensor};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
    WinsorizedMse,
}

/// Declarative loss configuration attached to learners and descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub class_weight: Option<Vec<f64>>,
    pub max_loss: Option<f64>,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec { kind: LossKind::CrossEntropy, class_weight: None, max_loss: None }
    }

    pub fn mse() -> Self {
        LossSpec { kind: LossKind::Mse, class_weight: None, max_loss: None }
    }

    pub fn winsorized_mse(max_loss: f64) -> Result<Self> {
        if max_loss <= 0.0 {
            return Err(Error::invalid("winsorized mse requires a positive max_loss"));
        }
        Ok(LossSpec { kind: LossKind::WinsorizedMse, class_weight: None, max_loss: Some(max_loss) })
    }

    /// Per-class positive weights; only meaningful for cross-entropy.
    pub fn with_class_weight(mut self, weights: Vec<f64>) -> Result<Self> {
        if self.kind != LossKind::CrossEntropy {
            return Err(Error::invalid("class_weight is only valid for cross_entropy"));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::invalid("class weights must be positive"));
        }
        self.class_weight = Some(weights);
        Ok(self)
    }

    pub fn is_classification(&self) -> bool {
        self.kind == LossKind::CrossEntropy
    }
}

/// Targets for [`loss_forward`].
pub enum LossTarget<'a, E: Element> {
    /// Class indices for cross-entropy.
    Classes(&'a [usize]),
    /// Regression targets, shape-compatible with the prediction.
    Values(&'a Tensor<E>),
}

pub fn loss_forward<E: Element>(
    spec: &LossSpec,
    prediction: &Tensor<E>,
    target: &LossTarget<'_, E>,
) -> Result<Tensor<E>> {
    match (spec.kind, target) {
        (LossKind::CrossEntropy, LossTarget::Classes(classes)) => {
            cross_entropy(prediction, classes, spec.class_weight.as_deref())
        }
        (LossKind::Mse, LossTarget::Values(values)) => mse(prediction, values),
        (LossKind::WinsorizedMse, LossTarget::Values(values)) => {
            let max_loss = spec
                .max_loss
                .ok_or_else(|| Error::invalid("winsorized mse without max_loss"))?;
            Ok(mse(prediction, values)?.clamp_max(max_loss))
        }
        _ => Err(Error::invalid("loss target kind does not match loss spec")),
    }
}

fn mse<E: Element>(prediction: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse shapes differ: {:?} vs {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let diff = prediction.sub(target)?;
    diff.mul(&diff)?.mean(None)
}

/// Weighted mean over the batch of negative log-softmax at the target class.
/// Weights are normalized by the sum of the selected weights, so a balanced
/// reweighting preserves the loss scale.
fn cross_entropy<E: Element>(
    logits: &Tensor<E>,
    classes: &[usize],
    class_weight: Option<&[f64]>,
) -> Result<Tensor<E>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "cross_entropy expects (B,K) logits, got {:?}",
            logits.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if classes.len() != b {
        return Err(Error::shape(format!(
            "cross_entropy got {b} rows but {} targets",
            classes.len()
        )));
    }
    for &c in classes {
        if c >= k {
            return Err(Error::invalid(format!("class index {c} out of range 0..{k}")));
        }
    }
    if let Some(w) = class_weight {
        if w.len() != k {
            return Err(Error::invalid(format!(
                "class_weight has {} entries for {k} classes",
                w.len()
            )));
        }
    }
    let ld = logits.data();
    let mut probs = vec![E::ZERO; b * k];
    let mut weight_sum = 0.0f64;
    let mut total = 0.0f64;
    for i in 0..b {
        let row = &ld[i * k..(i + 1) * k];
        let m = row.iter().fold(row[0], |a, &v| a.max(v));
        let mut denom = E::ZERO;
        for &v in row {
            denom += (v - m).exp();
        }
        let lse = m.to_f64() + denom.to_f64().ln();
        for (j, &v) in row.iter().enumerate() {
            probs[i * k + j] = E::from_f64((v.to_f64() - lse).exp());
        }
        let w = class_weight.map_or(1.0, |w| w[classes[i]]);
        weight_sum += w;
        total += w * (lse - row[classes[i]].to_f64());
    }
    drop(ld);
    let loss = total / weight_sum;
    let rule: Rc<dyn CustomGrad<E>> = Rc::new(CrossEntropyGrad {
        probs,
        classes: classes.to_vec(),
        weights: class_weight.map(|w| w.to_vec()),
        weight_sum,
        k,
    });
    Ok(Tensor::custom_op(&[logits], vec![], vec![E::from_f64(loss)], rule))
}

struct CrossEntropyGrad<E: Element> {
    probs: Vec<E>,
    classes: Vec<usize>,
    weights: Option<Vec<f64>>,
    weight_sum: f64,
    k: usize,
}

impl<E: Element> CustomGrad<E> for CrossEntropyGrad<E> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        _inputs: &[Tensor<E>],
        _output: &Tensor<E>,
        grad: &[E],
    ) -> Result<Vec<Option<Vec<E>>>> {
        let g = grad[0].to_f64();
        let k = self.k;
        let mut dl = vec![E::ZERO; self.probs.len()];
        for (i, &class) in self.classes.iter().enumerate() {
            let w = self.weights.as_ref().map_or(1.0, |w| w[class]);
            let scale = g * w / self.weight_sum;
            for j in 0..k {
                let indicator = if j == class { 1.0 } else { 0.0 };
                dl[i * k + j] = E::from_f64(scale * (self.probs[i * k + j].to_f64() - indicator));
            }
        }
        Ok(vec![Some(dl)])
    }
}

/// Row-wise softmax of rank-2 logits, outside the tape (prediction paths).
pub fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>> {
    if logits.rank() != 2 {
        return Err(Error::shape("softmax_rows expects rank-2 logits"));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let ld = logits.data();
    let mut out = vec![E::ZERO; b * k];
    for i in 0..b {
        let row = &ld[i * k..(i + 1) * k];
        let m = row.iter().fold(row[0], |a, &v| a.max(v));
        let mut denom = E::ZERO;
        for &v in row {
            denom += (v - m).exp();
        }
        for (j, &v) in row.iter().enumerate() {
            out[i * k + j] = (v - m).exp() / denom;
        }
    }
    drop(ld);
    Tensor::from_vec(&[b, k], out)
}
