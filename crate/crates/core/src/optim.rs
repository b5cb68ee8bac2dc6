//! Gradient-based update rules (SGD, AdamW with decoupled weight decay) and
//! the global gradient-norm clipper.
//!
//! Parameters with `requires_grad == false` are skipped entirely: frozen
//! weights receive neither the adaptive step nor weight decay.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    AdamW,
}

impl OptimKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::AdamW => "adamw",
        }
    }
}

impl std::str::FromStr for OptimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adamw" => Ok(OptimKind::AdamW),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimConfig { kind: OptimKind::Sgd, lr, weight_decay: 0.0, betas: (0.9, 0.999), eps: 1e-8 }
    }

    pub fn adamw(lr: f64) -> Self {
        OptimConfig {
            kind: OptimKind::AdamW,
            lr,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::invalid("eps must be positive"));
        }
        Ok(())
    }
}

/// Moment slots exist per parameter name only for AdamW; their shapes mirror
/// the parameters.
pub struct Optimizer<E: Element> {
    pub config: OptimConfig,
    step_count: u64,
    slots: BTreeMap<String, Moments<E>>,
}

pub struct Moments<E> {
    pub m: Vec<E>,
    pub v: Vec<E>,
}

impl<E: Element> Optimizer<E> {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, step_count: 0, slots: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn slots(&self) -> &BTreeMap<String, Moments<E>> {
        &self.slots
    }

    pub fn restore(&mut self, step_count: u64, slots: BTreeMap<String, Moments<E>>) {
        self.step_count = step_count;
        self.slots = slots;
    }

    /// Consume the optimizer, yielding its serializable state.
    pub fn into_state(self) -> (u64, Vec<(String, Moments<E>)>) {
        (self.step_count, self.slots.into_iter().collect())
    }

    pub fn zero_grad(&self, params: &[(String, Tensor<E>)]) {
        for (_, p) in params {
            p.zero_grad();
        }
    }

    /// One update over all trainable parameters. Errors if a trainable
    /// parameter has no gradient.
    pub fn step(&mut self, params: &[(String, Tensor<E>)]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        for (name, p) in params {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().ok_or_else(|| {
                Error::invalid(format!("parameter `{name}` has no gradient before step"))
            })?;
            match self.config.kind {
                OptimKind::Sgd => {
                    let lr = E::from_f64(self.config.lr);
                    let wd = E::from_f64(self.config.weight_decay);
                    let mut data = p.data_mut();
                    for (w, g) in data.iter_mut().zip(&grad) {
                        *w = *w - lr * (*g + wd * *w);
                    }
                }
                OptimKind::AdamW => {
                    let lr = self.config.lr;
                    let (b1, b2) = self.config.betas;
                    let eps = self.config.eps;
                    let slot = self.slots.entry(name.clone()).or_insert_with(|| Moments {
                        m: vec![E::ZERO; p.numel()],
                        v: vec![E::ZERO; p.numel()],
                    });
                    if slot.m.len() != p.numel() {
                        return Err(Error::invalid(format!(
                            "moment slot for `{name}` has stale shape"
                        )));
                    }
                    let bias1 = 1.0 - b1.powi(t as i32);
                    let bias2 = 1.0 - b2.powi(t as i32);
                    // Decoupled decay first, then the bias-corrected
                    // adaptive update.
                    let decay = E::from_f64(1.0 - lr * self.config.weight_decay);
                    let b1e = E::from_f64(b1);
                    let b2e = E::from_f64(b2);
                    let one_b1 = E::from_f64(1.0 - b1);
                    let one_b2 = E::from_f64(1.0 - b2);
                    let lr_e = E::from_f64(lr);
                    let eps_e = E::from_f64(eps);
                    let inv_bias1 = E::from_f64(1.0 / bias1);
                    let inv_bias2 = E::from_f64(1.0 / bias2);
                    let mut data = p.data_mut();
                    let len = data.len();
                    let (w_s, g_s, m_s, v_s) =
                        (&mut data[..len], &grad[..len], &mut slot.m[..len], &mut slot.v[..len]);
                    for i in 0..len {
                        let g = g_s[i];
                        let m = b1e * m_s[i] + one_b1 * g;
                        let v = b2e * v_s[i] + one_b2 * g * g;
                        m_s[i] = m;
                        v_s[i] = v;
                        let m_hat = m * inv_bias1;
                        let v_hat = v * inv_bias2;
                        w_s[i] = w_s[i] * decay - lr_e * m_hat / (v_hat.sqrt() + eps_e);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormType {
    P(f64),
    Inf,
}

impl NormType {
    pub fn l2() -> Self {
        NormType::P(2.0)
    }
}

/// Global gradient-norm clipping: computes the p-norm over all gradients and,
/// when it exceeds `max_norm`, scales every gradient by `max_norm / norm`.
/// Returns the pre-clip norm (0 when no gradients are populated).
pub fn clip_grad_norm<E: Element>(
    params: &[(String, Tensor<E>)],
    max_norm: f64,
    norm_type: NormType,
) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::invalid("max_norm must be positive"));
    }
    if let NormType::P(p) = norm_type {
        if p < 1.0 {
            return Err(Error::invalid("norm order must satisfy p >= 1"));
        }
    }
    let mut grads: Vec<&Tensor<E>> = Vec::new();
    for (_, t) in params {
        if t.requires_grad() && t.grad().is_some() {
            grads.push(t);
        }
    }
    let norm = match norm_type {
        NormType::Inf => {
            let mut m = 0.0f64;
            for t in &grads {
                for g in t.grad().unwrap() {
                    m = m.max(g.to_f64().abs());
                }
            }
            m
        }
        NormType::P(p) => {
            let mut acc = 0.0f64;
            for t in &grads {
                for g in t.grad().unwrap() {
                    acc += g.to_f64().abs().powf(p);
                }
            }
            acc.powf(1.0 / p)
        }
    };
    if norm > max_norm {
        let scale = E::from_f64(max_norm / norm);
        for t in &grads {
            let scaled: Vec<E> = t.grad().unwrap().iter().map(|&g| g * scale).collect();
            t.zero_grad();
            t.accumulate_grad(&scaled);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(params: &[(&str, Tensor<f64>)]) -> Vec<(String, Tensor<f64>)> {
        params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    fn leaf(values: &[f64]) -> Tensor<f64> {
        let t = Tensor::from_vec(&[values.len()], values.to_vec()).unwrap();
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn sgd_single_step() {
        let p = leaf(&[1.0]);
        p.accumulate_grad(&[1.0]);
        let mut opt = Optimizer::new(OptimConfig::sgd(0.1)).unwrap();
        opt.step(&named(&[("w", p.clone())])).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn sgd_zero_grad_leaves_parameter_unchanged() {
        let p = leaf(&[2.5]);
        p.accumulate_grad(&[0.0]);
        let mut opt = Optimizer::new(OptimConfig::sgd(0.5)).unwrap();
        opt.step(&named(&[("w", p.clone())])).unwrap();
        assert_eq!(p.data()[0], 2.5);
    }

    #[test]
    fn sgd_five_steps_match_closed_form_recursion() {
        // f(w) = w^2 / 2, grad = w, so w <- w (1 - lr).
        let lr = 0.3;
        let w0 = 2.0;
        let p = leaf(&[w0]);
        let mut opt = Optimizer::new(OptimConfig::sgd(lr)).unwrap();
        for _ in 0..5 {
            p.zero_grad();
            p.accumulate_grad(&[p.data()[0]]);
            opt.step(&named(&[("w", p.clone())])).unwrap();
        }
        let expected = w0 * (1.0 - lr).powi(5);
        assert!((p.data()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let p = leaf(&[1.0]);
        p.accumulate_grad(&[0.37]);
        let mut opt = Optimizer::new(OptimConfig::adamw(0.01)).unwrap();
        opt.step(&named(&[("w", p.clone())])).unwrap();
        // Bias correction at t=1 gives m_hat = g, v_hat = g^2, so the
        // displacement is lr * g / (|g| + eps) ~ lr * sign(g).
        let displacement = 1.0 - p.data()[0];
        assert!((displacement - 0.01).abs() < 1e-6, "got {displacement}");
    }

    #[test]
    fn adamw_zero_grad_pure_decay() {
        let p = leaf(&[4.0]);
        let mut opt = Optimizer::new(OptimConfig::adamw(0.1).with_weight_decay(0.5)).unwrap();
        for _ in 0..3 {
            p.zero_grad();
            p.accumulate_grad(&[0.0]);
            opt.step(&named(&[("w", p.clone())])).unwrap();
        }
        let expected = 4.0 * (1.0 - 0.1 * 0.5f64).powi(3);
        assert!((p.data()[0] - expected).abs() < 1e-12);
    }

    /// Independent scalar AdamW recursion used as the oracle.
    #[allow(clippy::too_many_arguments)]
    fn adamw_oracle(
        mut w: f64,
        grads: &[f64],
        lr: f64,
        wd: f64,
        b1: f64,
        b2: f64,
        eps: f64,
    ) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            w *= 1.0 - lr * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        w
    }

    #[test]
    fn adamw_ten_steps_match_reference_recursion() {
        // Quadratic f(w) = 0.5 * sum(c_i w_i^2): grad_i = c_i w_i.
        let coeffs = [1.0, 0.25, 3.0];
        let starts = [2.0, -1.5, 0.5];
        let (lr, wd) = (0.05, 0.01);
        let p = leaf(&starts);
        let mut opt = Optimizer::new(OptimConfig::adamw(lr).with_weight_decay(wd)).unwrap();
        let mut grad_histories: Vec<Vec<f64>> = vec![Vec::new(); 3];
        for _ in 0..10 {
            p.zero_grad();
            let g: Vec<f64> = p.data().iter().zip(coeffs).map(|(&w, c)| c * w).collect();
            for (h, &gi) in grad_histories.iter_mut().zip(&g) {
                h.push(gi);
            }
            p.accumulate_grad(&g);
            opt.step(&named(&[("w", p.clone())])).unwrap();
        }
        for i in 0..3 {
            let expected =
                adamw_oracle(starts[i], &grad_histories[i], lr, wd, 0.9, 0.999, 1e-8);
            assert!(
                (p.data()[i] - expected).abs() < 1e-12,
                "param {i}: {} vs {expected}",
                p.data()[i]
            );
        }
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn sgd_ten_steps_match_reference_recursion() {
        let coeffs = [1.0, 0.25, 3.0];
        let starts = [2.0, -1.5, 0.5];
        let (lr, wd) = (0.05, 0.01);
        let p = leaf(&starts);
        let mut opt = Optimizer::new(OptimConfig::sgd(lr).with_weight_decay(wd)).unwrap();
        let mut oracle = starts;
        for _ in 0..10 {
            p.zero_grad();
            let g: Vec<f64> = p.data().iter().zip(coeffs).map(|(&w, c)| c * w).collect();
            p.accumulate_grad(&g);
            opt.step(&named(&[("w", p.clone())])).unwrap();
            for i in 0..3 {
                oracle[i] -= lr * (coeffs[i] * oracle[i] + wd * oracle[i]);
            }
        }
        for i in 0..3 {
            assert!((p.data()[i] - oracle[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn optimizers_strictly_decrease_quadratic_below_stability_bound() {
        for config in [OptimConfig::sgd(1.9), OptimConfig::adamw(0.1)] {
            let p = leaf(&[3.0, -2.0]);
            let mut opt = Optimizer::new(config).unwrap();
            let f = |w: &[f64]| 0.5 * w.iter().map(|v| v * v).sum::<f64>();
            let mut previous = f(&p.data());
            for _ in 0..20 {
                p.zero_grad();
                let g: Vec<f64> = p.data().clone();
                p.accumulate_grad(&g);
                opt.step(&named(&[("w", p.clone())])).unwrap();
                let now = f(&p.data());
                assert!(now < previous, "f must strictly decrease: {now} !< {previous}");
                previous = now;
            }
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let p = leaf(&[1.0]);
        let mut opt = Optimizer::new(OptimConfig::sgd(0.1)).unwrap();
        assert!(opt.step(&named(&[("w", p)])).is_err());
    }

    #[test]
    fn frozen_parameters_are_skipped_entirely() {
        let p = leaf(&[1.0]);
        p.set_requires_grad(false);
        let mut opt = Optimizer::new(OptimConfig::sgd(0.1).with_weight_decay(1.0)).unwrap();
        opt.step(&named(&[("w", p.clone())])).unwrap();
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn clip_three_four_five() {
        let p = leaf(&[0.0, 0.0]);
        p.accumulate_grad(&[3.0, 4.0]);
        let params = named(&[("w", p.clone())]);
        let norm = clip_grad_norm(&params, 1.0, NormType::l2()).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let g = p.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_below_max_leaves_grads_untouched() {
        let p = leaf(&[0.0, 0.0]);
        p.accumulate_grad(&[0.3, 0.4]);
        let params = named(&[("w", p.clone())]);
        let norm = clip_grad_norm(&params, 1.0, NormType::l2()).unwrap();
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(p.grad().unwrap(), vec![0.3, 0.4]);
    }

    #[test]
    fn clip_inf_norm_equals_brute_force_max() {
        let p = leaf(&[0.0; 4]);
        let grads = [1.5, -7.25, 3.0, 0.5];
        p.accumulate_grad(&grads);
        let params = named(&[("w", p.clone())]);
        let brute = grads.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
        let norm = clip_grad_norm(&params, 100.0, NormType::Inf).unwrap();
        assert_eq!(norm, brute);
    }

    #[test]
    fn clip_is_idempotent() {
        let p = leaf(&[0.0, 0.0]);
        p.accumulate_grad(&[30.0, 40.0]);
        let params = named(&[("w", p.clone())]);
        clip_grad_norm(&params, 1.0, NormType::l2()).unwrap();
        let after_first = p.grad().unwrap();
        let second_norm = clip_grad_norm(&params, 1.0, NormType::l2()).unwrap();
        assert!((second_norm - 1.0).abs() < 1e-9);
        let after_second = p.grad().unwrap();
        for (a, b) in after_first.iter().zip(&after_second) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_with_no_gradients_returns_zero() {
        let p = leaf(&[1.0]);
        let params = named(&[("w", p)]);
        assert_eq!(clip_grad_norm(&params, 1.0, NormType::l2()).unwrap(), 0.0);
    }
}
