use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamStore};

/// AdamW hyperparameters. Defaults follow the instruction-tuning column of
/// the reference schedule except for the learning rate, which is sized for
/// toy models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second moments for trainable parameters only.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn moment_shapes_ok(&self, params: &ParamStore) -> bool {
        self.moments.iter().all(|(k, m)| {
            params
                .get(k)
                .is_some_and(|p| p.len() == m.m.len() && p.len() == m.v.len())
        })
    }
}

/// One decoupled-weight-decay Adam update over every unfrozen parameter.
///
/// Validates all gradients before touching any parameter, so a contract
/// violation leaves both `params` and `state` unchanged.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let trainable: Vec<String> = params.trainable_names().map(str::to_string).collect();
    for name in &trainable {
        let p = params.require(name)?;
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::contract(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }

    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);

    for name in &trainable {
        let g = grads[name].data();
        let p = params.get_mut(name).expect("validated above");
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
        });
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i];
            mo.m[i] = h.beta1 * mo.m[i] + (1.0 - h.beta1) * gi;
            mo.v[i] = h.beta2 * mo.v[i] + (1.0 - h.beta2) * gi * gi;
            let mhat = mo.m[i] / bc1;
            let vhat = mo.v[i] / bc2;
            if h.weight_decay != 0.0 {
                *w -= lr * h.weight_decay * *w;
            }
            *w -= lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Half-cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::range("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::range(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Linear warmup over the first `warmup_ratio` of the run, then half-cosine
/// decay over the remainder.
pub fn warmup_cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(Error::range(format!("warmup ratio {warmup_ratio} outside [0, 1)")));
    }
    let warmup = (warmup_ratio * total_steps as f64).round() as usize;
    if step < warmup {
        return Ok(base_lr * (step + 1) as f64 / warmup as f64);
    }
    cosine_lr(step - warmup, total_steps - warmup, base_lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn one(name: &str, v: f64) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert(name, Tensor::scalar(v)).unwrap();
        ps
    }

    fn grad(name: &str, v: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert(name.to_string(), Tensor::scalar(v));
        g
    }

    #[test]
    fn frozen_param_untouched() {
        let mut ps = one("w", 0.123_456_789);
        ps.set_frozen("w", true).unwrap();
        let before = ps.clone();
        let mut st = OptimizerState::new(AdamWConfig::default());
        adamw_step(&mut ps, &grad("w", 42.0), &mut st, 0.5).unwrap();
        assert!(ps.bit_eq(&before));
        assert!(!st.has_moments("w"));
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut ps = one("w", 0.7);
        let mut st = OptimizerState::new(AdamWConfig::default());
        adamw_step(&mut ps, &grad("w", 0.0), &mut st, 0.1).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn one_bias_corrected_step() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + eps).
        let mut ps = one("w", 1.0);
        let mut st = OptimizerState::new(AdamWConfig::default());
        adamw_step(&mut ps, &grad("w", 1.0), &mut st, 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((ps.get("w").unwrap().data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_rejected_without_side_effects() {
        let mut ps = one("w", 1.0);
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut st = OptimizerState::new(AdamWConfig::default());
        assert!(matches!(
            adamw_step(&mut ps, &g, &mut st, 0.1),
            Err(Error::Contract(_))
        ));
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.3).unwrap(), 0.3);
        assert!(cosine_lr(100, 100, 0.3).unwrap().abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.3).is_err());
        assert!(cosine_lr(0, 0, 0.3).is_err());
    }

    #[test]
    fn cosine_is_non_increasing() {
        let total = 997;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, 1.0).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn warmup_ramps_then_decays() {
        assert_eq!(warmup_cosine_lr(0, 10, 1.0, 0.0).unwrap(), cosine_lr(0, 10, 1.0).unwrap());
        assert!((warmup_cosine_lr(0, 10, 1.0, 0.2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(warmup_cosine_lr(2, 10, 1.0, 0.2).unwrap(), 1.0);
        assert!(warmup_cosine_lr(9, 10, 1.0, 0.2).unwrap() < 0.1);
        assert!(warmup_cosine_lr(0, 10, 1.0, 1.0).is_err());
    }
}
