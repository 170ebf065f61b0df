use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

impl AdamWState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update: decoupled decay `p -= lr * wd * p`, then the
/// bias-corrected Adam step. A non-finite gradient rejects the whole step and
/// leaves parameters and state untouched.
pub fn adamw_step(
    params: &mut ParamSet<f32>,
    grads: &[Vec<f32>],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adamw",
            format!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params.get(i).len() {
            return Err(Error::shape("adamw", format!("gradient {} has wrong length", params.names()[i])));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", params.names()[i])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let decay = (1.0 - cfg.lr * cfg.weight_decay) as f32;
    let step_size = (cfg.lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = cfg.eps as f32;
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_mut(i).data_mut();
        let m = state.m.get_mut(i).data_mut();
        let v = state.v.get_mut(i).data_mut();
        for j in 0..p.len() {
            p[j] *= decay;
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            p[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(values: Vec<f32>) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_vec(values));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for _ in 0..3 {
            adamw_step(&mut p, &[vec![0.0; 3]], &mut st, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = single(vec![0.0, 0.0, 0.0]);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &[vec![0.3, -2.0, 1e-3]], &mut st, &cfg).unwrap();
        let d = p.get(0).data();
        assert!((d[0] + 1e-4).abs() < 1e-9);
        assert!((d[1] - 1e-4).abs() < 1e-9);
        // |g| = 1e-3 vs eps = 1e-8: still essentially -lr
        assert!((d[2] + 1e-4).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = single(vec![2.0]);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &[vec![0.0]], &mut st, &cfg).unwrap();
        assert!((p.get(0).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut p = single(vec![1.0, 1.0]);
        let before = p.clone();
        let mut st = AdamWState::new(&p);
        let err = adamw_step(&mut p, &[vec![0.1, f32::NAN]], &mut st, &AdamWConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn quadratic_loss_decreases() {
        // f(w) = 0.5 * sum (w - c)^2
        let c = [1.5f32, -0.5, 3.0];
        let mut p = single(vec![0.0; 3]);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.01,
            ..AdamWConfig::default()
        };
        let loss = |p: &ParamSet<f32>| -> f32 {
            p.get(0).data().iter().zip(c).map(|(w, c)| 0.5 * (w - c).powi(2)).sum()
        };
        let mut prev = loss(&p);
        for step in 0..100 {
            let g: Vec<f32> = p.get(0).data().iter().zip(c).map(|(w, c)| w - c).collect();
            adamw_step(&mut p, &[g], &mut st, &cfg).unwrap();
            let cur = loss(&p);
            if step >= 1 {
                assert!(cur < prev, "step {step}: {cur} >= {prev}");
            }
            prev = cur;
        }
    }
}
