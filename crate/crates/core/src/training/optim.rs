use demp_tensor::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inverse-square-root schedule with linear warmup, normalized so that
/// step 1 runs at `base`. Peaks at `step == warmup` with `base · warmup`.
pub fn lr_at_step(step: u64, warmup: u64, base: f64) -> Result<f64> {
    if warmup == 0 {
        return Err(Error::invalid("learning-rate warmup must be at least one step"));
    }
    if step == 0 {
        return Err(Error::invalid("learning-rate steps start at 1"));
    }
    let (s, w) = (step as f64, warmup as f64);
    let raw = s.powf(-0.5).min(s * w.powf(-1.5));
    Ok(base * raw / w.powf(-1.5))
}

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam moments, one buffer pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// One bias-corrected update at learning rate `lr`. Nothing changes if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (p, m) in store.iter().zip(&self.m) {
            if p.grad.len() != m.len() {
                return Err(Error::invalid(format!("moment shape mismatch for {}", p.name)));
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("x", &[1], vec![value]).unwrap();
        s.get_mut(id).grad[0] = grad;
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0, 1.0);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, 0.1).unwrap();
        // m̂ = 1, v̂ = 1, so the update is -0.1 / (1 + 1e-9).
        let expected = -0.1 / (1.0 + 1e-9);
        assert!((s.iter().next().unwrap().value[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.25, 0.0);
        let mut adam = Adam::new(&s, AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut s, 0.1).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().value[0], 0.25);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(0.0, f64::NAN);
        let mut adam = Adam::new(&s, AdamConfig::default());
        match adam.step(&mut s, 0.1) {
            Err(Error::NonFiniteGrad(name)) => assert_eq!(name, "x"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(adam.step, 0);
        assert_eq!(s.iter().next().unwrap().value[0], 0.0);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut s = ParamStore::new();
            let id = s.add("w", &[3], vec![0.1, -0.2, 0.3]).unwrap();
            let mut adam = Adam::new(&s, AdamConfig::default());
            for t in 0..10 {
                let vals = s.get(id).value.clone();
                s.get_mut(id).grad = vals.iter().map(|v| v * 2.0 + t as f64 * 0.01).collect();
                adam.step(&mut s, 1e-2).unwrap();
            }
            s.get(id).value.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at_step(1, 10, 1e-4).unwrap(), 1e-4);
        let peak = lr_at_step(10, 10, 1e-4).unwrap();
        assert!(lr_at_step(9, 10, 1e-4).unwrap() < peak);
        assert!(lr_at_step(11, 10, 1e-4).unwrap() < peak);
        // At 4w: (4w)^-0.5 / w^-1.5 = w / 2, half of the peak w.
        let quarter = lr_at_step(40, 10, 1e-4).unwrap();
        assert!((quarter - peak / 2.0).abs() < 1e-15);
        assert!(lr_at_step(1, 0, 1e-4).is_err());
        assert!(lr_at_step(0, 5, 1e-4).is_err());
    }

    #[test]
    fn schedule_is_continuous_at_warmup() {
        let w = 400;
        let below = lr_at_step(w, w, 1.0).unwrap();
        let s = w as f64;
        let from_decay = s.powf(-0.5) / s.powf(-1.5);
        assert!((below - from_decay).abs() < 1e-9 * from_decay);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut s = ParamStore::new();
        let id = s.add("w", &[2], vec![0.0, 0.0]).unwrap();
        s.get_mut(id).grad = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut s, 2.0), s.grad_norm());
    }
}
