//! AdamW with decoupled weight decay and a reduce-on-plateau learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update over every parameter of `store`.
///
/// `step` is the 1-based step count used for bias correction. The decay
/// `param *= 1 - lr * wd` is applied before the Adam update.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    if step == 0 {
        return Err(Error::invalid("adamw step count is 1-based"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (p, g) in store.iter_mut().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{}: {:?} vs grad {:?}", p.name, p.value.shape(), g.shape()),
            ));
        }
        let w = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            w[i] *= decay;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-8,
        }
    }
}

/// Reduce-on-plateau for a higher-is-better metric.
///
/// Improvement means a strict increase over the best value seen. After
/// `patience` consecutive epochs without improvement the rate is multiplied
/// by `factor` (floored at `min_lr`) and the counter restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        PlateauScheduler {
            cfg,
            lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, metric: f64) -> f64 {
        let improved = self.best.map_or(true, |b| metric > b);
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(values)).unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut s = store(&[1.0, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &[Tensor::zeros(&[1, 2])], 1, 0.1, &cfg).unwrap();
        assert_eq!(s.by_name("w").unwrap().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_grad_decoupled_decay() {
        let mut s = store(&[1.0, -2.0]);
        adamw_step(&mut s, &[Tensor::zeros(&[1, 2])], 1, 0.1, &AdamWConfig::default()).unwrap();
        let w = s.by_name("w").unwrap().value.data().to_vec();
        assert!((w[0] - 0.999).abs() < 1e-15);
        assert!((w[1] + 1.998).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(&[0.5, 0.5, 0.5]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = Tensor::row(&[3.0, -0.02, 1e-3]);
        adamw_step(&mut s, &[g.clone()], 1, 0.01, &cfg).unwrap();
        let w = s.by_name("w").unwrap().value.data().to_vec();
        for (wi, gi) in w.iter().zip(g.data()) {
            let expected = 0.5 - 0.01 * gi.signum();
            // |g| / (|g| + eps) differs from 1 by at most eps/|g|.
            assert!((wi - expected).abs() <= 0.01 * 1e-8 / gi.abs() + 1e-15);
        }
    }

    #[test]
    fn plateau_halves_after_three_flat_epochs() {
        let mut s = PlateauScheduler::new(2e-3, PlateauConfig::default());
        let lrs: Vec<f64> = [0.5, 0.5, 0.5, 0.5].iter().map(|&m| s.step(m)).collect();
        assert_eq!(lrs, vec![2e-3, 2e-3, 2e-3, 1e-3]);
    }

    #[test]
    fn plateau_improving_sequence_keeps_lr() {
        let mut s = PlateauScheduler::new(2e-3, PlateauConfig::default());
        for m in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6] {
            assert_eq!(s.step(m), 2e-3);
        }
    }

    #[test]
    fn plateau_floor() {
        let mut s = PlateauScheduler::new(1.5e-8, PlateauConfig::default());
        s.best = Some(1.0);
        for _ in 0..3 {
            s.step(0.0);
        }
        assert_eq!(s.lr, 1e-8);
    }
}
