//! AdamW with global-norm clipping and a single step-down learning rate.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{invalid, shape, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Fraction of the run after which the learning rate drops.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            lr_drop_at: 0.86,
            lr_drop_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(name, "must lie in [0, 1)"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(invalid("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(invalid("weight_decay", "decay and clip norm must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) || !(0.0..=1.0).contains(&self.lr_drop_factor) {
            return Err(invalid("lr_drop_at", "drop point and factor must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate for zero-based `step` of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if (step as f64) >= self.lr_drop_at * total as f64 {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    decay: Vec<bool>,
    steps: u64,
}

impl AdamW {
    /// Weight decay applies to matrices only, not to biases, norms or anchors.
    pub fn new(cfg: OptimConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        Ok(Self {
            cfg,
            m: zeros(),
            v: zeros(),
            decay: params
                .iter()
                .map(|(name, p)| p.nrows() > 1 && p.ncols() > 1 && name != "anchors")
                .collect(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Array2<f64>], lr: f64) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(shape("gradients", params.len(), grads.len()));
        }
        let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.dim() != p.dim() {
                return Err(shape("gradient", format!("{:?}", p.dim()), format!("{:?}", g.dim())));
            }
            let decay = if self.decay[i] { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *p -= lr * (update + decay * *p);
                });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_once() {
        let c = OptimConfig::default();
        assert_eq!(c.lr_at(0, 100), 1e-3);
        assert_eq!(c.lr_at(85, 100), 1e-3);
        assert!((c.lr_at(86, 100) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at(99, 100) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", ndarray::array![[3.0, -2.0]]).unwrap();
        let mut opt = AdamW::new(
            OptimConfig {
                lr: 0.05,
                ..OptimConfig::default()
            },
            &p,
        )
        .unwrap();
        for _ in 0..2000 {
            let g = p.values()[0].mapv(|x| 2.0 * x);
            opt.step(&mut p, &[g], 0.05).unwrap();
        }
        assert!(p.values()[0].iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Adam's first bias-corrected step has magnitude lr per coordinate.
        let mut p = ParamStore::new();
        p.insert("b", ndarray::array![[1.0, 1.0]]).unwrap();
        let mut opt = AdamW::new(OptimConfig::default(), &p).unwrap();
        opt.step(&mut p, &[ndarray::array![[0.3, -0.2]]], 0.01).unwrap();
        assert!((p.values()[0][[0, 0]] - 0.99).abs() < 1e-7);
        assert!((p.values()[0][[0, 1]] - 1.01).abs() < 1e-7);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = ParamStore::new();
        p.insert("b", ndarray::array![[1.0]]).unwrap();
        let mut opt = AdamW::new(OptimConfig::default(), &p).unwrap();
        assert!(opt.step(&mut p, &[ndarray::array![[f64::NAN]]], 0.01).is_err());
    }
}
