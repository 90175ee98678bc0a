//! Decoupled-weight-decay Adam and the cosine learning-rate schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    /// Square training crop side.
    pub crop: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_start: 2e-4,
            lr_end: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            total_steps: 2000,
            crop: 96,
            batch_size: 4,
        }
    }
}

impl OptimizerConfig {
    /// Full-resolution recipe: 384 crops.
    pub fn full_scale() -> Self {
        Self {
            crop: 384,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.lr_end <= self.lr_start && self.lr_end >= 0.0, || {
            format!("need 0 <= lr_end ({}) <= lr_start ({})", self.lr_end, self.lr_start)
        })?;
        ensure(self.total_steps >= 1, || "total_steps must be at least 1".into())?;
        ensure((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), || {
            "betas must lie in [0,1)".into()
        })?;
        ensure(self.eps > 0.0 && self.weight_decay >= 0.0, || {
            "eps must be positive and weight_decay non-negative".into()
        })?;
        ensure(self.crop >= 1 && self.batch_size >= 1, || "crop and batch_size must be positive".into())
    }
}

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·step/total))` for `0 ≤ step ≤ total`.
pub fn cosine_lr(step: usize, cfg: &OptimizerConfig) -> Result<f64> {
    ensure(step <= cfg.total_steps, || {
        format!("step {step} beyond schedule of {} steps", cfg.total_steps)
    })?;
    let t = step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * t).cos()))
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam with weight decay applied directly to the parameters, `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
pub struct AdamW {
    slots: Vec<Slot>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let slots = store
            .vars()
            .into_iter()
            .map(|(_, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok(Slot {
                    m: z.clone(),
                    v: z,
                    var,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            slots,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
        })
    }

    /// One update at learning rate `lr`. Parameters without a gradient are treated as
    /// having a zero gradient.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        // detached throughout so the moments never hold on to the autograd graph
        for s in &mut self.slots {
            let theta = s.var.as_tensor();
            let decayed = (theta.detach() * (1.0 - lr * self.weight_decay))?;
            match grads.get(theta) {
                Some(g) => {
                    let g = g.detach();
                    s.m = ((&s.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
                    s.v = ((&s.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
                }
                None => {
                    s.m = (&s.m * self.beta1)?;
                    s.v = (&s.v * self.beta2)?;
                }
            }
            let upd = ((&s.m / c1)? / ((&s.v / c2)?.sqrt()? + self.eps)?)?;
            s.var.set(&(decayed - (upd * lr)?)?)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use crate::params::Init;
    use candle_core::DType;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimizerConfig::default();
        assert!((cosine_lr(0, &cfg).unwrap() - 2e-4).abs() < 1e-18);
        assert!((cosine_lr(cfg.total_steps, &cfg).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(cfg.total_steps / 2, &cfg).unwrap() - 1.005e-4).abs() < 1e-15);
        assert!(cosine_lr(cfg.total_steps + 1, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = OptimizerConfig {
            lr_end: 1.0,
            ..OptimizerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig {
            total_steps: 0,
            ..OptimizerConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(OptimizerConfig::full_scale().crop, 384);
    }

    #[test]
    fn zero_gradient_still_decays() {
        let store = ParamStore::new(0, DType::F64);
        let w = store.root().get("w", &[3], Init::Const(2.0)).unwrap();
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(&store, &cfg).unwrap();
        let grads = (w.zeros_like().unwrap() * 0.0).unwrap().sum_all().unwrap().backward().unwrap();
        let lr = 0.1;
        opt.step(&grads, lr).unwrap();
        let after = store.tensor("w").unwrap().to_vec1::<f64>().unwrap();
        for v in after {
            assert!((v - 2.0 * (1.0 - lr * cfg.weight_decay)).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first update is lr·sign(g) (up to eps)
        let store = ParamStore::new(0, DType::F64);
        let w = store.root().get("w", &[2], Init::Const(1.0)).unwrap();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(&store, &cfg).unwrap();
        let coef = Tensor::new(&[3.0f64, -0.5], w.device()).unwrap();
        let grads = (&w * &coef).unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&grads, 0.01).unwrap();
        let after = store.tensor("w").unwrap().to_vec1::<f64>().unwrap();
        assert!((after[0] - 0.99).abs() < 1e-9);
        assert!((after[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let store = ParamStore::new(0, DType::F64);
        let w = store.root().get("w", &[4], Init::Const(3.0)).unwrap();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(&store, &cfg).unwrap();
        for _ in 0..300 {
            let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&grads, 0.05).unwrap();
        }
        assert!(scalar(&w.sqr().unwrap().sum_all().unwrap()).unwrap() < 1e-2);
        assert_eq!(opt.steps_taken(), 300);
    }

    proptest! {
        #[test]
        fn schedule_non_increasing(total in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
            let cfg = OptimizerConfig { total_steps: total, ..OptimizerConfig::default() };
            let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
            prop_assert!(cosine_lr(lo, &cfg).unwrap() >= cosine_lr(hi, &cfg).unwrap());
        }
    }
}
