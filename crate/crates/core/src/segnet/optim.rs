use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Momentum SGD with a step-decay learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr0: f64,
    /// Multiplier applied every `decay_interval` iterations.
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            decay_factor: 0.9,
            decay_interval: 2500,
            momentum: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0)
            || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0)
            || self.decay_interval < 1
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::InvalidArgument(format!(
                "optimizer config needs lr0 > 0, 0 < decay_factor <= 1, decay_interval >= 1, 0 <= momentum < 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Smoothing coefficient of the teacher update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmaConfig {
    pub lambda: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { lambda: 0.99 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "ema lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `lr0 * decay_factor ^ floor(iter / decay_interval)`.
pub fn lr_at(iter: u64, cfg: &OptimConfig) -> f64 {
    let steps = iter / cfg.decay_interval.max(1);
    cfg.lr0 * cfg.decay_factor.powi(steps.min(i32::MAX as u64) as i32)
}

/// One momentum step: `v <- momentum * v + g`, `theta <- theta - lr * v`.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    velocity: &mut ModelParams<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    params.check_compatible(velocity)?;
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((name, p), (_, v)) in params.iter_mut().zip(velocity.iter_mut()) {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`.
pub fn ema_update<T: Scalar>(
    teacher: &mut ModelParams<T>,
    student: &ModelParams<T>,
    cfg: &EmaConfig,
) -> Result<()> {
    cfg.validate()?;
    teacher.check_compatible(student)?;
    let lam = T::of(cfg.lambda);
    let rest = T::one() - lam;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = lam * *tv + rest * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64) -> ModelParams<f64> {
        ModelParams::from_map(BTreeMap::from([("w".to_string(), Tensor::scalar(v))]))
    }

    #[test]
    fn lr_schedule() {
        let cfg = OptimConfig {
            decay_interval: 100,
            ..OptimConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_eq!(lr_at(99, &cfg), 0.01);
        assert!((lr_at(100, &cfg) - 0.009).abs() < 1e-15);
        assert!((lr_at(250, &cfg) - 0.01 * 0.81).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_arithmetic() {
        let mut p = one(1.0);
        let mut v = one(0.0);
        sgd_step(&mut p, &one(0.5), &mut v, 0.1, 0.0).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = one(1.25);
        let mut v = one(0.0);
        sgd_step(&mut p, &one(0.0), &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, one(1.25));
    }

    #[test]
    fn momentum_matches_recurrence() {
        let (mut theta, mut vel) = (2.0f64, 0.0f64);
        let gs = [0.3, -0.7];
        let mut p = one(theta);
        let mut v = one(0.0);
        for g in gs {
            vel = 0.9 * vel + g;
            theta -= 0.05 * vel;
            sgd_step(&mut p, &one(g), &mut v, 0.05, 0.9).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], theta);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut p = one(1.0);
        let mut v = one(0.0);
        let g = ModelParams::from_map(BTreeMap::from([("u".to_string(), Tensor::scalar(0.0))]));
        assert!(matches!(
            sgd_step(&mut p, &g, &mut v, 0.1, 0.9),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn ema_endpoints_and_value() {
        let mut t = one(1.0);
        ema_update(&mut t, &one(0.0), &EmaConfig { lambda: 0.99 }).unwrap();
        assert!((t.get("w").unwrap().data()[0] - 0.99).abs() < 1e-15);
        let mut t = one(1.0);
        ema_update(&mut t, &one(-3.0), &EmaConfig { lambda: 0.0 }).unwrap();
        assert_eq!(t, one(-3.0));
        let mut t = one(1.0);
        ema_update(&mut t, &one(-3.0), &EmaConfig { lambda: 1.0 }).unwrap();
        assert_eq!(t, one(1.0));
    }

    #[test]
    fn ema_shape_mismatch_rejected() {
        let mut t = one(1.0);
        let s = ModelParams::from_map(BTreeMap::from([(
            "w".to_string(),
            Tensor::zeros(&[2]),
        )]));
        assert!(ema_update(&mut t, &s, &EmaConfig::default()).is_err());
    }
}
