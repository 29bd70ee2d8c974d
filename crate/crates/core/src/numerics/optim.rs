use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub base_lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub total_iters: usize,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_poly_power() -> f64 {
    0.8
}

impl SgdConfig {
    pub fn new(base_lr: f64, total_iters: usize) -> Self {
        SgdConfig {
            base_lr,
            weight_decay: 0.0,
            momentum: default_momentum(),
            total_iters,
            poly_power: default_poly_power(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.total_iters == 0 {
            return bad("total_iters", "must be positive");
        }
        if !(self.poly_power > 0.0) {
            return bad("poly_power", "must be positive");
        }
        Ok(())
    }

    /// Polynomial decay: `base_lr * (1 - iter/total_iters)^poly_power`.
    /// Defined on `[0, total_iters]`; zero at the end point.
    pub fn lr(&self, iter: usize) -> Result<f64> {
        if iter > self.total_iters {
            return Err(Error::IterOutOfRange {
                iter,
                total: self.total_iters,
            });
        }
        let frac = 1.0 - iter as f64 / self.total_iters as f64;
        Ok(self.base_lr * frac.powf(self.poly_power))
    }
}

/// Momentum SGD with coupled weight decay (`g + wd * p`), non-Nesterov.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    config: SgdConfig,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn velocity(&self) -> &[Vec<S>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<S>>) {
        self.velocity = velocity;
    }

    /// Applies one update in place and returns the learning rate used.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], iter: usize) -> Result<f64> {
        if iter >= self.config.total_iters {
            return Err(Error::IterOutOfRange {
                iter,
                total: self.config.total_iters,
            });
        }
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            p.same_shape(g, "sgd_step")?;
        }
        let lr = self.config.lr(iter)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
        }
        let (lr_s, wd, mu) = (S::of(lr), S::of(self.config.weight_decay), S::of(self.config.momentum));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gv + wd * *pv;
                *vv = mu * *vv + d;
                *pv = *pv - lr_s * *vv;
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_end_points() {
        let c = SgdConfig::new(1e-3, 100);
        assert_eq!(c.lr(0).unwrap(), 1e-3);
        assert_eq!(c.lr(100).unwrap(), 0.0);
        assert!(c.lr(101).is_err());
    }

    #[test]
    fn schedule_midpoint() {
        let c = SgdConfig::new(1.0, 10);
        assert_eq!(c.lr(5).unwrap(), 0.5f64.powf(0.8));
    }

    #[test]
    fn vanilla_step() {
        let mut c = SgdConfig::new(0.1, 10);
        c.momentum = 0.0;
        let mut sgd = Sgd::<f64>::new(c).unwrap();
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(&[3], vec![0.5, 1.0, -4.0]).unwrap();
        let lr = sgd.step(&mut [&mut p], &[g.clone()], 0).unwrap();
        assert_eq!(lr, 0.1);
        let expected: Vec<f64> = [1.0, -2.0, 0.5]
            .iter()
            .zip(g.data())
            .map(|(a, b)| a - 0.1 * b)
            .collect();
        assert_eq!(p.data(), &expected[..]);
    }

    #[test]
    fn momentum_and_decay() {
        let mut c = SgdConfig::new(1.0, 4);
        c.momentum = 0.5;
        c.weight_decay = 0.1;
        c.poly_power = 1.0;
        let mut sgd = Sgd::<f64>::new(c).unwrap();
        let mut p = Tensor::new(&[1], vec![2.0]).unwrap();
        let g = Tensor::new(&[1], vec![1.0]).unwrap();
        sgd.step(&mut [&mut p], &[g.clone()], 0).unwrap();
        // v = 1 + 0.2 = 1.2; p = 2 - 1.2
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        sgd.step(&mut [&mut p], &[g], 1).unwrap();
        // v = 0.6 + 1.08 = 1.68; lr = 0.75
        assert!((p.data()[0] - (0.8 - 0.75 * 1.68)).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_iteration_is_rejected() {
        let mut sgd = Sgd::<f32>::new(SgdConfig::new(0.1, 3)).unwrap();
        let mut p = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::<f32>::zeros(&[2]);
        assert!(matches!(
            sgd.step(&mut [&mut p], &[g], 3),
            Err(Error::IterOutOfRange { iter: 3, total: 3 })
        ));
    }

    #[test]
    fn invalid_config() {
        let mut c = SgdConfig::new(0.1, 3);
        c.momentum = 1.0;
        assert!(Sgd::<f64>::new(c).is_err());
        assert!(Sgd::<f64>::new(SgdConfig::new(0.0, 3)).is_err());
    }
}
