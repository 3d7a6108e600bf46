use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimHyper {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub gamma: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            gamma: 0.98,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.gamma > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and gamma > 0".into()));
        }
        Ok(())
    }
}

/// `lr0 * gamma^epoch`.
pub fn lr_at(hyper: &OptimHyper, epoch: usize) -> f64 {
    hyper.lr0 * hyper.gamma.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub velocity: Vec<f64>,
    pub hyper: OptimHyper,
    pub step: u64,
    /// Epoch whose learning rate the next step uses.
    pub epoch: usize,
}

impl OptimState {
    pub fn new(param_count: usize, hyper: OptimHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            velocity: vec![0.0; param_count],
            hyper,
            step: 0,
            epoch: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_at(&self.hyper, self.epoch)
    }
}

/// Momentum SGD with L2 decay folded into the gradient:
/// `v <- mu*v + g + wd*theta`, `theta <- theta - lr*v`.
pub fn sgd_step(state: &mut OptimState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Shape(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::non_finite("gradient"));
    }
    let lr = state.lr();
    let OptimHyper {
        momentum: mu,
        weight_decay: wd,
        ..
    } = state.hyper;
    for ((theta, v), g) in params.iter_mut().zip(&mut state.velocity).zip(grads) {
        *v = mu * *v + g + wd * *theta;
        *theta -= lr * *v;
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(momentum: f64, weight_decay: f64) -> OptimHyper {
        OptimHyper {
            lr0: 0.01,
            momentum,
            weight_decay,
            gamma: 0.98,
        }
    }

    #[test]
    fn one_step_arithmetic() {
        let mut st = OptimState::new(1, hyper(0.9, 0.0)).unwrap();
        let mut theta = [1.0];
        sgd_step(&mut st, &mut theta, &[1.0]).unwrap();
        assert_eq!(st.velocity, vec![1.0]);
        assert_eq!(theta, [0.99]);
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let mut st = OptimState::new(3, hyper(0.9, 0.0)).unwrap();
        let mut theta = [0.3, -2.0, 5.0];
        sgd_step(&mut st, &mut theta, &[0.0; 3]).unwrap();
        assert_eq!(theta, [0.3, -2.0, 5.0]);
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut st = OptimState::new(2, hyper(0.0, 0.0)).unwrap();
        let mut theta = [1.0, -1.0];
        sgd_step(&mut st, &mut theta, &[0.5, 2.0]).unwrap();
        sgd_step(&mut st, &mut theta, &[-1.0, 1.0]).unwrap();
        let expected = [1.0 - 0.01 * 0.5 + 0.01, -1.0 - 0.01 * 2.0 - 0.01];
        for (a, b) in theta.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_schedule() {
        let h = hyper(0.9, 1e-4);
        assert_eq!(lr_at(&h, 0), 0.01);
        assert!((lr_at(&h, 1) - 0.0098).abs() < 1e-15);
        for e in 0..50 {
            assert!(lr_at(&h, e + 1) <= lr_at(&h, e));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut st = OptimState::new(1, hyper(0.9, 0.0)).unwrap();
        let mut theta = [1.0];
        assert!(matches!(
            sgd_step(&mut st, &mut theta, &[f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(sgd_step(&mut st, &mut theta, &[1.0, 2.0]).is_err());
        assert!(OptimState::new(1, hyper(1.0, 0.0)).is_err());
    }
}
