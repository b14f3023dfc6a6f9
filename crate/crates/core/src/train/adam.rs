//! Adaptive-moment gradient descent with β = (0.9, 0.999), ε = 1e-8 and no
//! schedule. Moment state is keyed by qualified parameter name so one
//! optimizer instance can drive several jointly trained models.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::NetworkModel;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and > 0, got {lr}"
            )));
        }
        Ok(Adam { lr, step: 0, moments: BTreeMap::new() })
    }

    /// Advances the shared step counter. Call once per optimization step,
    /// before applying that step's gradients to each model.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one step's gradients (as returned by
    /// [`NetworkModel::param_grads`]) to `model`'s parameters.
    pub fn apply(&mut self, model: &mut NetworkModel, grads: &[(String, Tensor)]) -> Result<()> {
        if self.step == 0 {
            return Err(Error::invalid("begin_step must run before apply"));
        }
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (name, g) in grads {
            let key = model.qualified(name);
            let param = model
                .param_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter '{key}'")))?;
            if param.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for '{key}' has shape {:?}, parameter is {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(key)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for ((pv, gv), (mv, vv)) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetBuilder;

    fn tiny_model(seed: u64) -> NetworkModel {
        NetBuilder::new("m", 2).affine(2).build(seed).unwrap()
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(-1.0).is_err());
        assert!(Adam::new(f64::NAN).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut m = tiny_model(1);
        let before = m.param("l0.w").unwrap().clone();
        let mut opt = Adam::new(1e-2).unwrap();
        let grads = vec![
            ("l0.w".to_string(), Tensor::zeros(&[2, 2])),
            ("l0.b".to_string(), Tensor::zeros(&[2])),
        ];
        for _ in 0..5 {
            opt.begin_step();
            opt.apply(&mut m, &grads).unwrap();
        }
        assert_eq!(m.param("l0.w").unwrap().data(), before.data());
    }

    #[test]
    fn first_step_moves_by_lr_under_bias_correction() {
        // with bias correction, step one moves each coordinate by exactly
        // lr·g/(|g| + ε·√bc2/…) ≈ lr·sign(g)
        let mut m = tiny_model(2);
        let before = m.param("l0.b").unwrap().clone();
        let mut opt = Adam::new(1e-3).unwrap();
        opt.begin_step();
        let g = Tensor::from_slice(&[0.5, -2.0]);
        opt.apply(&mut m, &[("l0.b".to_string(), g)]).unwrap();
        let after = m.param("l0.b").unwrap();
        for i in 0..2 {
            let delta = after.data()[i] - before.data()[i];
            let sign = if i == 0 { -1.0 } else { 1.0 };
            assert!((delta - sign * 1e-3).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn descends_a_quadratic() {
        // minimise ‖p‖² by feeding grad = 2p
        let mut m = tiny_model(3);
        let mut opt = Adam::new(5e-2).unwrap();
        let start: f64 = m.param("l0.w").unwrap().sq_norm();
        for _ in 0..200 {
            let g = m.param("l0.w").unwrap().scale(2.0);
            opt.begin_step();
            opt.apply(&mut m, &[("l0.w".to_string(), g)]).unwrap();
        }
        let end = m.param("l0.w").unwrap().sq_norm();
        assert!(end < 1e-4 * start.max(1e-6), "start {start}, end {end}");
    }

    #[test]
    fn apply_requires_begin_step_and_matching_shapes() {
        let mut m = tiny_model(4);
        let mut opt = Adam::new(1e-3).unwrap();
        let g = vec![("l0.b".to_string(), Tensor::zeros(&[2]))];
        assert!(opt.apply(&mut m, &g).is_err());
        opt.begin_step();
        let bad = vec![("l0.b".to_string(), Tensor::zeros(&[3]))];
        assert!(opt.apply(&mut m, &bad).is_err());
        let unknown = vec![("nope".to_string(), Tensor::zeros(&[2]))];
        assert!(opt.apply(&mut m, &unknown).is_err());
    }
}
