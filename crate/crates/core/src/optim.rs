//! SGD with momentum and L2 weight decay.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::Invalid(format!("sgd: lr {learning_rate}, momentum {momentum}, weight decay {weight_decay}")));
        }
        Ok(Sgd { learning_rate, momentum, weight_decay, velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`, then
    /// clears each parameter's gradient.
    ///
    /// Velocity buffers are created lazily and bound to parameter position,
    /// so the same parameter order must be passed on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(i));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return shape_err("sgd_step", format!("{} velocity buffers for {} params", self.velocity.len(), params.len()));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if v.len() != p.len() {
                return shape_err("sgd_step", "velocity/parameter size");
            }
            let g = p.grad.take().expect("checked above");
            let (mu, wd, lr) = (self.momentum, self.weight_decay, self.learning_rate);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vv = mu * *vv + (gv + wd * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).with_grad();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = param(1.5, 0.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.item(), 1.5);
        assert!(p.grad.is_none());
    }

    #[test]
    fn vanilla_step() {
        let mut p = param(1.0, 2.0);
        Sgd::new(0.1, 0.0, 0.0).unwrap().step(&mut [&mut p]).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_match_scalar_recurrence() {
        // Hand-unrolled: p0 = 1, g1 = 0.5, g2 = -0.25, lr = 0.1, mu = 0.9, wd = 0.01
        // v1 = 0.5 + 0.01*1 = 0.51;            p1 = 1 - 0.051 = 0.949
        // v2 = 0.9*0.51 + (-0.25 + 0.00949) = 0.21849; p2 = 0.949 - 0.021849 = 0.927151
        let mut p = param(1.0, 0.5);
        let mut opt = Sgd::new(0.1, 0.9, 0.01).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.item() - 0.949).abs() < 1e-14);
        p.grad = Some(vec![-0.25]);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.item() - 0.927151).abs() < 1e-14);
        assert!((opt.velocity()[0][0] - 0.21849).abs() < 1e-14);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::scalar(1.0);
        let err = Sgd::new(0.1, 0.9, 0.0).unwrap().step(&mut [&mut p]).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(0)));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.9, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 0.5, -1.0).is_err());
    }
}
