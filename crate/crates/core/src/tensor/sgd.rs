//! SGD with momentum and decoupled-from-nothing weight decay: the decay term
//! joins the gradient before the momentum update, PyTorch style.

use super::{Scalar, Tensor, TensorError};

pub struct SgdOptimizer<E> {
    learning_rate: E,
    momentum: E,
    weight_decay: E,
    velocity: Vec<Vec<E>>,
}

impl<E: Scalar> SgdOptimizer<E> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate: E::from_f64(learning_rate),
            momentum: E::from_f64(momentum),
            weight_decay: E::from_f64(weight_decay),
            velocity: Vec::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = E::from_f64(lr);
    }

    /// Applies `v <- m*v + (g + wd*p); p <- p - lr*v` to every parameter.
    ///
    /// `entries` must yield the same parameters in the same order on every
    /// call; a missing gradient is an error.
    pub fn step<'a>(
        &mut self,
        entries: impl Iterator<Item = (&'a str, &'a mut Tensor<E>, Option<&'a [E]>)>,
    ) -> Result<(), TensorError> {
        let mut idx = 0;
        for (name, param, grad) in entries {
            let grad = grad.ok_or_else(|| TensorError::MissingGrad {
                name: name.to_string(),
            })?;
            if self.velocity.len() == idx {
                self.velocity.push(vec![E::zero(); param.numel()]);
            }
            let vel = &mut self.velocity[idx];
            assert_eq!(
                vel.len(),
                param.numel(),
                "parameter {name} changed size between steps"
            );
            let (lr, m, wd) = (self.learning_rate, self.momentum, self.weight_decay);
            for ((p, v), &g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = m * *v + (g + wd * *p);
                *p = *p - lr * *v;
            }
            idx += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> Tensor<f64> {
        Tensor::scalar(value)
    }

    #[test]
    fn plain_gradient_step() {
        let mut opt = SgdOptimizer::<f64>::new(0.1, 0.0, 0.0);
        let mut p = one_param(1.0);
        let g = [0.5];
        opt.step([("p", &mut p, Some(&g[..]))].into_iter()).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_momentum() {
        let mut opt = SgdOptimizer::<f64>::new(0.1, 0.5, 0.0);
        let mut p = one_param(2.0);
        opt.step([("p", &mut p, Some(&[1.0][..]))].into_iter())
            .unwrap();
        let after_first = p.data()[0];
        // v = 1, p = 2 - 0.1
        assert!((after_first - 1.9).abs() < 1e-12);
        opt.step([("p", &mut p, Some(&[0.0][..]))].into_iter())
            .unwrap();
        // v = 0.5, p = 1.9 - 0.05
        assert!((p.data()[0] - 1.85).abs() < 1e-12);
    }

    #[test]
    fn momentum_two_steps() {
        // lr=0.1, m=0.9, g=1 twice from p=0: p=-0.1 then v=1.9, p=-0.29
        let mut opt = SgdOptimizer::<f64>::new(0.1, 0.9, 0.0);
        let mut p = one_param(0.0);
        opt.step([("p", &mut p, Some(&[1.0][..]))].into_iter())
            .unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-12);
        opt.step([("p", &mut p, Some(&[1.0][..]))].into_iter())
            .unwrap();
        assert!((p.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_joins_gradient() {
        let mut opt = SgdOptimizer::<f64>::new(0.1, 0.0, 0.01);
        let mut p = one_param(10.0);
        opt.step([("p", &mut p, Some(&[0.0][..]))].into_iter())
            .unwrap();
        // v = 0 + (0 + 0.01*10) = 0.1; p = 10 - 0.01
        assert!((p.data()[0] - 9.99).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut opt = SgdOptimizer::<f64>::new(0.1, 0.9, 0.0);
        let mut p = one_param(0.0);
        let err = opt
            .step([("weights", &mut p, None)].into_iter())
            .unwrap_err();
        assert!(err.to_string().contains("weights"));
    }
}
