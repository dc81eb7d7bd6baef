//! Learnable parameters and SGD with momentum.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity used to bind a parameter into a graph once per pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

#[derive(Debug, Clone)]
pub struct Parameter<S> {
    id: ParamId,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub velocity: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self { id: ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed)), value, grad, velocity }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn cast<T: Scalar>(&self) -> Parameter<T> {
        Parameter { id: self.id, value: self.value.cast(), grad: self.grad.cast(), velocity: self.velocity.cast() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 5e-4 }
    }
}

impl Sgd {
    /// `v <- momentum*v + (grad + wd*value)`, `value <- value - lr*v`, then
    /// clears the gradient.
    pub fn step<S: Scalar>(&self, params: &mut [&mut Parameter<S>]) {
        let (lr, mu, wd) = (S::of(self.lr), S::of(self.momentum), S::of(self.weight_decay));
        for p in params.iter_mut() {
            let Parameter { value, grad, velocity, .. } = &mut **p;
            for ((w, g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
                *v = mu * *v + (*g + wd * *w);
                *w -= lr * *v;
            }
            grad.fill(S::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f64], grads: &[f64]) -> Parameter<f64> {
        let mut p = Parameter::new(Tensor::from_f64(&[vals.len()], vals).unwrap());
        p.grad = Tensor::from_f64(&[grads.len()], grads).unwrap();
        p
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = param(&[1.0, -2.0], &[0.5, 0.25]);
        Sgd { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }.step(&mut [&mut p]);
        assert_eq!(p.value.data(), &[1.0 - 0.05, -2.0 - 0.025]);
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn decay_only_step() {
        let mut p = param(&[3.0], &[0.0]);
        Sgd { lr: 0.1, momentum: 0.0, weight_decay: 0.01 }.step(&mut [&mut p]);
        assert!((p.value.data()[0] - 3.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_accumulate() {
        // v1 = g, v2 = 0.9 g + g: total displacement lr*g*(1 + 1.9).
        let (lr, g) = (0.1, 0.5);
        let mut p = param(&[0.0], &[g]);
        let opt = Sgd { lr, momentum: 0.9, weight_decay: 0.0 };
        opt.step(&mut [&mut p]);
        p.grad = Tensor::from_f64(&[1], &[g]).unwrap();
        opt.step(&mut [&mut p]);
        assert!((p.value.data()[0] + lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn fresh_parameter_has_zero_grad() {
        let p = Parameter::<f32>::new(Tensor::ones(&[2, 3]));
        assert_eq!(p.grad.shape(), p.value.shape());
        assert_eq!(p.velocity.shape(), p.value.shape());
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }
}
