//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F: Scalar> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    /// Steps taken so far.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Base learning rate.
    pub lr: f64,
    /// Learning-rate decay per epoch.
    pub gamma: f64,
}

impl<F: Scalar> OptimizerState<F> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ModelParams<F>, lr: f64, gamma: f64) -> Self {
        let zeros: Vec<Tensor<F>> = params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            lr,
            gamma,
        }
    }

    /// Learning rate of epoch `epoch` (0-based): `lr * gamma^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        decay_lr(self.lr, self.gamma, epoch)
    }
}

/// `lr0 * gamma^epoch`.
pub fn decay_lr(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

/// One Adam update of every parameter with step size `lr`. `grads` is
/// indexed like the parameters.
pub fn adam_step<F: Scalar>(params: &mut ModelParams<F>, grads: &[Tensor<F>], state: &mut OptimizerState<F>, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::usage(format!(
            "{} gradients and {} moment tensors for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.tensor.shape() != g.shape() || p.tensor.shape() != m.shape() {
            return Err(Error::shape("adam", p.tensor.shape(), g.shape()));
        }
    }
    state.t += 1;
    let (b1, b2) = (F::lit(state.beta1), F::lit(state.beta2));
    let (one, eps) = (F::one(), F::lit(state.eps));
    let c1 = F::lit(1.0 - state.beta1.powi(state.t as i32));
    let c2 = F::lit(1.0 - state.beta2.powi(state.t as i32));
    let lr = F::lit(lr);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let theta = p.tensor.data_mut();
        for (((th, &gi), mi), vi) in theta.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *th = *th - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
