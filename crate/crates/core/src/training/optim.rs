use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::Parameters;
use crate::tensor::Scalar;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr0: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            lr0: 3e-4,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamWState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Linearly decaying learning rate `lr0 * (1 - t / T)`.
pub fn linear_lr(step: usize, total: usize, lr0: f64) -> Result<f64, TrainError> {
    if step > total || total == 0 {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    Ok(lr0 * (1.0 - step as f64 / total as f64))
}

/// One bias-corrected AdamW update at 1-based step `t`. Weight decay is
/// decoupled and applied to matrices only (not gains or biases).
///
/// Gradients are checked for finiteness before any parameter moves.
pub fn adamw_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &[Vec<T>],
    state: &mut AdamWState<T>,
    hyper: &AdamWHyper,
    lr: f64,
    t: usize,
) -> Result<(), TrainError> {
    if t == 0 {
        return Err(TrainError::StepOutOfRange { step: 0, total: 0 });
    }
    let names = params.names();
    for (name, g) in names.iter().zip(grads) {
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                tensor: name.clone(),
                index: pos,
                step: t,
            });
        }
    }
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let decays = p.rank() >= 2;
        adamw_update(p.data_mut(), g, m, v, hyper, lr, t, decays);
    }
    Ok(())
}

/// AdamW update of a single flat buffer with its moment buffers.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    weights: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    hyper: &AdamWHyper,
    lr: f64,
    t: usize,
    decays: bool,
) {
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (ob1, ob2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
    let step_size = T::from_f64_lossy(lr / bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
    let eps = T::from_f64_lossy(hyper.eps);
    let decay = T::from_f64_lossy(lr * hyper.weight_decay);
    let decays = decays && hyper.weight_decay != 0.0;
    for (((w, &g), m), v) in weights.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1t * *m + ob1 * g;
        *v = b2t * *v + ob2 * g * g;
        if decays {
            *w -= decay * *w;
        }
        *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
    }
}
