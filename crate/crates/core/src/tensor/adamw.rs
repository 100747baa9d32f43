//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators, one pair per parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl<T: Element> AdamWState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, config: AdamWConfig) -> Self {
        let first_moment: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            second_moment: first_moment.clone(),
            first_moment,
            step: 0,
            config,
        }
    }
}

/// One bias-corrected AdamW update at learning rate `lr`.
///
/// The decay term `lr · weight_decay · w` is applied to the parameter directly
/// rather than being added to the gradient.
pub fn adamw_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamWState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(TensorError::Arity {
            op: "adamw",
            expected: state.first_moment.len(),
            actual: params.len().min(grads.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw",
                expected: format!("{:?}", p.shape()),
                actual: format!("{:?}", g.shape()),
            });
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let c = T::from_f64_lossy;
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let (one_b1, one_b2) = (c(1.0 - cfg.beta1), c(1.0 - cfg.beta2));
    let (bc1, bc2, eps) = (c(bc1), c(bc2), c(cfg.eps));
    let lr_t = c(lr);
    let decay = c(lr * cfg.weight_decay);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = *w - decay * *w - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
