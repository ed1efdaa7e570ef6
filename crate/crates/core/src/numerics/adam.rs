//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{DualValue, NumericsError, Real, Tensor};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for an ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[DualValue<T>]) -> Result<Self, NumericsError> {
        if !(config.lr >= 0.0)
            || !(0.0..1.0).contains(&config.beta1)
            || !(0.0..1.0).contains(&config.beta2)
            || !(config.eps > 0.0)
        {
            return Err(NumericsError::Validation(format!(
                "invalid Adam hyperparameters {config:?}"
            )));
        }
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Ok(Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            config,
        })
    }
}

/// Applies one Adam update using each parameter's accumulated gradient.
///
/// The whole update is rejected, leaving every parameter and the state
/// untouched, if any gradient holds a non-finite value.
pub fn adam_step<T: Real>(
    params: &mut [DualValue<T>],
    state: &mut AdamState<T>,
) -> Result<(), NumericsError> {
    if params.len() != state.m.len() {
        return Err(NumericsError::Dimension(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.grad.shape() != m.shape() || p.value.shape() != m.shape() {
            return Err(NumericsError::Dimension(format!(
                "parameter `{}` has shape {:?} but optimizer moments are {:?}",
                p.name,
                p.value.shape(),
                m.shape()
            )));
        }
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(NumericsError::NonFinite {
                name: p.name.clone(),
                detail: format!("gradient[{i}] = {}", p.grad.data()[i]),
            });
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for (((w, &g), mi), vi) in values
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
