//! Adam optimizer with bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyperParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyperParams {
    fn default() -> Self {
        AdamHyperParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Parameter<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &[&Parameter<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every parameter, reading each parameter's
/// accumulated gradient. Deterministic given identical inputs.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Parameter<T>],
    state: &mut AdamState<T>,
    hp: &AdamHyperParams,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "optimizer state holds {} moments but {} parameters given",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.value.shape() != m.shape() {
            return Err(Error::Dimension(format!(
                "optimizer moment shape {:?} does not match parameter {} {:?}",
                m.shape(),
                p.name,
                p.value.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let beta1 = T::from_f64(hp.beta1);
    let beta2 = T::from_f64(hp.beta2);
    let one_m_b1 = T::from_f64(1.0 - hp.beta1);
    let one_m_b2 = T::from_f64(1.0 - hp.beta2);
    let corr1 = T::from_f64(1.0 - hp.beta1.powf(t));
    let corr2 = T::from_f64(1.0 - hp.beta2.powf(t));
    let lr = T::from_f64(hp.lr);
    let eps = T::from_f64(hp.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            m[j] = beta1 * m[j] + one_m_b1 * g[j];
            v[j] = beta2 * v[j] + one_m_b2 * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            w[j] = w[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
