use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked for NaN/Inf
/// before any parameter is touched, so a failed step leaves `params` and
/// `state` unchanged.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::mismatch("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            let bad = g.data().iter().filter(|x| !x.is_finite()).count();
            return Err(Error::NonFinite(format!(
                "gradient of {name} ({bad} of {} entries) at step {}",
                g.numel(),
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else {
            continue;
        };
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gv = gv.as_f64();
            let m_new = beta1 * mv.as_f64() + (1.0 - beta1) * gv;
            let v_new = beta2 * vv.as_f64() + (1.0 - beta2) * gv * gv;
            *mv = T::lit(m_new);
            *vv = T::lit(v_new);
            let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
            *pv = T::lit(pv.as_f64() - update);
        }
    }
    Ok(())
}
