use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Moment accumulators for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// All gradients are validated before any parameter is touched, so a
/// non-finite gradient leaves both the parameters and the state unchanged.
pub fn adam_step(
    params: &mut [(&str, &mut Tensor)],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::contract(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() || p.dims() != state.first[i].dims() {
            return Err(Error::shape(format!(
                "adam: parameter {name} has dims {:?}, grad {:?}, state {:?}",
                p.dims(),
                g.dims(),
                state.first[i].dims()
            )));
        }
        if let Some(v) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "adam: non-finite gradient {v} for parameter {name}"
            )));
        }
    }
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gd = gv + weight_decay * *pv;
            m[j] = beta1 * m[j] + (1.0 - beta1) * gd;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gd * gd;
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
