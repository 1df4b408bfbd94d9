use serde::{Deserialize, Serialize};

use super::{Float, Result, Tensor, TensorError};

/// Adam hyperparameters. Defaults follow Kingma & Ba, with `lr = 1e-4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub config: AdamConfig,
}

impl<F: Float> AdamState<F> {
    pub fn new(params: &[Tensor<F>], config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            config,
        }
    }
}

/// One bias-corrected Adam update. Validates every gradient before touching any parameter.
pub fn adam_step<F: Float>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::Shape {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TensorError::Shape {
                op: "adam_step",
                detail: format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        g.ensure_finite("adam_step gradient")?;
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
    let (one_b1, one_b2) = (F::c(1.0 - c.beta1), F::c(1.0 - c.beta2));
    let step_size = F::c(c.lr / bc1);
    let inv_sqrt_bc2 = F::c(1.0 / bc2.sqrt());
    let eps = F::c(c.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = b1 * md[j] + one_b1 * gj;
            vd[j] = b2 * vd[j] + one_b2 * gj * gj;
            pd[j] -= step_size * md[j] / (vd[j].sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}
