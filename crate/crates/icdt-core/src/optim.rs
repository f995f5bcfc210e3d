//! AdamW with decoupled weight decay and the exponential-moving-average
//! shadow used for evaluation weights.

use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::tensor::{Scalar, Tensor};

/// Optimizer hyperparameters. Defaults: lr 1e-4, betas (0.9, 0.999),
/// eps 1e-8, no weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        AdamW {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment accumulators, index-aligned with the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<E> {
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub step: u64,
}

impl<E: Scalar> AdamState<E> {
    pub fn new(params: &Parameters<E>) -> Self {
        let zeros = |p: &Parameters<E>| {
            p.iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update. `grads` must be name-aligned with
/// `params`, one entry per parameter in order.
pub fn adamw_step<E: Scalar>(
    opt: &AdamW,
    state: &mut AdamState<E>,
    params: &mut Parameters<E>,
    grads: &[(String, Tensor<E>)],
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::State(format!(
            "gradient count {} does not match parameter count {}",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - opt.beta1.powf(t);
    let bc2 = 1.0 - opt.beta2.powf(t);
    let (b1, b2) = (E::from_f64(opt.beta1), E::from_f64(opt.beta2));
    let one = E::one();
    let lr = E::from_f64(opt.lr);
    let eps = E::from_f64(opt.eps);
    let wd = E::from_f64(opt.weight_decay);
    let inv_bc1 = E::from_f64(1.0 / bc1);
    let inv_bc2 = E::from_f64(1.0 / bc2);

    for i in 0..params.len() {
        let (gname, gtensor) = &grads[i];
        if gname != params.name(i) {
            return Err(Error::State(format!(
                "gradient {i} named '{gname}' does not match parameter '{}'",
                params.name(i)
            )));
        }
        if gtensor.shape() != params.tensor(i).shape() {
            return Err(Error::shape(
                "adamw_step",
                gtensor.shape(),
                params.tensor(i).shape(),
            ));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.tensor_mut(i).data_mut();
        for j in 0..p.len() {
            let g = gtensor.data()[j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] * inv_bc1;
            let v_hat = v[j] * inv_bc2;
            p[j] = p[j] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[j]);
        }
    }
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * param`, every parameter.
pub fn ema_update<E: Scalar>(
    ema: &mut Parameters<E>,
    params: &Parameters<E>,
    decay: f64,
) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::State(format!(
            "EMA holds {} tensors, parameters hold {}",
            ema.len(),
            params.len()
        )));
    }
    let d = E::from_f64(decay);
    let one_minus = E::from_f64(1.0 - decay);
    for i in 0..params.len() {
        if ema.tensor(i).shape() != params.tensor(i).shape() {
            return Err(Error::shape(
                "ema_update",
                ema.tensor(i).shape(),
                params.tensor(i).shape(),
            ));
        }
        let e = ema.tensor_mut(i).data_mut();
        for (ej, &pj) in e.iter_mut().zip(params.tensor(i).data()) {
            *ej = d * *ej + one_minus * pj;
        }
    }
    Ok(())
}
