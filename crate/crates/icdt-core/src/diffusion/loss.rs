//! Training objectives: the noise-prediction MSE, the per-step variational
//! bound terms, and the hybrid combination that trains the variance head.
//!
//! Inside the VLB the reverse mean is built from a *detached* noise
//! prediction, so the bound only trains the variance interpolation while the
//! MSE owns the mean path.

use super::{mu_from_eps, posterior_mean_variance, sigma_from_v, NoiseSchedule};
use crate::error::Result;
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

pub const DEFAULT_VLB_WEIGHT: f64 = 0.001;

const LOG_2PI: f64 = 1.8378770664093453; // ln(2*pi)

/// Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)).
pub fn gaussian_kl<E: Scalar>(
    g: &mut Graph<E>,
    mean1: NodeId,
    logvar1: NodeId,
    mean2: NodeId,
    logvar2: NodeId,
) -> Result<NodeId> {
    let dlv = g.sub(logvar2, logvar1)?;
    let neg_dlv = g.mul_scalar(dlv, -1.0);
    let ratio = g.exp(neg_dlv); // exp(logvar1 - logvar2)
    let dm = g.sub(mean1, mean2)?;
    let dm2 = g.mul(dm, dm)?;
    let neg_lv2 = g.mul_scalar(logvar2, -1.0);
    let inv_var2 = g.exp(neg_lv2);
    let mahalanobis = g.mul(dm2, inv_var2)?;
    let t1 = g.add_scalar(dlv, -1.0);
    let t2 = g.add(t1, ratio)?;
    let t3 = g.add(t2, mahalanobis)?;
    Ok(g.mul_scalar(t3, 0.5))
}

/// Elementwise negative log-density of `x` under N(mean, e^logvar).
fn gaussian_nll<E: Scalar>(
    g: &mut Graph<E>,
    x: NodeId,
    mean: NodeId,
    logvar: NodeId,
) -> Result<NodeId> {
    let dm = g.sub(x, mean)?;
    let dm2 = g.mul(dm, dm)?;
    let neg_lv = g.mul_scalar(logvar, -1.0);
    let inv_var = g.exp(neg_lv);
    let quad = g.mul(dm2, inv_var)?;
    let t1 = g.add_scalar(logvar, LOG_2PI);
    let t2 = g.add(t1, quad)?;
    Ok(g.mul_scalar(t2, 0.5))
}

/// Mean squared error between drawn and predicted noise.
pub fn l_simple<E: Scalar>(g: &mut Graph<E>, eps_true: NodeId, eps_pred: NodeId) -> Result<NodeId> {
    g.mse(eps_pred, eps_true)
}

/// One variational-bound term in nats, averaged over elements.
///
/// For t > 1 this is the KL between the forward-process posterior and the
/// model's reverse kernel; at t = 1 it is the negative Gaussian log-density
/// of x_0 under the reverse kernel (the chain runs in latent space, so the
/// continuous density is used rather than a discretized likelihood).
pub fn vlb_term<E: Scalar>(
    g: &mut Graph<E>,
    eps_pred: NodeId,
    v: NodeId,
    x0: NodeId,
    xt: NodeId,
    t: usize,
    s: &NoiseSchedule,
) -> Result<NodeId> {
    s.check_t(t)?;
    let eps_frozen = g.detach(eps_pred);
    let mu_theta = mu_from_eps(g, xt, t, eps_frozen, s)?;
    let logvar_theta = sigma_from_v(g, v, t, s)?;
    let per_element = if t > 1 {
        let q = posterior_mean_variance(g, x0, xt, t, s)?;
        let shape = g.value(x0).shape().to_vec();
        let logvar_q = g.constant(Tensor::full(shape, E::from_f64(q.log_variance_clipped)));
        gaussian_kl(g, q.mean, logvar_q, mu_theta, logvar_theta)?
    } else {
        gaussian_nll(g, x0, mu_theta, logvar_theta)?
    };
    Ok(g.mean_all(per_element))
}

/// The pieces of the hybrid objective; `total = simple + weight * vlb`.
pub struct HybridLoss {
    pub total: NodeId,
    pub simple: NodeId,
    pub vlb: NodeId,
}

/// Hybrid objective combining the noise MSE with a weighted bound term.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss<E: Scalar>(
    g: &mut Graph<E>,
    eps_true: NodeId,
    eps_pred: NodeId,
    v: NodeId,
    x0: NodeId,
    xt: NodeId,
    t: usize,
    s: &NoiseSchedule,
    weight: f64,
) -> Result<HybridLoss> {
    let simple = l_simple(g, eps_true, eps_pred)?;
    let vlb = vlb_term(g, eps_pred, v, x0, xt, t, s)?;
    let weighted = g.mul_scalar(vlb, weight);
    let total = g.add(simple, weighted)?;
    Ok(HybridLoss { total, simple, vlb })
}
