//! Ancestral sampling of the conditional reverse process over a respaced
//! timestep sub-sequence.

use crate::codec::LatentCodec;
use crate::diffusion::{
    mu_from_eps, posterior_mean_variance, predict_x0_from_eps, respace, sigma_from_v,
    NoiseSchedule, RespacedSchedule,
};
use crate::error::{Error, Result};
use crate::model::{IcdtModel, Parameters};
use crate::tensor::{Graph, Tensor};
use rand_chacha::ChaCha8Rng;

/// Sampling controls. Clamping of the implied clean latent is off by
/// default: latents are unbounded.
#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub steps: usize,
    pub clamp_x0: bool,
}

impl SampleOptions {
    pub fn new(steps: usize) -> Self {
        SampleOptions {
            steps,
            clamp_x0: false,
        }
    }
}

/// Pre-drawn noise for one trajectory: the initial latent and one noise
/// field per reverse step (the t = 1 entry is never used).
pub struct NoiseTrajectory {
    pub initial: Tensor<f32>,
    pub step_noise: Vec<Tensor<f32>>,
}

/// Draws a full trajectory's noise up front, in reverse-step order.
pub fn draw_noise_trajectory(
    shape: &[usize],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> NoiseTrajectory {
    let initial = Tensor::randn(shape.to_vec(), rng);
    let step_noise = (0..steps)
        .map(|_| Tensor::randn(shape.to_vec(), rng))
        .collect();
    NoiseTrajectory {
        initial,
        step_noise,
    }
}

/// One reverse step x_s -> x_{s-1} on the respaced schedule. The denoiser is
/// conditioned on the original timestep behind sub-step `s`; the Gaussian
/// parameters use the respaced coefficients. At s = 1 no noise is added.
#[allow(clippy::too_many_arguments)]
pub fn p_sample(
    model: &IcdtModel<f32>,
    weights: Option<&Parameters<f32>>,
    xt: &Tensor<f32>,
    zcond: &Tensor<f32>,
    s_idx: usize,
    respaced: &RespacedSchedule,
    noise: Option<&Tensor<f32>>,
    clamp_x0: bool,
) -> Result<Tensor<f32>> {
    let schedule = &respaced.schedule;
    schedule.check_t(s_idx)?;
    let t_model = respaced.original_t(s_idx);

    let mut g = Graph::<f32>::new();
    let ids = model.insert_weights(&mut g, weights, false);
    let xt_n = g.constant(xt.clone());
    let zc_n = g.constant(zcond.clone());
    let (eps_pred, v) = model.forward_graph(&mut g, &ids, xt_n, zc_n, t_model)?;

    let mean = if clamp_x0 {
        let x0 = predict_x0_from_eps(&mut g, xt_n, s_idx, eps_pred, schedule)?;
        let x0_t = g.value(x0).map(|x| x.clamp(-1.0, 1.0));
        let x0_clamped = g.constant(x0_t);
        posterior_mean_variance(&mut g, x0_clamped, xt_n, s_idx, schedule)?.mean
    } else {
        mu_from_eps(&mut g, xt_n, s_idx, eps_pred, schedule)?
    };

    if s_idx == 1 {
        return Ok(g.value(mean).clone());
    }
    let noise = noise.ok_or_else(|| {
        Error::InvalidParameter("p_sample needs a noise tensor for steps above 1".into())
    })?;
    if noise.shape() != xt.shape() {
        return Err(Error::shape("p_sample noise", noise.shape(), xt.shape()));
    }
    let logvar = sigma_from_v(&mut g, v, s_idx, schedule)?;
    let half_logvar = g.mul_scalar(logvar, 0.5);
    let sigma = g.exp(half_logvar);
    let n = g.constant(noise.clone());
    let scaled = g.mul(sigma, n)?;
    let out = g.add(mean, scaled)?;
    Ok(g.value(out).clone())
}

/// Full conditional generation: encode the degraded image, run the respaced
/// reverse chain from pure noise, decode, and clamp to [-1, 1].
#[allow(clippy::too_many_arguments)]
pub fn sample_loop(
    model: &IcdtModel<f32>,
    weights: Option<&Parameters<f32>>,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    latent_scale: f32,
    degraded: &Tensor<f32>,
    options: SampleOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let respaced = respace(schedule, options.steps)?;
    let zcond = codec.encode(degraded)?.scale(1.0 / latent_scale);
    let noise = draw_noise_trajectory(zcond.shape(), options.steps, rng);
    sample_loop_with_noise(
        model,
        weights,
        codec,
        &respaced,
        latent_scale,
        &zcond,
        &noise,
        options.clamp_x0,
    )
}

/// [`sample_loop`] body with externally supplied noise (used for the
/// shared-noise comparisons across models of identical latent shape).
#[allow(clippy::too_many_arguments)]
pub fn sample_loop_with_noise(
    model: &IcdtModel<f32>,
    weights: Option<&Parameters<f32>>,
    codec: &dyn LatentCodec,
    respaced: &RespacedSchedule,
    latent_scale: f32,
    zcond: &Tensor<f32>,
    noise: &NoiseTrajectory,
    clamp_x0: bool,
) -> Result<Tensor<f32>> {
    let steps = respaced.steps();
    if noise.step_noise.len() < steps {
        return Err(Error::InvalidParameter(format!(
            "noise trajectory holds {} steps, need {steps}",
            noise.step_noise.len()
        )));
    }
    let mut x = noise.initial.clone();
    for s in (1..=steps).rev() {
        let step_noise = &noise.step_noise[steps - s];
        x = p_sample(
            model,
            weights,
            &x,
            zcond,
            s,
            respaced,
            Some(step_noise),
            clamp_x0,
        )?;
    }
    let decoded = codec.decode(&x.scale(latent_scale))?;
    Ok(decoded.map(|v| v.clamp(-1.0, 1.0)))
}
