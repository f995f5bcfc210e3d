//! Reference computations used by the test suites as independent checks of
//! the graph-based diffusion math. Everything here is plain scalar `f64`
//! arithmetic written straight from the definitions; none of it calls into
//! the [`Graph`](crate::tensor::Graph) implementations it is used to verify.

use super::NoiseSchedule;
use rand::Rng;
use rand_distr::StandardNormal;

/// Summary statistics of Monte-Carlo draws.
pub struct McStats {
    pub mean: f64,
    pub variance: f64,
    pub n: usize,
}

/// Runs the single-step forward kernel x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) xi
/// from `x0` all the way to `t`, `n` times, and reports the sample statistics.
/// Composing the per-step kernels realizes the closed-form marginal.
pub fn compose_forward_kernels(
    x0: f64,
    t: usize,
    s: &NoiseSchedule,
    n: usize,
    rng: &mut impl Rng,
) -> McStats {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let mut x = x0;
        for step in 1..=t {
            let beta = s.beta(step);
            let xi: f64 = rng.sample(StandardNormal);
            x = (1.0 - beta).sqrt() * x + beta.sqrt() * xi;
        }
        sum += x;
        sum_sq += x * x;
    }
    let mean = sum / n as f64;
    McStats {
        mean,
        variance: sum_sq / n as f64 - mean * mean,
        n,
    }
}

/// Mean and variance of q(x_{t-1} | x_t, x_0) obtained by dense numerical
/// Bayes integration: the unnormalized density
/// q(x_t | x_{t-1}) * q(x_{t-1} | x_0) is evaluated on a grid and its first
/// two moments are accumulated.
pub fn grid_posterior_moments(
    x0: f64,
    xt: f64,
    t: usize,
    s: &NoiseSchedule,
    half_width: f64,
    points: usize,
) -> (f64, f64) {
    assert!(t >= 2, "grid oracle needs alpha_bar(t-1) < 1");
    let beta = s.beta(t);
    let alpha = s.alpha(t);
    let ab_prev = s.alpha_bar_prev(t);

    let kernel_mean = |x_prev: f64| alpha.sqrt() * x_prev;
    let kernel_var = beta;
    let marg_mean = ab_prev.sqrt() * x0;
    let marg_var = 1.0 - ab_prev;

    let lo = -half_width;
    let step = 2.0 * half_width / (points - 1) as f64;
    let mut norm = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for i in 0..points {
        let x = lo + i as f64 * step;
        let d1 = xt - kernel_mean(x);
        let d2 = x - marg_mean;
        let log_w = -0.5 * (d1 * d1 / kernel_var + d2 * d2 / marg_var);
        let w = log_w.exp();
        norm += w;
        m1 += w * x;
        m2 += w * x * x;
    }
    let mean = m1 / norm;
    (mean, m2 / norm - mean * mean)
}

/// KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)) estimated from `n` draws
/// of the first distribution.
pub fn mc_gaussian_kl(
    mean1: f64,
    logvar1: f64,
    mean2: f64,
    logvar2: f64,
    n: usize,
    rng: &mut impl Rng,
) -> f64 {
    let std1 = (0.5 * logvar1).exp();
    let var1 = logvar1.exp();
    let var2 = logvar2.exp();
    let mut acc = 0.0;
    for _ in 0..n {
        let x = mean1 + std1 * rng.sample::<f64, _>(StandardNormal);
        let log_p = -0.5 * ((x - mean1) * (x - mean1) / var1 + logvar1);
        let log_q = -0.5 * ((x - mean2) * (x - mean2) / var2 + logvar2);
        acc += log_p - log_q;
    }
    acc / n as f64
}

/// Straight-from-the-definition evaluation of one bound term, elementwise in
/// plain loops: KL between the posterior and the reverse kernel for t > 1,
/// Gaussian NLL at t = 1. The reverse mean uses the noise prediction
/// directly, mirroring the stop-gradient semantics (values are identical).
#[allow(clippy::too_many_arguments)]
pub fn dense_vlb_term(
    eps_pred: &[f64],
    v: &[f64],
    x0: &[f64],
    xt: &[f64],
    t: usize,
    s: &NoiseSchedule,
) -> f64 {
    let n = x0.len();
    let beta = s.beta(t);
    let alpha = s.alpha(t);
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar_prev(t);
    let log_beta = beta.ln();
    let log_post_clipped = s.log_posterior_variance_clipped(t);
    let mut acc = 0.0;
    for i in 0..n {
        let mu_theta = (xt[i] - beta / (1.0 - ab).sqrt() * eps_pred[i]) / alpha.sqrt();
        let logvar_theta = v[i] * log_beta + (1.0 - v[i]) * log_post_clipped;
        if t > 1 {
            let mu_q = ab_prev.sqrt() * beta / (1.0 - ab) * x0[i]
                + alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * xt[i];
            let logvar_q = ((1.0 - ab_prev) / (1.0 - ab) * beta).ln();
            acc += 0.5
                * (-1.0 + logvar_theta - logvar_q + (logvar_q - logvar_theta).exp()
                    + (mu_q - mu_theta) * (mu_q - mu_theta) * (-logvar_theta).exp());
        } else {
            let d = x0[i] - mu_theta;
            acc += 0.5
                * ((2.0 * std::f64::consts::PI).ln()
                    + logvar_theta
                    + d * d * (-logvar_theta).exp());
        }
    }
    acc / n as f64
}

/// KL(N(m1, v1) || N(0, 1)) in closed form; the prior term of the bound.
pub fn prior_kl(mean: f64, variance: f64) -> f64 {
    0.5 * (mean * mean + variance - 1.0 - variance.ln())
}
