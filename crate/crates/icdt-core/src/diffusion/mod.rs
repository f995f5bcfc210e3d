//! Probabilistic machinery of the conditional DDPM: the noise schedule, the
//! forward marginal, the Bayes posterior of the forward chain, the
//! noise-parameterized reverse mean, the learned-variance interpolation, and
//! timestep respacing.
//!
//! Timesteps are 1-based: `t` ranges over `1..=t_max`, matching the chain
//! x_0 -> x_1 -> ... -> x_T. Schedule coefficients are kept in `f64`
//! regardless of the tensor element type.

pub mod loss;
pub mod oracles;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar};

/// Precomputed schedule coefficients for a diffusion chain.
///
/// `posterior_variance(1)` is exactly zero (the empty-product convention
/// alpha_bar(0) = 1 forces it); its log is therefore substituted with the
/// t = 2 value so variance interpolation stays finite.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
    log_posterior_vars_clipped: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds all derived sequences from per-step noise fractions.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "beta_{} = {b} outside (0, 1)",
                    i + 1
                )));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self::assemble(betas, alphas, alpha_bars))
    }

    /// Builds a schedule whose cumulative products are given exactly; used by
    /// respacing so selected marginals are preserved bit-for-bit.
    fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        let mut betas = Vec::with_capacity(alpha_bars.len());
        let mut prev = 1.0;
        for &ab in &alpha_bars {
            if !(0.0 < ab && ab < prev) {
                return Err(Error::InvalidParameter(
                    "alpha_bar sequence must be strictly decreasing in (0, 1)".into(),
                ));
            }
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        Ok(Self::assemble(betas, alphas, alpha_bars))
    }

    fn assemble(betas: Vec<f64>, alphas: Vec<f64>, alpha_bars: Vec<f64>) -> Self {
        let t_max = betas.len();
        let mut posterior_vars = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            let ab_prev = if t == 1 { 1.0 } else { alpha_bars[t - 2] };
            posterior_vars.push((1.0 - ab_prev) / (1.0 - alpha_bars[t - 1]) * betas[t - 1]);
        }
        let mut log_clipped: Vec<f64> = posterior_vars.iter().map(|v| v.ln()).collect();
        log_clipped[0] = if t_max >= 2 {
            posterior_vars[1].ln()
        } else {
            betas[0].ln()
        };
        NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
            log_posterior_vars_clipped: log_clipped,
        }
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::InvalidParameter(format!(
                "timestep {t} outside 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// alpha_bar(t-1), with the empty product alpha_bar(0) = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn log_posterior_variance_clipped(&self, t: usize) -> f64 {
        self.log_posterior_vars_clipped[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Linearly interpolated betas: beta_1 = `beta_start`, beta_T = `beta_end`.
pub fn linear_beta_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::InvalidParameter("schedule needs T >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let betas = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| beta_start + i as f64 * (beta_end - beta_start) / (t_max - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Schedule rebuilt over a strictly increasing sub-sequence of timesteps.
///
/// `indices[s-1]` is the original timestep behind respaced step `s`; the
/// respaced `alpha_bar(s)` equals the original `alpha_bar(indices[s-1])`
/// exactly by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct RespacedSchedule {
    pub indices: Vec<usize>,
    pub schedule: NoiseSchedule,
}

impl RespacedSchedule {
    /// Original timestep fed to the denoiser at respaced step `s`.
    pub fn original_t(&self, s: usize) -> usize {
        self.indices[s - 1]
    }

    pub fn steps(&self) -> usize {
        self.indices.len()
    }
}

/// Selects `k` uniformly spaced timesteps (always including T) and rebuilds
/// the schedule over them.
pub fn respace(schedule: &NoiseSchedule, k: usize) -> Result<RespacedSchedule> {
    let t_max = schedule.t_max();
    if k == 0 || k > t_max {
        return Err(Error::InvalidParameter(format!(
            "respace count {k} outside 1..={t_max}"
        )));
    }
    let indices: Vec<usize> = (1..=k)
        .map(|s| ((s * t_max) as f64 / k as f64).round() as usize)
        .collect();
    debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
    debug_assert_eq!(*indices.last().unwrap(), t_max);
    let alpha_bars: Vec<f64> = indices.iter().map(|&t| schedule.alpha_bar(t)).collect();
    Ok(RespacedSchedule {
        indices,
        schedule: NoiseSchedule::from_alpha_bars(alpha_bars)?,
    })
}

/// Mean and (log-)variance of a Gaussian over the latent.
pub struct PosteriorStats {
    pub mean: NodeId,
    /// Plain variance; exactly 0 at t = 1.
    pub variance: f64,
    /// Log-variance with the t = 1 entry substituted (see [`NoiseSchedule`]).
    pub log_variance_clipped: f64,
}

fn check_same_shape<E: Scalar>(
    g: &Graph<E>,
    a: NodeId,
    b: NodeId,
    op: &'static str,
) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(
            op,
            g.value(a).shape(),
            g.value(b).shape(),
        ));
    }
    Ok(())
}

/// Draws x_t from the forward marginal q(x_t | x_0) given noise `eps`:
/// sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps.
pub fn q_sample<E: Scalar>(
    g: &mut Graph<E>,
    x0: NodeId,
    t: usize,
    eps: NodeId,
    s: &NoiseSchedule,
) -> Result<NodeId> {
    s.check_t(t)?;
    check_same_shape(g, x0, eps, "q_sample")?;
    let ab = s.alpha_bar(t);
    let a = g.mul_scalar(x0, ab.sqrt());
    let b = g.mul_scalar(eps, (1.0 - ab).sqrt());
    g.add(a, b)
}

/// Mean and variance of the forward-process posterior q(x_{t-1} | x_t, x_0).
pub fn posterior_mean_variance<E: Scalar>(
    g: &mut Graph<E>,
    x0: NodeId,
    xt: NodeId,
    t: usize,
    s: &NoiseSchedule,
) -> Result<PosteriorStats> {
    s.check_t(t)?;
    check_same_shape(g, x0, xt, "posterior_mean_variance")?;
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar_prev(t);
    let beta = s.beta(t);
    let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let coef_xt = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let a = g.mul_scalar(x0, coef_x0);
    let b = g.mul_scalar(xt, coef_xt);
    let mean = g.add(a, b)?;
    Ok(PosteriorStats {
        mean,
        variance: s.posterior_variance(t),
        log_variance_clipped: s.log_posterior_variance_clipped(t),
    })
}

/// Inverts the forward marginal: x_0 = (x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t).
pub fn predict_x0_from_eps<E: Scalar>(
    g: &mut Graph<E>,
    xt: NodeId,
    t: usize,
    eps: NodeId,
    s: &NoiseSchedule,
) -> Result<NodeId> {
    s.check_t(t)?;
    check_same_shape(g, xt, eps, "predict_x0_from_eps")?;
    let ab = s.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    let a = g.mul_scalar(xt, inv);
    let b = g.mul_scalar(eps, -(1.0 - ab).sqrt() * inv);
    g.add(a, b)
}

/// Reverse mean from predicted noise:
/// (x_t - beta_t / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t).
pub fn mu_from_eps<E: Scalar>(
    g: &mut Graph<E>,
    xt: NodeId,
    t: usize,
    eps_pred: NodeId,
    s: &NoiseSchedule,
) -> Result<NodeId> {
    s.check_t(t)?;
    check_same_shape(g, xt, eps_pred, "mu_from_eps")?;
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    let eps_coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let scaled_eps = g.mul_scalar(eps_pred, eps_coef);
    let diff = g.sub(xt, scaled_eps)?;
    Ok(g.mul_scalar(diff, inv_sqrt_alpha))
}

/// Log-variance from the model's interpolation head:
/// log Sigma = v log beta_t + (1 - v) log beta_tilde_t (clipped).
pub fn sigma_from_v<E: Scalar>(
    g: &mut Graph<E>,
    v: NodeId,
    t: usize,
    s: &NoiseSchedule,
) -> Result<NodeId> {
    s.check_t(t)?;
    let log_beta = s.beta(t).ln();
    let log_post = s.log_posterior_variance_clipped(t);
    let scaled = g.mul_scalar(v, log_beta - log_post);
    Ok(g.add_scalar(scaled, log_post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_schedule_endpoints() {
        let s = linear_beta_schedule(1000, 1e-4, 2e-2).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 2e-2);
        assert_eq!(s.t_max(), 1000);
    }

    #[test]
    fn linear_schedule_midpoint() {
        // beta_500 = 1e-4 + 499 * (2e-2 - 1e-4) / 999
        let s = linear_beta_schedule(1000, 1e-4, 2e-2).unwrap();
        assert!(
            (s.beta(500) - 0.010040040040040041).abs() < 1e-15,
            "beta_500 = {}",
            s.beta(500)
        );
    }

    #[test]
    fn single_step_schedule_is_degenerate() {
        let s = linear_beta_schedule(1, 0.3, 0.3).unwrap();
        assert_eq!(s.betas(), &[0.3]);
        assert_eq!(s.alpha_bar(1), 0.7);
        assert_eq!(s.posterior_variance(1), 0.0);
        // only entry clips to log beta_1
        assert_eq!(s.log_posterior_variance_clipped(1), 0.3f64.ln());
    }

    #[test]
    fn schedule_invariants_hold() {
        let s = linear_beta_schedule(200, 1e-4, 2e-2).unwrap();
        for t in 1..=200 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar_prev(t));
            let bt = s.posterior_variance(t);
            assert!((0.0..=s.beta(t)).contains(&bt), "beta_tilde out of range at {t}");
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
            }
        }
        assert_eq!(s.posterior_variance(1), 0.0);
        assert_eq!(
            s.log_posterior_variance_clipped(1),
            s.posterior_variance(2).ln()
        );
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(linear_beta_schedule(0, 1e-4, 2e-2).is_err());
        assert!(linear_beta_schedule(10, 0.0, 0.5).is_err());
        assert!(linear_beta_schedule(10, 0.5, 0.1).is_err());
        assert!(linear_beta_schedule(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn q_sample_noiseless_and_pure_noise() {
        let s = linear_beta_schedule(100, 1e-4, 2e-2).unwrap();
        let mut g = Graph::<f64>::new();
        let x0 = g.constant(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let zero = g.constant(Tensor::zeros(vec![3]));
        let t = 40;
        let ab = s.alpha_bar(t);

        let noiseless = q_sample(&mut g, x0, t, zero, &s).unwrap();
        for (o, x) in g.value(noiseless).data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((o - ab.sqrt() * x).abs() < 1e-12);
        }

        let e = g.constant(Tensor::from_vec(vec![3], vec![0.3, -0.7, 2.0]).unwrap());
        let pure = q_sample(&mut g, zero, t, e, &s).unwrap();
        for (o, x) in g.value(pure).data().iter().zip([0.3, -0.7, 2.0]) {
            assert!((o - (1.0 - ab).sqrt() * x).abs() < 1e-12);
        }
    }

    #[test]
    fn q_sample_rejects_out_of_range_t() {
        let s = linear_beta_schedule(10, 1e-4, 2e-2).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2]));
        assert!(q_sample(&mut g, x, 0, x, &s).is_err());
        assert!(q_sample(&mut g, x, 11, x, &s).is_err());
    }

    #[test]
    fn posterior_collapses_to_x0_at_t1() {
        // x_1 = sqrt(alpha_1) x_0 with no noise => posterior mean is x_0,
        // variance beta_tilde_1 = 0.
        let s = linear_beta_schedule(10, 1e-2, 2e-2).unwrap();
        let mut g = Graph::<f64>::new();
        let x0 = g.constant(Tensor::from_vec(vec![2], vec![0.8, -0.3]).unwrap());
        let x1 = g.mul_scalar(x0, s.alpha(1).sqrt());
        let stats = posterior_mean_variance(&mut g, x0, x1, 1, &s).unwrap();
        assert_eq!(stats.variance, 0.0);
        for (m, x) in g.value(stats.mean).data().iter().zip([0.8, -0.3]) {
            assert!((m - x).abs() < 1e-12, "mean {m} vs {x}");
        }
    }

    #[test]
    fn posterior_zero_inputs_zero_mean() {
        let s = linear_beta_schedule(10, 1e-2, 2e-2).unwrap();
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(vec![4]));
        let stats = posterior_mean_variance(&mut g, z, z, 5, &s).unwrap();
        assert!(g.value(stats.mean).data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn predict_x0_round_trip() {
        let s = linear_beta_schedule(50, 1e-4, 2e-2).unwrap();
        let mut g = Graph::<f64>::new();
        let x0t = Tensor::from_vec(vec![3], vec![0.4, -1.1, 0.9]).unwrap();
        let x0 = g.constant(x0t.clone());
        let e = g.constant(Tensor::from_vec(vec![3], vec![-0.2, 0.5, 1.3]).unwrap());
        for t in [1, 17, 50] {
            let xt = q_sample(&mut g, x0, t, e, &s).unwrap();
            let back = predict_x0_from_eps(&mut g, xt, t, e, &s).unwrap();
            for (b, x) in g.value(back).data().iter().zip(x0t.data()) {
                assert!((b - x).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn predict_x0_round_trip_f32_sweep() {
        let s = linear_beta_schedule(100, 1e-4, 2e-2).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let mut g = Graph::<f32>::new();
        let x0t = Tensor::<f32>::randn(vec![4, 4], &mut rng);
        let x0 = g.constant(x0t.clone());
        for t in 1..=100 {
            let e = g.constant(Tensor::<f32>::randn(vec![4, 4], &mut rng));
            let xt = q_sample(&mut g, x0, t, e, &s).unwrap();
            let back = predict_x0_from_eps(&mut g, xt, t, e, &s).unwrap();
            let max_err = g
                .value(back)
                .data()
                .iter()
                .zip(x0t.data())
                .map(|(b, x)| (b - x).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err < 1e-4, "round-trip error {max_err} at t={t}");
        }
    }

    #[test]
    fn mu_from_eps_matches_posterior_of_implied_x0() {
        let s = linear_beta_schedule(80, 1e-4, 2e-2).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(6);
        let mut g = Graph::<f64>::new();
        for t in [1, 2, 13, 41, 80] {
            let xt = g.constant(Tensor::<f64>::randn(vec![5], &mut rng));
            let eps = g.constant(Tensor::<f64>::randn(vec![5], &mut rng));
            let direct = mu_from_eps(&mut g, xt, t, eps, &s).unwrap();
            let x0 = predict_x0_from_eps(&mut g, xt, t, eps, &s).unwrap();
            let via_posterior = posterior_mean_variance(&mut g, x0, xt, t, &s).unwrap();
            for (a, b) in g
                .value(direct)
                .data()
                .iter()
                .zip(g.value(via_posterior.mean).data())
            {
                assert!((a - b).abs() < 1e-5, "{a} vs {b} at t={t}");
            }
        }
    }

    #[test]
    fn mu_from_eps_zero_inputs() {
        let s = linear_beta_schedule(10, 1e-2, 2e-2).unwrap();
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(vec![3]));
        let mu = mu_from_eps(&mut g, z, 4, z, &s).unwrap();
        assert!(g.value(mu).data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn mu_at_t1_recovers_x0() {
        let s = linear_beta_schedule(30, 1e-3, 2e-2).unwrap();
        let mut g = Graph::<f64>::new();
        let x0t = Tensor::from_vec(vec![2], vec![0.25, -0.75]).unwrap();
        let x0 = g.constant(x0t.clone());
        let e = g.constant(Tensor::from_vec(vec![2], vec![1.4, -0.6]).unwrap());
        let x1 = q_sample(&mut g, x0, 1, e, &s).unwrap();
        let mu = mu_from_eps(&mut g, x1, 1, e, &s).unwrap();
        for (m, x) in g.value(mu).data().iter().zip(x0t.data()) {
            assert!((m - x).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_from_v_interpolates_in_log_space() {
        let s = linear_beta_schedule(100, 1e-4, 2e-2).unwrap();
        let t = 60;
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::full(vec![3], 1.0));
        let zeros = g.constant(Tensor::zeros(vec![3]));
        let halves = g.constant(Tensor::full(vec![3], 0.5));

        let hi = sigma_from_v(&mut g, ones, t, &s).unwrap();
        assert!((g.value(hi).data()[0] - s.beta(t).ln()).abs() < 1e-12);

        let lo = sigma_from_v(&mut g, zeros, t, &s).unwrap();
        assert!((g.value(lo).data()[0] - s.log_posterior_variance_clipped(t)).abs() < 1e-12);

        let mid = sigma_from_v(&mut g, halves, t, &s).unwrap();
        let expect = 0.5 * (s.beta(t).ln() + s.log_posterior_variance_clipped(t));
        assert!((g.value(mid).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn sigma_from_v_midpoint_of_known_variances() {
        // Two-step schedule solved so that beta_2 = 2e-2 and beta_tilde_2 = 1e-2:
        // beta_1 = 2e-4 / 0.0102. At v = 0.5, log Sigma is the log midpoint.
        let beta_1 = 2e-4 / 0.0102;
        let s = NoiseSchedule::from_betas(vec![beta_1, 0.02]).unwrap();
        assert!((s.posterior_variance(2) - 0.01).abs() < 1e-15);
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::full(vec![1], 0.5));
        let out = sigma_from_v(&mut g, v, 2, &s).unwrap();
        let expect = 0.5 * (0.02f64.ln() + 0.01f64.ln());
        assert!((g.value(out).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn respace_identity_reproduces_betas() {
        let s = linear_beta_schedule(1000, 1e-4, 2e-2).unwrap();
        let r = respace(&s, 1000).unwrap();
        assert_eq!(r.indices, (1..=1000).collect::<Vec<_>>());
        for t in 1..=1000 {
            assert!(
                (r.schedule.beta(t) - s.beta(t)).abs() < 1e-12,
                "beta mismatch at {t}"
            );
        }
    }

    #[test]
    fn respace_single_step() {
        let s = linear_beta_schedule(1000, 1e-4, 2e-2).unwrap();
        let r = respace(&s, 1).unwrap();
        assert_eq!(r.indices, vec![1000]);
        assert!((r.schedule.beta(1) - (1.0 - s.alpha_bar(1000))).abs() < 1e-15);
    }

    #[test]
    fn respace_preserves_selected_marginals_exactly() {
        let s = linear_beta_schedule(1000, 1e-4, 2e-2).unwrap();
        for k in [1usize, 4, 250, 1000] {
            let r = respace(&s, k).unwrap();
            assert_eq!(r.steps(), k);
            assert_eq!(*r.indices.last().unwrap(), 1000);
            for (i, &t) in r.indices.iter().enumerate() {
                let diff = (r.schedule.alpha_bar(i + 1) - s.alpha_bar(t)).abs();
                assert!(diff <= 1e-12, "alpha_bar drift {diff} at sub-step {}", i + 1);
            }
        }
    }

    #[test]
    fn respace_rejects_out_of_range() {
        let s = linear_beta_schedule(100, 1e-4, 2e-2).unwrap();
        assert!(respace(&s, 0).is_err());
        assert!(respace(&s, 101).is_err());
    }
}
