//! The stochastic model behind training: per-pixel heteroscedastic Gaussian
//! negative log-likelihood with an outlier-probability-dependent standard
//! deviation, Gaussian priors on the weights, the epoch schedule that keeps
//! the classifier idle during burn-in, and the inlier reward.

use thiserror::Error;

use crate::autodiff::Ctx;
use crate::ops::OpError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BayesError {
    #[error("invalid stochastic config: {0}")]
    Config(String),
    #[error("no valid pixels in batch")]
    NoValidPixels,
    #[error(transparent)]
    Op(#[from] OpError),
}

/// Direction of the inlier-reward ramp over epochs.
///
/// `Up` is the literal published formula (zero during burn-in, ramping to
/// full weight); `Down` is the alternative reading where the reward fades
/// out as training progresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardRamp {
    Up,
    Down,
}

/// Constants of the probabilistic model and its training schedule.
#[derive(Debug, Clone)]
pub struct StochasticConfig {
    /// Expected residual std for inliers, in pixels (final value).
    pub sigma_in: f64,
    /// Expected residual std for outliers, in pixels (final value).
    pub sigma_out: f64,
    /// Std of the Gaussian prior over network weights.
    pub sigma_prior: f64,
    /// Burn-in std: both endpoints start here so the classifier is idle.
    pub sigma0: f64,
    /// First epoch of the transition phase.
    pub e_t: u32,
    /// First epoch after the transition phase.
    pub e_f: u32,
    /// Inlier reward weight.
    pub reward_weight: f64,
    /// Extra multiplier on the minibatch ELBO scaling of the prior terms.
    /// The default compensates for the small per-epoch pixel count of desk
    /// runs: at full ELBO weight the prior keeps the variational weight
    /// noise near sigma_in, which destabilizes the inlier classification.
    pub kl_scale: f64,
    pub reward_ramp: RewardRamp,
}

impl Default for StochasticConfig {
    fn default() -> Self {
        StochasticConfig {
            sigma_in: 0.2,
            sigma_out: 4.0,
            sigma_prior: 1.0,
            sigma0: 1.0,
            e_t: 10,
            e_f: 20,
            reward_weight: 0.1,
            kl_scale: 0.05,
            reward_ramp: RewardRamp::Up,
        }
    }
}

impl StochasticConfig {
    /// Ablation arm: a fixed 1px standard deviation for every pixel and no
    /// outlier branch in the graph.
    pub fn ablation() -> Self {
        StochasticConfig {
            sigma_in: 1.0,
            sigma_out: 1.0,
            sigma0: 1.0,
            reward_weight: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), BayesError> {
        if !(self.sigma_in > 0.0 && self.sigma_in <= self.sigma_out) {
            return Err(BayesError::Config(format!(
                "require 0 < sigma_in <= sigma_out, got {} and {}",
                self.sigma_in, self.sigma_out
            )));
        }
        if self.e_t > self.e_f {
            return Err(BayesError::Config(format!(
                "require e_t <= e_f, got {} and {}",
                self.e_t, self.e_f
            )));
        }
        if self.sigma0 <= 0.0 || self.sigma_prior <= 0.0 {
            return Err(BayesError::Config("sigma0 and sigma_prior must be positive".into()));
        }
        if self.reward_weight < 0.0 {
            return Err(BayesError::Config("reward weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Scheduled (sigma_in, sigma_out) endpoints at a given epoch.
    pub fn sigma_endpoints(&self, epoch: u32) -> (f64, f64) {
        (
            schedule_sigma(epoch, self.sigma0, self.sigma_in, self.e_t, self.e_f),
            schedule_sigma(epoch, self.sigma0, self.sigma_out, self.e_t, self.e_f),
        )
    }
}

/// Piecewise-linear schedule: constant sigma0 through e_t, linear to
/// sigma_final at e_f, constant after. Exact at the plateaus.
pub fn schedule_sigma(epoch: u32, sigma0: f64, sigma_final: f64, e_t: u32, e_f: u32) -> f64 {
    if epoch <= e_t {
        return sigma0;
    }
    if epoch >= e_f {
        return sigma_final;
    }
    let t = (epoch - e_t) as f64 / (e_f - e_t) as f64;
    sigma0 + t * (sigma_final - sigma0)
}

/// Transition ramp: 0 through e_t, linear to 1 at e_f, 1 after.
pub fn schedule_ramp(epoch: u32, e_t: u32, e_f: u32) -> f64 {
    if epoch <= e_t {
        0.0
    } else if epoch >= e_f {
        1.0
    } else {
        (epoch - e_t) as f64 / (e_f - e_t) as f64
    }
}

/// Per-pixel residual standard deviation as a function of the outlier
/// probability: sigma_in + (sigma_out - sigma_in) * p_out, with scheduled
/// endpoints. Exact at p_out = 0 and 1.
pub fn sigma_of_pout(p_out: f64, cfg: &StochasticConfig, epoch: u32) -> f64 {
    let (s_in, s_out) = cfg.sigma_endpoints(epoch);
    if p_out == 0.0 {
        return s_in;
    }
    if p_out == 1.0 {
        return s_out;
    }
    s_in + (s_out - s_in) * p_out
}

/// Gaussian NLL of one valid pixel, with the additive constant dropped:
/// ln(sigma) + r^2 / (2 sigma^2), r = d_gt - d_raw - delta.
pub fn nll_pixel(
    d_gt: f64,
    d_raw: f64,
    delta: f64,
    p_out: f64,
    cfg: &StochasticConfig,
    epoch: u32,
) -> f64 {
    let sigma = sigma_of_pout(p_out, cfg, epoch);
    let r = d_gt - d_raw - delta;
    sigma.ln() + r * r / (2.0 * sigma * sigma)
}

/// Residual magnitude where claiming inlier and claiming outlier cost the
/// same NLL (post-schedule): below it the model is rewarded for p_out = 0.
/// None when sigma_in == sigma_out (the ablation arm has no crossover).
pub fn crossover_residual(cfg: &StochasticConfig) -> Option<f64> {
    let (si, so) = (cfg.sigma_in, cfg.sigma_out);
    if so <= si {
        return None;
    }
    let r2 = 2.0 * (so / si).ln() * si * si * so * so / (so * so - si * si);
    Some(r2.sqrt())
}

/// Penalty encouraging inlier classification: ramp(e) * lambda * mean_p_out.
pub fn inlier_reward(epoch: u32, mean_p_out: f64, cfg: &StochasticConfig) -> f64 {
    let ramp = match cfg.reward_ramp {
        RewardRamp::Up => schedule_ramp(epoch, cfg.e_t, cfg.e_f),
        RewardRamp::Down => 1.0 - schedule_ramp(epoch, cfg.e_t, cfg.e_f),
    };
    ramp * cfg.reward_weight * mean_p_out
}

/// Total predictive std: aleatoric (from p_out through the sigma model)
/// combined with the Monte-Carlo epistemic std in quadrature.
pub fn marginal_predictive(p_out: f64, epistemic_std: f64, cfg: &StochasticConfig) -> f64 {
    let aleatoric = sigma_of_pout(p_out, cfg, cfg.e_f);
    (aleatoric * aleatoric + epistemic_std * epistemic_std).sqrt()
}

/// Every term of one training-loss evaluation.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub l2_prior: f64,
    pub reward: f64,
    pub total: f64,
    /// Effective prior scaling applied this batch.
    pub kl_scale: f64,
    /// Mean outlier probability over valid batch pixels; None in ablation.
    pub mean_p_out: Option<f64>,
    pub n_valid: usize,
}

/// One patch of network outputs entering the loss.
pub struct BatchItem<V> {
    /// Predicted correction, shape (1, H, W).
    pub delta: V,
    /// Outlier probability, shape (1, H, W); None detaches the branch.
    pub p_out: Option<V>,
    /// Constant d_gt - d_raw per pixel, zero where invalid.
    pub residual_base: Tensor,
    /// Loss mask: gt-valid AND raw-valid.
    pub valid: Vec<bool>,
}

/// Parameter handles the prior terms range over.
pub struct PriorHandles<V> {
    /// (mu, rho) pairs of every variational parameter tensor.
    pub variational: Vec<(V, V)>,
    /// Point (non-variational) parameter tensors, weights and biases.
    pub point: Vec<V>,
}

/// Assemble the total training loss on an execution context.
///
/// nll is the mean pixel NLL over all valid pixels in the batch; the prior
/// terms are scaled by kl_scale * batch_valid / n_pixels_per_epoch
/// (minibatch ELBO scaling); the reward is added last. Returns the loss
/// value handle and the numeric breakdown.
pub fn total_loss<C: Ctx>(
    ctx: &mut C,
    batch: &[BatchItem<C::Val>],
    priors: &PriorHandles<C::Val>,
    cfg: &StochasticConfig,
    epoch: u32,
    n_pixels_per_epoch: usize,
) -> Result<(C::Val, LossBreakdown), BayesError> {
    cfg.validate()?;
    let n_valid: usize = batch.iter().map(|b| b.valid.iter().filter(|&&v| v).count()).sum();
    if n_valid == 0 {
        return Err(BayesError::NoValidPixels);
    }
    let inv_n = 1.0 / n_valid as f64;
    let (s_in_e, s_out_e) = cfg.sigma_endpoints(epoch);
    let ablation = batch.iter().any(|b| b.p_out.is_none());

    let mut nll_node: Option<C::Val> = None;
    let mut pbar_node: Option<C::Val> = None;
    for item in batch {
        let shape = item.residual_base.shape();
        let weights = Tensor::from_vec(
            shape.channels,
            shape.height,
            shape.width,
            item.valid.iter().map(|&v| if v { inv_n } else { 0.0 }).collect(),
        );
        let base = ctx.constant(item.residual_base.clone());
        let r = ctx.sub(&base, &item.delta);
        let r2 = ctx.square(&r);
        let nll_px = match &item.p_out {
            Some(p_out) => {
                let sigma = ctx.affine(p_out, s_out_e - s_in_e, s_in_e);
                let s2 = ctx.square(&sigma);
                let quad = ctx.div(&r2, &s2);
                let quad = ctx.affine(&quad, 0.5, 0.0);
                let lns = ctx.ln(&sigma);
                ctx.add(&lns, &quad)
            }
            None => {
                // constant sigma: ln(s) + r^2 / (2 s^2) in one affine
                let sigma = s_in_e;
                ctx.affine(&r2, 0.5 / (sigma * sigma), sigma.ln())
            }
        };
        let part = ctx.weighted_sum(&nll_px, weights.clone());
        nll_node = Some(match nll_node {
            Some(acc) => ctx.add(&acc, &part),
            None => part,
        });
        if let Some(p_out) = &item.p_out {
            let p_part = ctx.weighted_sum(p_out, weights);
            pbar_node = Some(match pbar_node {
                Some(acc) => ctx.add(&acc, &p_part),
                None => p_part,
            });
        }
    }
    let nll_node = nll_node.expect("non-empty batch");

    let mut kl_node = ctx.constant(Tensor::scalar(0.0));
    for (mu, rho) in &priors.variational {
        let term = ctx.kl_gaussian(mu, rho, cfg.sigma_prior);
        kl_node = ctx.add(&kl_node, &term);
    }
    let mut l2_node = ctx.constant(Tensor::scalar(0.0));
    for theta in &priors.point {
        let sq = ctx.square(theta);
        let shape = ctx.value(&sq).shape();
        let ones = Tensor::filled(shape.channels, shape.height, shape.width, 1.0);
        let s = ctx.weighted_sum(&sq, ones);
        l2_node = ctx.add(&l2_node, &s);
    }
    let sp2 = 2.0 * cfg.sigma_prior * cfg.sigma_prior;
    let l2_node = ctx.affine(&l2_node, 1.0 / sp2, 0.0);

    let scale = cfg.kl_scale * (n_valid as f64 / n_pixels_per_epoch as f64);
    let prior_sum = ctx.add(&kl_node, &l2_node);
    let prior_scaled = ctx.affine(&prior_sum, scale, 0.0);

    let ramp = match cfg.reward_ramp {
        RewardRamp::Up => schedule_ramp(epoch, cfg.e_t, cfg.e_f),
        RewardRamp::Down => 1.0 - schedule_ramp(epoch, cfg.e_t, cfg.e_f),
    };
    let reward_node = match (&pbar_node, ablation) {
        (Some(pbar), false) => ctx.affine(pbar, ramp * cfg.reward_weight, 0.0),
        _ => ctx.constant(Tensor::scalar(0.0)),
    };

    let acc = ctx.add(&nll_node, &prior_scaled);
    let total = ctx.add(&acc, &reward_node);

    let breakdown = LossBreakdown {
        nll: ctx.value(&nll_node).item(),
        kl: ctx.value(&kl_node).item(),
        l2_prior: ctx.value(&l2_node).item(),
        reward: ctx.value(&reward_node).item(),
        total: ctx.value(&total).item(),
        kl_scale: scale,
        mean_p_out: pbar_node.as_ref().map(|p| ctx.value(p).item()),
        n_valid,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The worked-example constants: sigma_in 0.2, sigma_out 4.0.
    fn post_schedule() -> StochasticConfig {
        StochasticConfig { sigma_in: 0.2, sigma_out: 4.0, ..Default::default() }
    }

    #[test]
    fn sigma_endpoints_exact() {
        let cfg = post_schedule();
        let e = 40;
        assert_eq!(sigma_of_pout(0.0, &cfg, e), 0.2);
        assert_eq!(sigma_of_pout(1.0, &cfg, e), 4.0);
        assert!((sigma_of_pout(0.5, &cfg, e) - 2.1).abs() < 1e-12);
    }

    #[test]
    fn schedule_control_points_bit_exact() {
        assert_eq!(schedule_sigma(5, 1.0, 0.2, 10, 20), 1.0);
        assert_eq!(schedule_sigma(15, 1.0, 0.2, 10, 20), 0.6);
        assert_eq!(schedule_sigma(30, 1.0, 0.2, 10, 20), 0.2);
        // continuity at both knees
        assert_eq!(schedule_sigma(10, 1.0, 0.2, 10, 20), 1.0);
        assert_eq!(schedule_sigma(20, 1.0, 0.2, 10, 20), 0.2);
    }

    #[test]
    fn nll_values() {
        let cfg = post_schedule();
        let e = 40;
        // r=0, sigma=1: point p_out such that sigma=1? use ablation-style direct formula
        let one = StochasticConfig { sigma_in: 1.0, sigma_out: 1.0, ..post_schedule() };
        assert_eq!(nll_pixel(5.0, 3.0, 2.0, 0.0, &one, e), 0.0);
        // r=2, sigma=2
        let two = StochasticConfig { sigma_in: 2.0, sigma_out: 2.0, ..post_schedule() };
        let v = nll_pixel(4.0, 1.0, 1.0, 0.0, &two, e);
        assert!((v - (2.0f64.ln() + 0.5)).abs() < 1e-12);
        // inlier claim wins at small residual
        let n0 = nll_pixel(0.2, 0.0, 0.0, 0.0, &cfg, e);
        let n1 = nll_pixel(0.2, 0.0, 0.0, 1.0, &cfg, e);
        assert!((n0 - (0.2f64.ln() + 0.5)).abs() < 1e-12);
        assert!((n1 - (4.0f64.ln() + 0.2 * 0.2 / 32.0)).abs() < 1e-12);
        assert!(n0 < n1);
    }

    #[test]
    fn crossover_splits_the_claims() {
        let cfg = post_schedule();
        let e = 40;
        let r_star = crossover_residual(&cfg).unwrap();
        for r in [0.0, 0.2, 0.9 * r_star] {
            assert!(nll_pixel(r, 0.0, 0.0, 0.0, &cfg, e) < nll_pixel(r, 0.0, 0.0, 1.0, &cfg, e));
        }
        for r in [1.01 * r_star, 2.0 * r_star, 10.0] {
            assert!(nll_pixel(r, 0.0, 0.0, 0.0, &cfg, e) > nll_pixel(r, 0.0, 0.0, 1.0, &cfg, e));
        }
        assert!(crossover_residual(&StochasticConfig::ablation()).is_none());
    }

    #[test]
    fn reward_control_points() {
        let cfg = post_schedule(); // e_t=10, e_f=20, lambda=0.1
        assert_eq!(inlier_reward(5, 0.7, &cfg), 0.0);
        assert_eq!(inlier_reward(20, 0.5, &cfg), 0.05);
        assert_eq!(inlier_reward(15, 1.0, &cfg), 0.05);
        let down = StochasticConfig { reward_ramp: RewardRamp::Down, ..post_schedule() };
        assert_eq!(inlier_reward(5, 1.0, &down), 0.1);
        assert_eq!(inlier_reward(25, 1.0, &down), 0.0);
    }

    #[test]
    fn burn_in_keeps_classifier_idle() {
        let cfg = post_schedule();
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(sigma_of_pout(p, &cfg, 5), 1.0);
        }
    }

    #[test]
    fn predictive_combines_in_quadrature() {
        let cfg = post_schedule();
        assert_eq!(marginal_predictive(0.0, 0.0, &cfg), 0.2);
        assert_eq!(marginal_predictive(1.0, 0.0, &cfg), 4.0);
        // aleatoric 0.3, epistemic 0.4 -> 0.5: solve p for sigma=0.3
        let p = (0.3 - 0.2) / 3.8;
        assert!((marginal_predictive(p, 0.4, &cfg) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(StochasticConfig::default().validate().is_ok());
        assert!(StochasticConfig { sigma_in: 0.0, ..Default::default() }.validate().is_err());
        assert!(StochasticConfig { sigma_in: 5.0, ..Default::default() }.validate().is_err());
        assert!(StochasticConfig { e_t: 30, ..Default::default() }.validate().is_err());
        // equal endpoints are the ablation arm and must validate
        assert!(StochasticConfig::ablation().validate().is_ok());
    }
}
