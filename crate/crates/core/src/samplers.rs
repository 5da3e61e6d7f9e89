//! Reverse-process generation: ancestral full-chain sampling, generalized
//! strided steps across the sigma family, and trajectory planning.
//!
//! A [`SamplerPlan`] fixes which timesteps are visited and which sigma rule
//! applies. The generalized step with the DDPM-equivalent sigma reproduces the
//! ancestral transition exactly on consecutive steps; sigma = 0 makes the
//! trajectory a pure function of the initial noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ConditionTensor;
use crate::error::CoreError;
use crate::forward_process::predict_x0_from_eps;
use crate::nn::Tensor;
use crate::rng::standard_normal_vec;
use crate::schedules::NoiseSchedule;
use crate::Result;

/// Trajectory family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    DdpmFull,
    Ddim,
}

/// Per-step noise-scale rule for the generalized reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// Matches the ancestral posterior noise scale; the generalized step then
    /// coincides with the Markovian chain.
    DdpmEquivalent,
    /// sigma = 0: deterministic trajectory.
    DeterministicZero,
    /// sigma = eta * (DDPM-equivalent value).
    Eta(f64),
}

/// A reverse trajectory: the visited timestep subset (ascending, within
/// 1..=T) plus the sigma rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerPlan {
    pub kind: PlanKind,
    pub timesteps: Vec<usize>,
    pub sigma_rule: SigmaRule,
}

/// The strided subset 1, 1+n, 1+2n, ..., 1+kn with k maximal such that
/// 1 + kn <= T.
pub fn strided_subset(horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if stride < 1 || stride > horizon {
        return Err(CoreError::plan(format!(
            "stride {stride} outside 1..={horizon}"
        )));
    }
    Ok((1..=horizon).step_by(stride).collect())
}

impl SamplerPlan {
    /// Full ancestral chain over every timestep.
    pub fn ddpm_full(horizon: usize) -> Result<Self> {
        if horizon < 1 {
            return Err(CoreError::plan("horizon must be >= 1"));
        }
        Ok(Self {
            kind: PlanKind::DdpmFull,
            timesteps: (1..=horizon).collect(),
            sigma_rule: SigmaRule::DdpmEquivalent,
        })
    }

    /// Strided plan with the given sigma rule.
    pub fn ddim_strided(horizon: usize, stride: usize, sigma_rule: SigmaRule) -> Result<Self> {
        let plan = Self {
            kind: PlanKind::Ddim,
            timesteps: strided_subset(horizon, stride)?,
            sigma_rule,
        };
        plan.validate(horizon)?;
        Ok(plan)
    }

    /// Default inference plan: deterministic strided trajectory, 50 steps at
    /// the default horizon (stride T/50, floor 1).
    pub fn default_for(horizon: usize) -> Result<Self> {
        let stride = (horizon / 50).max(1);
        Self::ddim_strided(horizon, stride, SigmaRule::DeterministicZero)
    }

    /// Number of model evaluations a trajectory costs.
    pub fn num_evaluations(&self) -> usize {
        self.timesteps.len()
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(CoreError::plan("empty timestep subset"));
        }
        if *self.timesteps.first().unwrap() < 1 || *self.timesteps.last().unwrap() > horizon {
            return Err(CoreError::plan(format!(
                "timesteps must lie in 1..={horizon}"
            )));
        }
        if !self.timesteps.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::plan("timesteps must be strictly increasing"));
        }
        if let SigmaRule::Eta(eta) = self.sigma_rule {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(CoreError::plan(format!("eta must be >= 0, got {eta}")));
            }
        }
        if self.kind == PlanKind::DdpmFull {
            if self.timesteps.len() != horizon || self.timesteps[0] != 1 {
                return Err(CoreError::plan(
                    "full ancestral plan must visit every timestep 1..=T",
                ));
            }
            if self.sigma_rule != SigmaRule::DdpmEquivalent {
                return Err(CoreError::plan(
                    "full ancestral plan requires the DDPM-equivalent sigma rule",
                ));
            }
        }
        Ok(())
    }
}

/// Sigma for stepping from cumulative alpha `alpha_cur` (at the current, later
/// timestep) to `alpha_prev` (at the earlier one).
pub fn ddim_sigma(alpha_prev: f64, alpha_cur: f64, rule: SigmaRule) -> f64 {
    let ddpm_equiv = || {
        ((1.0 - alpha_prev) / (1.0 - alpha_cur)).sqrt() * (1.0 - alpha_cur / alpha_prev).sqrt()
    };
    match rule {
        SigmaRule::DdpmEquivalent => ddpm_equiv(),
        SigmaRule::DeterministicZero => 0.0,
        SigmaRule::Eta(eta) => eta * ddpm_equiv(),
    }
}

/// Deterministic part of the generalized reverse step:
/// `sqrt(alpha_prev) * x0_hat + sqrt(1 - alpha_prev - sigma^2) * eps_hat`.
pub fn ddim_mean(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t_cur: usize,
    t_prev: usize,
    sigma: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t_cur {
        return Err(CoreError::plan(format!(
            "step must go backward: t_prev {t_prev} >= t_cur {t_cur}"
        )));
    }
    let alpha_prev = schedule.alpha_cum_at(t_prev)?;
    let residual = 1.0 - alpha_prev - sigma * sigma;
    if residual < 0.0 {
        return Err(CoreError::plan(format!(
            "sigma {sigma} too large for alpha_prev {alpha_prev}"
        )));
    }
    let x0_hat = predict_x0_from_eps(x_t, eps_hat, t_cur, schedule)?;
    let (sp, sr) = (alpha_prev.sqrt(), residual.sqrt());
    let data: Vec<f64> = x0_hat
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x0, e)| sp * x0 + sr * e)
        .collect();
    Ok(Tensor::from_vec(x_t.shape(), data))
}

/// One generalized reverse step; adds `sigma * eps_new` on top of
/// [`ddim_mean`]. With `sigma == 0` no randomness is consumed at all.
pub fn ddim_step<R: Rng>(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t_cur: usize,
    t_prev: usize,
    sigma: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut out = ddim_mean(x_t, eps_hat, t_cur, t_prev, sigma, schedule)?;
    if sigma > 0.0 {
        let noise = standard_normal_vec(rng, out.numel());
        for (o, e) in out.data_mut().iter_mut().zip(&noise) {
            *o += sigma * e;
        }
    }
    Ok(out)
}

/// Posterior mean of the ancestral chain at timestep `t`:
/// `(x_t - beta_t / sqrt(1 - alpha_t) * eps_hat) / sqrt(1 - beta_t)`.
pub fn ddpm_ancestral_mean(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if x_t.shape() != eps_hat.shape() {
        return Err(CoreError::shape(format!(
            "x_t {:?} vs eps_hat {:?}",
            x_t.shape(),
            eps_hat.shape()
        )));
    }
    let beta = schedule.beta_at(t)?;
    let alpha = schedule.alpha_cum_at(t)?;
    let coef = beta / (1.0 - alpha).sqrt();
    let inv = 1.0 / (1.0 - beta).sqrt();
    let data: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| inv * (x - coef * e))
        .collect();
    Ok(Tensor::from_vec(x_t.shape(), data))
}

/// Posterior noise scale of the ancestral chain at timestep `t`
/// (sqrt of `(1 - alpha_{t-1}) / (1 - alpha_t) * beta_t`).
pub fn ddpm_posterior_sigma(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    let beta = schedule.beta_at(t)?;
    let alpha = schedule.alpha_cum_at(t)?;
    let alpha_prev = schedule.alpha_cum_prev(t)?;
    Ok(((1.0 - alpha_prev) / (1.0 - alpha) * beta).sqrt())
}

/// One ancestral step: posterior mean plus posterior-sigma noise for t > 1;
/// the final step (t = 1) adds no noise so the returned mean is unbiased.
pub fn ddpm_ancestral_step<R: Rng>(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut out = ddpm_ancestral_mean(x_t, eps_hat, t, schedule)?;
    if t > 1 {
        let sigma = ddpm_posterior_sigma(t, schedule)?;
        let noise = standard_normal_vec(rng, out.numel());
        for (o, e) in out.data_mut().iter_mut().zip(&noise) {
            *o += sigma * e;
        }
    }
    Ok(out)
}

/// Anything that predicts the injected noise from (state, condition, t).
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, condition: &ConditionTensor, t: usize) -> Result<Tensor>;
}

/// Run a full reverse trajectory: draw x_T ~ N(0, I), walk the plan's
/// timesteps in descending order, and close with the clean-field
/// reconstruction below the smallest visited timestep.
///
/// Invokes the model exactly `plan.num_evaluations()` times. Reentrant: no
/// state beyond the provided rng is mutated.
pub fn generate<R: Rng>(
    model: &dyn NoisePredictor,
    condition: &ConditionTensor,
    plan: &SamplerPlan,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    plan.validate(schedule.num_steps())?;
    let (h, w) = condition.spatial_dims();
    let shape = [3usize, h, w];
    let mut x = Tensor::from_vec(&shape, standard_normal_vec(rng, 3 * h * w));
    for k in (1..plan.timesteps.len()).rev() {
        let (t_cur, t_prev) = (plan.timesteps[k], plan.timesteps[k - 1]);
        let eps_hat = model.predict_noise(&x, condition, t_cur)?;
        if eps_hat.shape() != x.shape() {
            return Err(CoreError::inference(format!(
                "model output {:?} does not match state {:?}",
                eps_hat.shape(),
                x.shape()
            )));
        }
        x = match plan.kind {
            PlanKind::DdpmFull => ddpm_ancestral_step(&x, &eps_hat, t_cur, schedule, rng)?,
            PlanKind::Ddim => {
                let alpha_prev = schedule.alpha_cum_at(t_prev)?;
                let alpha_cur = schedule.alpha_cum_at(t_cur)?;
                let sigma = ddim_sigma(alpha_prev, alpha_cur, plan.sigma_rule);
                ddim_step(&x, &eps_hat, t_cur, t_prev, sigma, schedule, rng)?
            }
        };
    }
    // closing reconstruction at the smallest visited timestep
    let t0 = plan.timesteps[0];
    let eps_hat = model.predict_noise(&x, condition, t0)?;
    predict_x0_from_eps(&x, &eps_hat, t0, schedule)
}
