//! Group Relative Policy Optimization over sampler rollouts.
//!
//! A group of G images is sampled from the old policy for one (prompt,
//! subject) condition. Each reward is standardized against the group's mean
//! and population standard deviation to give advantages. The objective is
//! the clipped importance-ratio surrogate minus a per-token KL penalty to a
//! frozen reference policy, normalized by the total token count of the
//! group; gradients ascend it.
//!
//! KL uses the k3 estimator rho - ln(rho) - 1 with rho = p_ref / p_current,
//! which is nonnegative and zero exactly when the policies agree on the
//! sampled token.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::forward::{self, forward_cached, PlanView};
use crate::layout::SequencePlan;
use crate::math;
use crate::model::{Model, Tensors};
use crate::sampler::Rollout;
use crate::tokenizer::ScaleSchedule;

#[derive(Debug, Clone)]
pub struct GrpoConfig {
    /// Rollouts per group.
    pub group_size: usize,
    /// Clipping half-width for the importance ratio.
    pub clip_eps: f64,
    /// Weight of the KL penalty toward the reference policy.
    pub kl_beta: f64,
    /// Adam learning rate (desk-scale default; the reference recipe's rate
    /// targets a far larger model).
    pub lr: f64,
    /// Optimizer passes per rollout batch. Ratios start at 1, so clipping
    /// only activates with more than one epoch.
    pub inner_epochs: usize,
    /// Lower bound on the advantage-normalizing standard deviation.
    pub adv_std_guard: f64,
    /// Sampling temperature for rollouts.
    pub temperature: f64,
    /// Top-k for rollouts; 0 means the full vocabulary, keeping stored
    /// log-probabilities exact policy probabilities.
    pub top_k: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            lr: 5e-5,
            inner_epochs: 1,
            adv_std_guard: 1e-8,
            temperature: 1.0,
            top_k: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GrpoError {
    GroupTooSmall(usize),
    NonFinite(String),
    Mismatch(String),
}

impl fmt::Display for GrpoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrpoError::GroupTooSmall(g) => write!(f, "group size {g} < 2"),
            GrpoError::NonFinite(m) => write!(f, "non-finite value in {m}"),
            GrpoError::Mismatch(m) => write!(f, "mismatched group data: {m}"),
        }
    }
}

/// Standardizes rewards against group statistics (population standard
/// deviation, guarded below by `std_guard`). Equal rewards give all zeros.
pub fn advantages(rewards: &[f64], std_guard: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite("rewards".to_string()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = math::sqrt(var).max(std_guard);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// k3 KL estimate for one token: rho - ln(rho) - 1, rho = exp(logp_ref -
/// logp_current). Nonnegative; zero iff the log-probabilities agree.
pub fn kl_per_token(logp_current: f64, logp_ref: f64) -> Result<f64, GrpoError> {
    if !logp_current.is_finite() || !logp_ref.is_finite() {
        return Err(GrpoError::NonFinite("log-probabilities".to_string()));
    }
    let diff = logp_ref - logp_current;
    Ok(math::exp(diff) - diff - 1.0)
}

/// Clipped surrogate for one token: min(r*A, clip(r, 1-eps, 1+eps)*A) with
/// r = exp(logp_current - logp_old).
pub fn surrogate_term(advantage: f64, logp_current: f64, logp_old: f64, eps: f64) -> f64 {
    let r = math::exp(logp_current - logp_old);
    let unclipped = r * advantage;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * advantage;
    unclipped.min(clipped)
}

/// d(surrogate)/d(logp_current). Zero when the clip saturates.
fn surrogate_grad(advantage: f64, logp_current: f64, logp_old: f64, eps: f64) -> f64 {
    let r = math::exp(logp_current - logp_old);
    let unclipped = r * advantage;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        r * advantage
    } else if r > 1.0 - eps && r < 1.0 + eps {
        r * advantage
    } else {
        0.0
    }
}

/// Contribution of one rollout to the group objective, before the group
/// normalization: sum over tokens of (surrogate - beta * KL), its gradient
/// with respect to every parameter, and the KL sum for logging.
pub struct RolloutObjective {
    pub sum_objective: f64,
    pub kl_sum: f64,
    pub n_tokens: usize,
    pub grads: Tensors,
}

/// Scores one rollout under the current policy and accumulates its objective
/// terms and gradients. `logp_ref` must align with the rollout's flattened
/// token order.
pub fn rollout_objective(
    model: &Model,
    plan: &SequencePlan,
    schedule: &ScaleSchedule,
    rollout: &Rollout,
    advantage: f64,
    logp_ref: &[f64],
    config: &GrpoConfig,
) -> Result<RolloutObjective, GrpoError> {
    let view = PlanView::new(plan, schedule, &model.config)
        .map_err(|e| GrpoError::Mismatch(format!("{e}")))?;
    let inputs = forward::assemble_inputs(plan, schedule, &rollout.subject, &rollout.text, &rollout.tokens.maps)
        .map_err(|e| GrpoError::Mismatch(format!("{e}")))?;
    let flat = rollout.tokens.flatten();
    let n = flat.len();
    if rollout.logprobs_old.len() != n || logp_ref.len() != n || view.loss_positions.len() != n {
        return Err(GrpoError::Mismatch(
            "token/logprob counts disagree with the plan".to_string(),
        ));
    }
    let (logits, cache) = forward_cached(model, &view, &inputs, &view.loss_positions)
        .map_err(|e| GrpoError::NonFinite(format!("{e}")))?;

    let vocab = logits.vocab;
    let mut sum_objective = 0.0;
    let mut kl_sum = 0.0;
    let mut dlogits = forward::Logits {
        positions: logits.positions.clone(),
        vocab,
        data: alloc::vec![0.0; n * vocab],
    };
    for t in 0..n {
        let row = logits.row(t);
        let lse = math::logsumexp(row);
        let chosen = flat[t] as usize;
        let logp_cur = row[chosen] - lse;
        let logp_old = rollout.logprobs_old[t];
        let surr = surrogate_term(advantage, logp_cur, logp_old, config.clip_eps);
        let kl = kl_per_token(logp_cur, logp_ref[t])?;
        sum_objective += surr - config.kl_beta * kl;
        kl_sum += kl;
        // d(objective)/d(logp_cur), then through the log-softmax.
        let rho = math::exp(logp_ref[t] - logp_cur);
        let dobj_dlogp =
            surrogate_grad(advantage, logp_cur, logp_old, config.clip_eps)
                - config.kl_beta * (1.0 - rho);
        let drow = &mut dlogits.data[t * vocab..(t + 1) * vocab];
        for j in 0..vocab {
            drow[j] = -dobj_dlogp * math::exp(row[j] - lse);
        }
        drow[chosen] += dobj_dlogp;
    }
    if !sum_objective.is_finite() {
        return Err(GrpoError::NonFinite("objective".to_string()));
    }
    let grads = forward::backward(model, &view, &cache, &dlogits);
    Ok(RolloutObjective {
        sum_objective,
        kl_sum,
        n_tokens: n,
        grads,
    })
}

/// A complete rollout group with rewards and reference log-probabilities.
pub struct RolloutGroup {
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    /// (subject reward, semantic reward) per rollout, for logging.
    pub reward_parts: Vec<(f64, f64)>,
    pub logp_ref: Vec<Vec<f64>>,
}

impl RolloutGroup {
    pub fn total_tokens(&self) -> usize {
        self.rollouts.iter().map(|r| r.len()).sum()
    }
}

/// Full group objective J and its ascent gradient: J = sum_i sum_t
/// (surrogate - beta*KL) / sum_i |o_i|. Also returns the mean per-token KL.
pub fn grpo_objective(
    model: &Model,
    plan: &SequencePlan,
    schedule: &ScaleSchedule,
    group: &RolloutGroup,
    config: &GrpoConfig,
) -> Result<(f64, Tensors, f64), GrpoError> {
    let g = group.rollouts.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    if group.rewards.len() != g || group.logp_ref.len() != g {
        return Err(GrpoError::Mismatch("group member counts".to_string()));
    }
    let advs = advantages(&group.rewards, config.adv_std_guard)?;
    let total_tokens = group.total_tokens() as f64;
    let mut j_sum = 0.0;
    let mut kl_total = 0.0;
    let mut grads: Option<Tensors> = None;
    for i in 0..g {
        let part = rollout_objective(
            model,
            plan,
            schedule,
            &group.rollouts[i],
            advs[i],
            &group.logp_ref[i],
            config,
        )?;
        j_sum += part.sum_objective;
        kl_total += part.kl_sum;
        match &mut grads {
            None => grads = Some(part.grads),
            Some(acc) => acc.add_assign(&part.grads),
        }
    }
    let mut grads = grads.unwrap();
    grads.scale(1.0 / total_tokens);
    let j = j_sum / total_tokens;
    if !j.is_finite() {
        return Err(GrpoError::NonFinite("group objective".to_string()));
    }
    Ok((j, grads, kl_total / total_tokens))
}
