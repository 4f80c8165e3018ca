//! Group-relative advantages and the clipped surrogate loss.

use serde::{Deserialize, Serialize};

use crate::grpo::GrpoError;

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoParams {
    /// Ratio clip half-width.
    pub clip_delta: f64,
    /// Weight of the KL penalty towards the reference policy.
    pub kl_coeff: f64,
    /// Weight of the entropy bonus.
    pub entropy_coeff: f64,
    /// Rollouts per starting state.
    pub group_size: usize,
    /// Stabilizer added to the advantage denominator.
    pub eps_adv: f64,
}

impl Default for GrpoParams {
    fn default() -> Self {
        Self {
            clip_delta: 0.2,
            kl_coeff: 0.005,
            entropy_coeff: 0.0005,
            group_size: 8,
            eps_adv: 1e-6,
        }
    }
}

impl GrpoParams {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let checks = [
            (
                self.clip_delta > 0.0 && self.clip_delta < 1.0,
                "clip_delta in (0, 1)",
            ),
            (self.kl_coeff >= 0.0, "kl_coeff >= 0"),
            (self.entropy_coeff >= 0.0, "entropy_coeff >= 0"),
            (self.group_size >= 2, "group_size >= 2"),
            (self.eps_adv > 0.0, "eps_adv > 0"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(GrpoError::InvalidParams(what.to_string()));
            }
        }
        Ok(())
    }
}

/// Rewards of one rollout group with their normalized advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
    pub eps_adv: f64,
}

/// Normalizes a reward group into advantages `(r_i - mu) / (sigma + eps)`.
///
/// Constant groups — mastered or hopeless alike — normalize to all-zero
/// advantages and therefore carry no policy gradient.
pub fn advantages(rewards: &[f64], eps_adv: f64) -> Result<AdvantageGroup, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite("rewards"));
    }
    if !(eps_adv > 0.0) {
        return Err(GrpoError::InvalidParams(format!(
            "eps_adv {eps_adv} must be positive"
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let variance = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = variance.sqrt();
    let advantages = rewards.iter().map(|r| (r - mean) / (std + eps_adv)).collect();
    Ok(AdvantageGroup {
        rewards: rewards.to_vec(),
        mean,
        std,
        advantages,
        eps_adv,
    })
}

/// Value and exact gradient of the loss for one group (or one flat batch of
/// pre-normalized samples — the loss is a plain per-sample mean).
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoLoss {
    /// The full loss to minimize.
    pub total: f64,
    /// Mean clipped surrogate objective (to be maximized; enters negated).
    pub surrogate: f64,
    /// Mean KL estimate against the reference policy.
    pub kl: f64,
    /// Entropy estimate: mean of `-log pi(y_i | x_i)` over the sampled
    /// actions. Its expectation is the policy entropy; the closed-form
    /// per-context entropy is available separately for diagnostics.
    pub entropy: f64,
    /// d total / d new_logprobs[i].
    pub grad_new_logprobs: Vec<f64>,
    /// The surrogate (policy-gradient) component of the gradient alone;
    /// exactly zero for all-equal reward groups.
    pub policy_grad_component: Vec<f64>,
}

/// Clipped-ratio surrogate with KL penalty and entropy bonus, as a loss:
///
/// ```text
/// L = -(1/n) sum_i min(rho_i * A_i, clip(rho_i, 1 - d, 1 + d) * A_i)
///     + b_kl * (1/n) sum_i (exp(ref_i - new_i) - (ref_i - new_i) - 1)
///     - b_h  * (1/n) sum_i (-new_i)
/// ```
///
/// with `rho_i = exp(new_i - old_i)`. The KL term uses the non-negative
/// per-sample estimator `exp(d) - d - 1 >= 0`. The returned gradient with
/// respect to `new_logprobs` is exact for this expression.
pub fn grpo_loss(
    new_logprobs: &[f64],
    old_logprobs: &[f64],
    ref_logprobs: &[f64],
    adv: &AdvantageGroup,
    params: &GrpoParams,
) -> Result<GrpoLoss, GrpoError> {
    params.validate()?;
    let n = adv.advantages.len();
    for (list, name) in [
        (new_logprobs, "new_logprobs"),
        (old_logprobs, "old_logprobs"),
        (ref_logprobs, "ref_logprobs"),
    ] {
        if list.len() != n {
            return Err(GrpoError::LengthMismatch {
                expected: n,
                got: list.len(),
            });
        }
        if list.iter().any(|v| !v.is_finite()) {
            return Err(GrpoError::NonFinite(name));
        }
    }

    let inv_n = 1.0 / n as f64;
    let delta = params.clip_delta;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut entropy = 0.0;
    let mut grad = vec![0.0; n];
    let mut policy_grad = vec![0.0; n];

    for i in 0..n {
        let a = adv.advantages[i];
        let rho = (new_logprobs[i] - old_logprobs[i]).exp();
        let unclipped = rho * a;
        let clipped = rho.clamp(1.0 - delta, 1.0 + delta) * a;
        let (term, dterm) = if unclipped <= clipped {
            // Active branch is the raw ratio; d(rho * a)/d new = rho * a.
            (unclipped, rho * a)
        } else {
            // The clipped branch is active only when the ratio sits outside
            // the band, where the clamp has zero derivative.
            (clipped, 0.0)
        };
        surrogate += term;

        let d = ref_logprobs[i] - new_logprobs[i];
        kl += d.exp() - d - 1.0;
        let dkl = 1.0 - d.exp();

        entropy += -new_logprobs[i];

        policy_grad[i] = -dterm * inv_n;
        grad[i] = policy_grad[i] + params.kl_coeff * dkl * inv_n + params.entropy_coeff * inv_n;
    }
    surrogate *= inv_n;
    kl *= inv_n;
    entropy *= inv_n;

    Ok(GrpoLoss {
        total: -surrogate + params.kl_coeff * kl - params.entropy_coeff * entropy,
        surrogate,
        kl,
        entropy,
        grad_new_logprobs: grad,
        policy_grad_component: policy_grad,
    })
}
