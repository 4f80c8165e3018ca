//! The learner update: batch gradient of the loss through the policy,
//! global-norm clipping, and an adaptive-moment step with decoupled weight
//! decay.

use serde::{Deserialize, Serialize};

use crate::grpo::loss::{grpo_loss, AdvantageGroup, GrpoParams};
use crate::grpo::policy::{log_softmax, ContextFeatures, ToyPolicy, FEATURE_DIM};
use crate::grpo::GrpoError;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled (weight-decay-style) regularization coefficient.
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip_norm: f64,
    /// Denominator stabilizer of the moment step.
    pub epsilon: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerParams {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let checks = [
            (self.learning_rate > 0.0, "learning_rate > 0"),
            ((0.0..1.0).contains(&self.beta1), "beta1 in [0, 1)"),
            ((0.0..1.0).contains(&self.beta2), "beta2 in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay >= 0"),
            (self.grad_clip_norm > 0.0, "grad_clip_norm > 0"),
            (self.epsilon > 0.0, "epsilon > 0"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(GrpoError::InvalidParams(what.to_string()));
            }
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub params: OptimizerParams,
}

impl OptimizerState {
    pub fn new(param_len: usize, params: OptimizerParams) -> Result<Self, GrpoError> {
        params.validate()?;
        Ok(Self {
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
            step_count: 0,
            params,
        })
    }

    pub fn for_policy(policy: &ToyPolicy, params: OptimizerParams) -> Result<Self, GrpoError> {
        Self::new(policy.params().len(), params)
    }
}

/// One training sample: a context, the action taken, the log-probabilities
/// recorded at rollout time, and the group-normalized advantage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: ContextFeatures,
    pub action: usize,
    pub old_logprob: f64,
    pub ref_logprob: f64,
    pub advantage: f64,
}

/// Outcome of one learner update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    /// False when a non-finite gradient aborted the step.
    pub applied: bool,
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub entropy: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub version: u64,
}

/// Scalar loss of a batch under the given policy parameters; the
/// finite-difference oracle in the tests differentiates exactly this.
#[cfg(test)]
fn batch_loss(
    policy: &ToyPolicy,
    batch: &[TrainingSample],
    params: &GrpoParams,
) -> Result<f64, GrpoError> {
    let (new, old, refs, adv): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) = {
        let mut new = Vec::with_capacity(batch.len());
        let mut old = Vec::with_capacity(batch.len());
        let mut refs = Vec::with_capacity(batch.len());
        let mut adv = Vec::with_capacity(batch.len());
        for sample in batch {
            new.push(policy.log_prob(&sample.features, sample.action)?);
            old.push(sample.old_logprob);
            refs.push(sample.ref_logprob);
            adv.push(sample.advantage);
        }
        (new, old, refs, adv)
    };
    let group = AdvantageGroup {
        rewards: vec![0.0; adv.len()],
        mean: 0.0,
        std: 0.0,
        advantages: adv,
        eps_adv: params.eps_adv,
    };
    Ok(grpo_loss(&new, &old, &refs, &group, params)?.total)
}

/// Accumulates the loss gradient over the batch, clips it at the global
/// norm, and applies one adaptive-moment step with decoupled weight decay.
/// The policy version increments iff the step is applied.
pub fn update(
    policy: &mut ToyPolicy,
    opt: &mut OptimizerState,
    batch: &[TrainingSample],
    params: &GrpoParams,
) -> Result<UpdateReport, GrpoError> {
    params.validate()?;
    if batch.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    if batch.iter().any(|s| !s.advantage.is_finite()) {
        return Err(GrpoError::NonFinite("advantages"));
    }

    // Forward pass: temperature-1 log-probs and full distributions.
    let actions = policy.actions();
    let mut new_lp = Vec::with_capacity(batch.len());
    let mut dists = Vec::with_capacity(batch.len());
    for sample in batch {
        if sample.action >= actions {
            return Err(GrpoError::ActionOutOfRange {
                action: sample.action,
                actions,
            });
        }
        let logits = policy.logits(&sample.features)?;
        let log_probs = log_softmax(&logits);
        new_lp.push(log_probs[sample.action]);
        dists.push(log_probs.iter().map(|lp| lp.exp()).collect::<Vec<f64>>());
    }
    let old: Vec<f64> = batch.iter().map(|s| s.old_logprob).collect();
    let refs: Vec<f64> = batch.iter().map(|s| s.ref_logprob).collect();
    let adv_values: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
    let group = AdvantageGroup {
        rewards: vec![0.0; adv_values.len()],
        mean: 0.0,
        std: 0.0,
        advantages: adv_values,
        eps_adv: params.eps_adv,
    };
    let loss = grpo_loss(&new_lp, &old, &refs, &group, params)?;

    // Backward pass: d new_lp / d logit_j = (1[j = a] - p_j), then the outer
    // product with the feature vector.
    let mut grad = vec![0.0; policy.params().len()];
    for (i, sample) in batch.iter().enumerate() {
        let upstream = loss.grad_new_logprobs[i];
        if upstream == 0.0 {
            continue;
        }
        let phi = sample.features.as_slice();
        let probs = &dists[i];
        for j in 0..actions {
            let indicator = if j == sample.action { 1.0 } else { 0.0 };
            let dlogit = upstream * (indicator - probs[j]);
            if dlogit == 0.0 {
                continue;
            }
            let row = &mut grad[j * FEATURE_DIM..(j + 1) * FEATURE_DIM];
            for (g, x) in row.iter_mut().zip(phi) {
                *g += dlogit * x;
            }
        }
    }

    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut report = UpdateReport {
        applied: false,
        loss: loss.total,
        surrogate: loss.surrogate,
        kl: loss.kl,
        entropy: loss.entropy,
        grad_norm,
        version: policy.version(),
    };
    if !grad_norm.is_finite() {
        return Ok(report);
    }
    if grad_norm > opt.params.grad_clip_norm {
        let scale = opt.params.grad_clip_norm / grad_norm;
        for g in &mut grad {
            *g *= scale;
        }
    }

    let o = opt.params;
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let bias1 = 1.0 - o.beta1.powi(t);
    let bias2 = 1.0 - o.beta2.powi(t);
    let weights = policy.params_mut();
    for i in 0..weights.len() {
        let g = grad[i];
        opt.first_moment[i] = o.beta1 * opt.first_moment[i] + (1.0 - o.beta1) * g;
        opt.second_moment[i] = o.beta2 * opt.second_moment[i] + (1.0 - o.beta2) * g * g;
        let m_hat = opt.first_moment[i] / bias1;
        let v_hat = opt.second_moment[i] / bias2;
        weights[i] -=
            o.learning_rate * (m_hat / (v_hat.sqrt() + o.epsilon) + o.weight_decay * weights[i]);
    }
    policy.bump_version();
    report.applied = true;
    report.version = policy.version();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::TaskKind;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn test_opt_params() -> OptimizerParams {
        OptimizerParams {
            learning_rate: 0.01,
            ..OptimizerParams::default()
        }
    }

    fn sample(kind: TaskKind, action: usize, advantage: f64) -> TrainingSample {
        let features = ContextFeatures::new(kind, 0.4, 1, 0.2);
        TrainingSample {
            features,
            action,
            old_logprob: -(3.0f64.ln()),
            ref_logprob: -(3.0f64.ln()),
            advantage,
        }
    }

    #[test]
    fn zero_gradient_batch_decays_weights_only() {
        // Zero advantages, new = old = ref at a uniform policy: the batch
        // gradient is exactly zero, so the step is pure weight decay scaled
        // by lr (and here the weights start at zero, so nothing moves).
        let mut policy = ToyPolicy::new(3).unwrap();
        let mut opt = OptimizerState::for_policy(&policy, test_opt_params()).unwrap();
        let params = GrpoParams {
            kl_coeff: 0.0,
            entropy_coeff: 0.0,
            ..GrpoParams::default()
        };
        let batch = vec![sample(TaskKind::Draft, 0, 0.0), sample(TaskKind::Draft, 1, 0.0)];
        let report = update(&mut policy, &mut opt, &batch, &params).unwrap();
        assert!(report.applied);
        assert_eq!(report.grad_norm, 0.0);
        assert!(policy.params().iter().all(|&w| w == 0.0));

        // Seed a non-zero weight and repeat: only the decay term moves it.
        policy.params_mut()[0] = 1.0;
        let before = policy.params()[0];
        update(&mut policy, &mut opt, &batch, &params).unwrap();
        let after = policy.params()[0];
        let expected = before - test_opt_params().learning_rate * 0.1 * before;
        assert!((after - expected).abs() < 1e-15);
    }

    #[test]
    fn updates_are_bitwise_deterministic() {
        let params = GrpoParams::default();
        let make = || {
            let mut policy = ToyPolicy::new(4).unwrap();
            let mut opt = OptimizerState::for_policy(&policy, test_opt_params()).unwrap();
            let batch: Vec<TrainingSample> = (0..8)
                .map(|i| sample(TaskKind::Improve, i % 4, (i as f64 - 3.5) / 2.0))
                .collect();
            for _ in 0..5 {
                update(&mut policy, &mut opt, &batch, &params).unwrap();
            }
            policy
        };
        let a = make();
        let b = make();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.version(), 5);
    }

    #[test]
    fn version_increments_once_per_update() {
        let mut policy = ToyPolicy::new(3).unwrap();
        let mut opt = OptimizerState::for_policy(&policy, test_opt_params()).unwrap();
        let batch = vec![sample(TaskKind::Debug, 0, 1.0), sample(TaskKind::Debug, 1, -1.0)];
        assert_eq!(policy.version(), 0);
        update(&mut policy, &mut opt, &batch, &GrpoParams::default()).unwrap();
        assert_eq!(policy.version(), 1);
        update(&mut policy, &mut opt, &batch, &GrpoParams::default()).unwrap();
        assert_eq!(policy.version(), 2);
    }

    #[test]
    fn adam_step_matches_hand_computation() {
        // Single weight path: g known, first step has m_hat = g and
        // v_hat = g^2, so the step is lr * (g / (|g| + eps) + wd * w).
        let mut policy = ToyPolicy::new(2).unwrap();
        let o = OptimizerParams {
            learning_rate: 0.5,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.0,
            grad_clip_norm: 1e9,
            epsilon: 1e-8,
        };
        let mut opt = OptimizerState::for_policy(&policy, o).unwrap();
        // One sample, action 0, advantage +1, everything else neutral:
        // gradient of the surrogate w.r.t. each weight is computable by the
        // loss's own gradient test; here we just check the Adam mechanics by
        // reproducing the first step from the raw gradient.
        let batch = vec![sample(TaskKind::Draft, 0, 1.0)];
        let params = GrpoParams {
            kl_coeff: 0.0,
            entropy_coeff: 0.0,
            ..GrpoParams::default()
        };

        // Recover the raw gradient by finite differences at the start point.
        let grads: Vec<f64> = (0..policy.params().len())
            .map(|i| fd_param_grad(&policy, &batch, &params, i, 1e-6))
            .collect();
        let norm: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();

        update(&mut policy, &mut opt, &batch, &params).unwrap();
        for (i, &g) in grads.iter().enumerate() {
            let clipped = if norm > o.grad_clip_norm {
                g * o.grad_clip_norm / norm
            } else {
                g
            };
            // Below the finite-difference noise floor the true gradient is
            // exactly zero and the moment step moves nothing.
            let expected = if clipped.abs() < 1e-7 {
                0.0
            } else {
                -o.learning_rate * clipped / (clipped.abs() + o.epsilon)
            };
            assert!(
                (policy.params()[i] - expected).abs() < 1e-4,
                "weight {i}: {} vs {}",
                policy.params()[i],
                expected
            );
        }
    }

    /// Central difference of the batch loss with respect to policy weight
    /// `i`, through the full forward pass.
    fn fd_param_grad(
        policy: &ToyPolicy,
        batch: &[TrainingSample],
        params: &GrpoParams,
        i: usize,
        h: f64,
    ) -> f64 {
        let mut plus = policy.clone();
        plus.params_mut()[i] += h;
        let mut minus = policy.clone();
        minus.params_mut()[i] -= h;
        let f_plus = batch_loss(&plus, batch, params).unwrap();
        let f_minus = batch_loss(&minus, batch, params).unwrap();
        (f_plus - f_minus) / (2.0 * h)
    }

    #[test]
    fn analytic_parameter_gradient_matches_finite_differences() {
        // Randomized policies and batches; the accumulated analytic gradient
        // (recovered from a clip-free update step) must match central
        // differences elementwise.
        let mut rng = stream_rng(99, "fd-check", 0, 0);
        let grpo = GrpoParams::default();
        for trial in 0..10u64 {
            let mut policy = ToyPolicy::new(5).unwrap();
            for w in policy.params_mut() {
                *w = rng.random_range(-0.8..0.8);
            }
            let batch: Vec<TrainingSample> = (0..16)
                .map(|_| {
                    let kind = TaskKind::ALL[rng.random_range(0..3)];
                    let depth = match kind {
                        TaskKind::Draft => 0,
                        _ => rng.random_range(1..6),
                    };
                    let features = ContextFeatures::new(
                        kind,
                        rng.random_range(0.0..1.0),
                        depth,
                        rng.random_range(-1.0..1.0),
                    );
                    let action = rng.random_range(0..5);
                    let near = policy.log_prob(&features, action).unwrap();
                    TrainingSample {
                        features,
                        action,
                        old_logprob: near + rng.random_range(-0.3..0.3),
                        ref_logprob: near + rng.random_range(-0.3..0.3),
                        advantage: rng.random_range(-2.0..2.0),
                    }
                })
                .collect();

            let analytic = analytic_param_grad(&policy, &batch, &grpo);
            for i in 0..policy.params().len() {
                let fd = fd_param_grad(&policy, &batch, &grpo, i, 1e-5);
                let scale = analytic[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic[i] - fd).abs() / scale < 1e-4,
                    "trial {trial} weight {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        }
    }

    /// Extracts the accumulated analytic gradient by running the same
    /// forward/backward as `update` without touching the optimizer.
    fn analytic_param_grad(
        policy: &ToyPolicy,
        batch: &[TrainingSample],
        params: &GrpoParams,
    ) -> Vec<f64> {
        let mut probe = policy.clone();
        let huge_lr_free = OptimizerParams {
            learning_rate: 1.0,
            beta1: 0.0,
            beta2: 0.0,
            weight_decay: 0.0,
            grad_clip_norm: f64::INFINITY,
            ..OptimizerParams::default()
        };
        // With beta1 = beta2 = 0 and no decay, one step moves each weight by
        // -lr * g / (|g| + eps); recover g's sign and magnitude instead by
        // reading the moments.
        let mut opt = OptimizerState::for_policy(&probe, huge_lr_free).unwrap();
        update(&mut probe, &mut opt, batch, params).unwrap();
        opt.first_moment
    }

    #[test]
    fn gradient_norm_is_clipped_at_the_global_bound() {
        let mut policy = ToyPolicy::new(3).unwrap();
        let o = OptimizerParams {
            learning_rate: 1.0,
            grad_clip_norm: 0.05,
            weight_decay: 0.0,
            ..OptimizerParams::default()
        };
        let mut opt = OptimizerState::for_policy(&policy, o).unwrap();
        let batch: Vec<TrainingSample> = (0..4)
            .map(|i| sample(TaskKind::Draft, i % 3, if i % 2 == 0 { 3.0 } else { -3.0 }))
            .collect();
        let report = update(&mut policy, &mut opt, &batch, &GrpoParams::default()).unwrap();
        assert!(report.grad_norm > 0.05); // pre-clip norm reported
        let applied_norm: f64 = opt
            .first_moment
            .iter()
            .map(|m| (m / 0.1) * (m / 0.1)) // first step: m = (1 - beta1) * g
            .sum::<f64>()
            .sqrt();
        assert!(applied_norm <= 0.05 + 1e-12);
    }

    #[test]
    fn non_finite_advantage_is_rejected_and_empty_batch_errors() {
        let mut policy = ToyPolicy::new(3).unwrap();
        let mut opt = OptimizerState::for_policy(&policy, test_opt_params()).unwrap();
        let err = update(&mut policy, &mut opt, &[], &GrpoParams::default()).unwrap_err();
        assert_eq!(err, GrpoError::EmptyBatch);
        let bad = vec![sample(TaskKind::Draft, 0, f64::NAN)];
        let err = update(&mut policy, &mut opt, &bad, &GrpoParams::default()).unwrap_err();
        assert_eq!(err, GrpoError::NonFinite("advantages"));
        assert_eq!(policy.version(), 0);
    }
}
