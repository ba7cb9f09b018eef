//! Recurrent proximal policy optimization over recorded transition batches.
//!
//! Batches store raw policy inputs (frame features and detector confidences)
//! rather than embeddings, so replays run the exact same forward pass as the
//! rollout — through the input encoders and the recurrent core — and the
//! importance ratio is exactly one when parameters have not changed.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::numerics::{Element, Optimizer, Tape, Tensor};
use crate::policy::PolicyNet;
use crate::rng::Rng;

/// Hyperparameters of the policy optimization loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Total environment steps to collect across all streams.
    pub total_steps: usize,
    /// Steps each stream contributes between updates.
    pub horizon: usize,
    /// Optimization epochs over each collected batch.
    pub epochs: usize,
    /// Sequences per gradient step.
    pub minibatch_size: usize,
    /// Clipping half-width for the importance ratio.
    pub clip_ratio: f64,
    /// Discount factor.
    pub gamma: f64,
    /// Generalized advantage estimation decay.
    pub lambda: f64,
    pub action_loss_weight: f64,
    pub value_loss_weight: f64,
    /// Weight of the entropy bonus (subtracted from the loss).
    pub entropy_weight: f64,
    pub learning_rate: f64,
    /// Parallel episode streams collecting transitions.
    pub streams: usize,
    /// Update cycles between held-out probes of the policy.
    pub probe_every: usize,
    /// Update cycles between training-log records.
    pub log_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            total_steps: 200_000,
            horizon: 40,
            epochs: 4,
            minibatch_size: 8,
            clip_ratio: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            action_loss_weight: 1.0,
            value_loss_weight: 0.5,
            entropy_weight: 0.2,
            learning_rate: 3e-4,
            streams: 8,
            probe_every: 25,
            log_every: 5,
        }
    }
}

impl PpoConfig {
    /// Full-scale schedule: the same 4-epochs-per-40-step structure run for
    /// 42 million steps at a lower learning rate.
    pub fn paper() -> Self {
        PpoConfig { total_steps: 42_000_000, learning_rate: 1e-4, ..Default::default() }
    }

    /// Benchmark schedule: long enough for the exit policy to move from
    /// exiting at the first frame to waiting for detector evidence on the
    /// desk-preset dataset (about half a minute on one CPU core).
    pub fn desk() -> Self {
        PpoConfig { total_steps: 320_000, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("horizon", self.horizon),
            ("epochs", self.epochs),
            ("minibatch_size", self.minibatch_size),
            ("streams", self.streams),
            ("probe_every", self.probe_every),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("ppo {name} must be at least 1")));
            }
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::Config(format!(
                "clip_ratio must lie in (0, 1), got {}",
                self.clip_ratio
            )));
        }
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("action_loss_weight", self.action_loss_weight),
            ("value_loss_weight", self.value_loss_weight),
            ("entropy_weight", self.entropy_weight),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One recorded environment transition. Keeps the raw inputs so a replay can
/// re-encode them and flow gradients into the input encoders.
#[derive(Debug, Clone)]
pub struct TransitionStep<E: Element> {
    /// Frame index within the clip.
    pub t: usize,
    /// `(1, feature_dim)` frame feature observed at `t`.
    pub frame: Tensor<E>,
    /// Detector confidences at `t`.
    pub confidences: [E; 2],
    pub action: Action,
    /// Log-probability of `action` under the collecting parameters.
    pub log_prob: E,
    /// Critic value estimate under the collecting parameters.
    pub value: E,
    pub reward: f64,
    /// True when the episode terminated at this transition.
    pub done: bool,
}

/// Consecutive transitions from a single episode, replayed from
/// `initial_hidden`. Sequences never span episode boundaries.
#[derive(Debug, Clone)]
pub struct SequenceRecord<E: Element> {
    pub clip_index: usize,
    /// Frame index of the first step.
    pub start_t: usize,
    /// Recurrent state entering the first step.
    pub initial_hidden: Tensor<E>,
    pub steps: Vec<TransitionStep<E>>,
    /// Critic estimate of the state after the last step; zero when that step
    /// ended the episode, otherwise it bootstraps the truncated tail.
    pub bootstrap_value: f64,
}

/// Everything one update cycle collected, tagged with the parameter version
/// it was collected under.
#[derive(Debug, Clone, Default)]
pub struct TransitionBatch<E: Element> {
    pub version: u64,
    pub sequences: Vec<SequenceRecord<E>>,
}

impl<E: Element> TransitionBatch<E> {
    pub fn step_count(&self) -> usize {
        self.sequences.iter().map(|s| s.steps.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::Internal("transition batch has no sequences".into()));
        }
        for (si, seq) in self.sequences.iter().enumerate() {
            if seq.steps.is_empty() {
                return Err(Error::Internal(format!("sequence {si} has no steps")));
            }
            for (i, step) in seq.steps.iter().enumerate() {
                if step.done && i + 1 != seq.steps.len() {
                    return Err(Error::Internal(format!(
                        "sequence {si} terminates at step {i} of {}; sequences must be cut at episode ends",
                        seq.steps.len()
                    )));
                }
                if !step.reward.is_finite() || !step.value.to_f64().is_finite() {
                    return Err(Error::Divergence(format!(
                        "sequence {si} step {i} has non-finite reward or value"
                    )));
                }
            }
            if !seq.bootstrap_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "sequence {si} has a non-finite bootstrap value"
                )));
            }
        }
        Ok(())
    }
}

/// Raw (unnormalized) advantage estimates and value targets, one vector per
/// sequence, aligned with its steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimates {
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

/// Generalized advantage estimation over a batch. Terminal steps bootstrap
/// from zero; truncated sequences bootstrap from the stored critic estimate.
/// Advantages are returned raw; [`ppo_update`] normalizes them per cycle.
pub fn compute_advantages<E: Element>(
    batch: &TransitionBatch<E>,
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageEstimates> {
    batch.validate()?;
    for (name, v) in [("gamma", gamma), ("lambda", lambda)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let mut advantages = Vec::with_capacity(batch.sequences.len());
    let mut returns = Vec::with_capacity(batch.sequences.len());
    for seq in &batch.sequences {
        let n = seq.steps.len();
        let mut adv = vec![0.0; n];
        let mut ret = vec![0.0; n];
        let mut tail = 0.0;
        for i in (0..n).rev() {
            let step = &seq.steps[i];
            let value = step.value.to_f64();
            let continues = if step.done { 0.0 } else { 1.0 };
            let next_value = if i + 1 < n {
                seq.steps[i + 1].value.to_f64()
            } else {
                seq.bootstrap_value
            };
            let delta = step.reward + gamma * continues * next_value - value;
            tail = delta + gamma * lambda * continues * tail;
            adv[i] = tail;
            ret[i] = tail + value;
        }
        advantages.push(adv);
        returns.push(ret);
    }
    Ok(AdvantageEstimates { advantages, returns })
}

/// Mean loss components over one update's gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub action_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    pub gradient_steps: usize,
}

/// Runs `epochs` optimization passes over one collected batch.
///
/// The batch must have been collected under the policy's current parameter
/// version; afterwards the inner gradient steps advance it, which is the
/// usual reuse of one on-policy batch across epochs. The clipped surrogate,
/// value regression, and entropy bonus are combined as
/// `w_a * action + w_v * value - w_e * entropy`, and advantages are
/// normalized to zero mean and unit variance across the whole cycle.
pub fn ppo_update<E: Element>(
    policy: &mut PolicyNet<E>,
    optimizer: &mut Optimizer<E>,
    batch: &TransitionBatch<E>,
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<PpoStats> {
    cfg.validate()?;
    if batch.version != policy.store.version() {
        return Err(Error::StaleBatch { batch: batch.version, store: policy.store.version() });
    }
    let estimates = compute_advantages(batch, cfg.gamma, cfg.lambda)?;
    let normalized = normalize_advantages(&estimates.advantages);

    let mut order: Vec<usize> = (0..batch.sequences.len()).collect();
    let mut sums = PpoStats {
        action_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        total_loss: 0.0,
        gradient_steps: 0,
    };
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let mut tape = Tape::new();
            let mut action_terms = Vec::new();
            let mut value_terms = Vec::new();
            let mut entropy_terms = Vec::new();
            for &si in chunk {
                let seq = &batch.sequences[si];
                let mut h = tape.constant(seq.initial_hidden.clone());
                for (i, step) in seq.steps.iter().enumerate() {
                    let p = policy.encode_inputs(&mut tape, &step.frame, &step.confidences)?;
                    let core = policy.step_core(&mut tape, p, h)?;
                    h = core.h_next;

                    let log_prob = tape.pick(core.log_probs, 0, step.action.index())?;
                    let shift = tape.affine(log_prob, 1.0, -step.log_prob.to_f64());
                    let ratio = tape.exp(shift);
                    let advantage = normalized[si][i];
                    let surrogate = tape.affine(ratio, advantage, 0.0);
                    let clipped =
                        tape.clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
                    let clipped_surrogate = tape.affine(clipped, advantage, 0.0);
                    let objective = tape.min2(surrogate, clipped_surrogate)?;
                    action_terms.push(tape.neg(objective));

                    let error =
                        tape.affine(core.value, 1.0, -estimates.returns[si][i]);
                    value_terms.push(tape.square(error));

                    let plogp = tape.mul(core.probs, core.log_probs)?;
                    let neg_entropy = tape.sum_all(plogp);
                    entropy_terms.push(tape.neg(neg_entropy));
                }
            }
            let action_loss = tape.mean_of(&action_terms)?;
            let value_loss = tape.mean_of(&value_terms)?;
            let entropy = tape.mean_of(&entropy_terms)?;
            let weighted_action = tape.affine(action_loss, cfg.action_loss_weight, 0.0);
            let weighted_value = tape.affine(value_loss, cfg.value_loss_weight, 0.0);
            let partial = tape.add(weighted_action, weighted_value)?;
            let weighted_entropy = tape.affine(entropy, -cfg.entropy_weight, 0.0);
            let total = tape.add(partial, weighted_entropy)?;

            let total_value = tape.scalar(total).to_f64();
            if !total_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "ppo loss is not finite at gradient step {}: {total_value}",
                    sums.gradient_steps
                )));
            }
            sums.action_loss += tape.scalar(action_loss).to_f64();
            sums.value_loss += tape.scalar(value_loss).to_f64();
            sums.entropy += tape.scalar(entropy).to_f64();
            sums.total_loss += total_value;
            sums.gradient_steps += 1;

            let grads = tape.backward(total)?;
            tape.accumulate_param_grads(&grads, &mut policy.store, E::ONE)?;
            optimizer.step(&mut policy.store)?;
            policy.store.zero_grads();
        }
    }
    let k = sums.gradient_steps.max(1) as f64;
    Ok(PpoStats {
        action_loss: sums.action_loss / k,
        value_loss: sums.value_loss / k,
        entropy: sums.entropy / k,
        total_loss: sums.total_loss / k,
        gradient_steps: sums.gradient_steps,
    })
}

/// Shifts and scales every advantage in the batch to zero mean and unit
/// variance. A zero-variance batch is only shifted.
fn normalize_advantages(advantages: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let count: usize = advantages.iter().map(Vec::len).sum();
    let n = count.max(1) as f64;
    let mean = advantages.iter().flatten().sum::<f64>() / n;
    let var = advantages.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    advantages
        .iter()
        .map(|seq| seq.iter().map(|a| (a - mean) * scale).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::OptimizerConfig;
    use crate::policy::PolicyConfig;
    use crate::rng::seeded;

    fn tiny_policy() -> PolicyNet<f64> {
        let cfg = PolicyConfig {
            visual_widths: vec![6, 4],
            confidence_widths: vec![4, 3],
            hidden_size: 5,
            causal: true,
        };
        PolicyNet::init(&cfg, 3, 11).unwrap()
    }

    /// Rolls a short on-policy batch by stepping the live policy.
    fn collect_batch(policy: &PolicyNet<f64>, steps: usize, done_at_end: bool) -> TransitionBatch<f64> {
        let mut rng = seeded(5, "test-batch");
        let mut h = policy.zero_hidden();
        let initial_hidden = h.clone();
        let mut seq = SequenceRecord {
            clip_index: 0,
            start_t: 0,
            initial_hidden,
            steps: Vec::new(),
            bootstrap_value: 0.0,
        };
        for t in 0..steps {
            let frame = Tensor::row_vector(vec![
                0.1 * t as f64,
                0.1 * (t + 1) as f64,
                0.1 * (t + 2) as f64,
            ]);
            let conf = [0.4, 0.6];
            let out = policy.policy_step(&frame, &conf, &h, Some(&mut rng)).unwrap();
            seq.steps.push(TransitionStep {
                t,
                frame,
                confidences: conf,
                action: out.action,
                log_prob: out.log_prob,
                value: out.value,
                reward: 0.5 - 0.1 * t as f64,
                done: done_at_end && t + 1 == steps,
            });
            h = out.h_next;
        }
        if !done_at_end {
            seq.bootstrap_value = 0.25;
        }
        TransitionBatch { version: policy.store.version(), sequences: vec![seq] }
    }

    fn constant_reward_batch(rewards: &[f64], values: &[f64], done: bool) -> TransitionBatch<f64> {
        let steps = rewards
            .iter()
            .zip(values)
            .enumerate()
            .map(|(t, (&reward, &value))| TransitionStep {
                t,
                frame: Tensor::zeros(1, 3),
                confidences: [0.5, 0.5],
                action: Action::Continue,
                log_prob: -1.0,
                value,
                reward,
                done: done && t + 1 == rewards.len(),
            })
            .collect();
        TransitionBatch {
            version: 0,
            sequences: vec![SequenceRecord {
                clip_index: 0,
                start_t: 0,
                initial_hidden: Tensor::zeros(1, 5),
                steps,
                bootstrap_value: 0.0,
            }],
        }
    }

    #[test]
    fn zero_gamma_advantage_is_reward_minus_value() {
        let batch = constant_reward_batch(&[1.0, -2.0, 0.5], &[0.3, 0.1, -0.2], true);
        let est = compute_advantages(&batch, 0.0, 0.95).unwrap();
        let expect = [1.0 - 0.3, -2.0 - 0.1, 0.5 + 0.2];
        for (a, e) in est.advantages[0].iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_lambda_advantage_is_one_step_td() {
        let batch = constant_reward_batch(&[1.0, 1.0, 1.0], &[0.5, 0.25, 0.125], true);
        let est = compute_advantages(&batch, 1.0, 0.0).unwrap();
        let expect = [1.0 + 0.25 - 0.5, 1.0 + 0.125 - 0.25, 1.0 - 0.125];
        for (a, e) in est.advantages[0].iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn undiscounted_returns_count_down() {
        let batch = constant_reward_batch(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], true);
        let est = compute_advantages(&batch, 1.0, 1.0).unwrap();
        assert_eq!(est.returns[0], vec![3.0, 2.0, 1.0]);
        assert_eq!(est.advantages[0], vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn truncated_sequences_bootstrap_from_stored_value() {
        let mut batch = constant_reward_batch(&[1.0], &[0.0], false);
        batch.sequences[0].bootstrap_value = 2.0;
        let est = compute_advantages(&batch, 0.5, 1.0).unwrap();
        assert!((est.advantages[0][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mid_sequence_termination_is_rejected() {
        let mut batch = constant_reward_batch(&[1.0, 1.0], &[0.0, 0.0], false);
        batch.sequences[0].steps[0].done = true;
        assert!(batch.validate().is_err());
    }

    #[test]
    fn stale_batch_version_is_rejected() {
        let mut policy = tiny_policy();
        let mut batch = collect_batch(&policy, 4, true);
        batch.version = policy.store.version() + 3;
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        let mut rng = seeded(0, "ppo");
        let err =
            ppo_update(&mut policy, &mut opt, &batch, &PpoConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::StaleBatch { .. }), "{err}");
    }

    #[test]
    fn zero_learning_rate_keeps_params_and_finite_losses() {
        let mut policy = tiny_policy();
        let batch = collect_batch(&policy, 6, true);
        let cfg = PpoConfig { learning_rate: 0.0, ..Default::default() };
        let mut opt = Optimizer::new(OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        })
        .unwrap();
        let before = policy.checksum();
        let mut rng = seeded(1, "ppo");
        let stats = ppo_update(&mut policy, &mut opt, &batch, &cfg, &mut rng).unwrap();
        assert!(stats.total_loss.is_finite());
        assert!(stats.action_loss.is_finite());
        assert_eq!(policy.checksum(), before);
    }

    #[test]
    fn replayed_ratios_are_exactly_one_for_unchanged_params() {
        // With zero learning rate the replay must reproduce the collected
        // log-probabilities bit for bit, so min(r*A, clip(r)*A) = A and the
        // action loss equals the negated mean normalized advantage.
        let mut policy = tiny_policy();
        let batch = collect_batch(&policy, 8, false);
        let est = compute_advantages(&batch, 0.99, 0.95).unwrap();
        let normalized = normalize_advantages(&est.advantages);
        let expected_action_loss =
            -normalized[0].iter().sum::<f64>() / normalized[0].len() as f64;

        let cfg = PpoConfig { epochs: 1, learning_rate: 0.0, ..Default::default() };
        let mut opt = Optimizer::new(OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        })
        .unwrap();
        let mut rng = seeded(2, "ppo");
        let stats = ppo_update(&mut policy, &mut opt, &batch, &cfg, &mut rng).unwrap();
        assert!(
            (stats.action_loss - expected_action_loss).abs() < 1e-12,
            "{} vs {expected_action_loss}",
            stats.action_loss
        );
    }

    #[test]
    fn update_moves_parameters_and_preserves_determinism() {
        let run = || {
            let mut policy = tiny_policy();
            let batch = collect_batch(&policy, 10, true);
            let mut opt = Optimizer::new(OptimizerConfig {
                learning_rate: 1e-2,
                ..Default::default()
            })
            .unwrap();
            let mut rng = seeded(3, "ppo");
            let stats =
                ppo_update(&mut policy, &mut opt, &batch, &PpoConfig::default(), &mut rng)
                    .unwrap();
            (policy.checksum(), stats)
        };
        let fresh = tiny_policy().checksum();
        let (sum_a, stats_a) = run();
        let (sum_b, stats_b) = run();
        assert_ne!(sum_a, fresh, "an update with positive learning rate must move parameters");
        assert_eq!(sum_a, sum_b);
        assert_eq!(stats_a, stats_b);
        assert_eq!(stats_a.gradient_steps, PpoConfig::default().epochs);
    }

    #[test]
    fn normalized_advantages_have_zero_mean_unit_variance() {
        let raw = vec![vec![1.0, 2.0], vec![3.0, 4.0, 10.0]];
        let normed = normalize_advantages(&raw);
        let flat: Vec<f64> = normed.iter().flatten().copied().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / flat.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        // Constant advantages: shift only, no blow-up.
        let constant = normalize_advantages(&[vec![2.0, 2.0, 2.0]]);
        assert!(constant[0].iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(PpoConfig { clip_ratio: 0.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { clip_ratio: 1.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { horizon: 0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { entropy_weight: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig::paper().validate().is_ok());
    }
}
