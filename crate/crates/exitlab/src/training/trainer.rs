//! The policy training loop: parallel episode streams roll clips against a
//! frozen detector, transitions are scored by the chosen reward scheme as
//! they are created, and the policy is optimized cycle by cycle.
//!
//! Detector confidences are memoized per `(clip, frame)` — the detector never
//! changes during policy training, so each clip position is scored once no
//! matter how many episodes revisit it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{ConfidenceCache, Detector};
use crate::env::{Action, Dataset, Split, LABEL_MISTAKE};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::numerics::checkpoint;
use crate::numerics::{Element, Optimizer, OptimizerConfig, Tensor};
use crate::policy::{GreedyPolicyDecider, PolicyConfig, PolicyNet};
use crate::rng::{seeded, seeded_indexed, Rng};

use super::ppo::{ppo_update, PpoConfig, SequenceRecord, TransitionBatch, TransitionStep};
use super::reward::{scheme_reward, RewardScheme};

/// One training-log line (serialized as newline-delimited JSON by the CLI).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// Environment steps collected so far.
    pub step: usize,
    /// Mean total reward of episodes finished since the previous record.
    pub mean_reward: f64,
    /// Mean observation ratio of those episodes.
    pub mean_or: f64,
    /// Greedy validation average precision, when this cycle probed.
    pub probe_ap: Option<f64>,
    pub action_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Checkpoint sidecar for a trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyMeta {
    pub config: PolicyConfig,
    pub feature_dim: usize,
    pub seed: u64,
    pub scheme: RewardScheme,
    pub ppo: PpoConfig,
    pub steps_trained: usize,
    pub final_probe_ap: Option<f64>,
}

/// Saves policy parameters plus a JSON sidecar describing the run.
pub fn save_policy<E: Element>(policy: &PolicyNet<E>, path: &Path, meta: &PolicyMeta) -> Result<()> {
    checkpoint::save_with_meta(path, &policy.store, meta)
}

/// Loads a policy checkpoint saved by [`save_policy`].
pub fn load_policy<E: Element>(path: &Path) -> Result<(PolicyNet<E>, PolicyMeta)> {
    let meta: PolicyMeta = checkpoint::load_meta(path)?;
    let store = checkpoint::load(path)?;
    let policy = PolicyNet::from_store(&meta.config, meta.feature_dim, store)?;
    Ok((policy, meta))
}

/// What a training run produced (parameters are updated in place).
#[derive(Debug, Clone)]
pub struct TrainPolicyOutcome {
    pub log: Vec<TrainLogRecord>,
    /// Environment steps actually collected (whole cycles).
    pub steps: usize,
    /// Episodes finished during training.
    pub episodes: usize,
    /// Greedy validation average precision after the last cycle, when the
    /// validation split has at least one mistake clip.
    pub final_probe_ap: Option<f64>,
}

/// One parallel episode stream and its in-flight sequence.
struct Stream<E: Element> {
    rng: Rng,
    clip_index: usize,
    t: usize,
    hidden: Tensor<E>,
    episode_reward: f64,
    /// Best true-class confidence seen so far this episode (dense-only scheme).
    best_confidence: f64,
    /// True when the next step must start a fresh episode.
    fresh: bool,
    sequence: SequenceRecord<E>,
}

impl<E: Element> Stream<E> {
    fn new(index: usize, seed: u64, hidden: Tensor<E>) -> Self {
        Stream {
            rng: seeded_indexed(seed, "policy-stream", index as u64),
            clip_index: 0,
            t: 0,
            hidden,
            episode_reward: 0.0,
            best_confidence: f64::NEG_INFINITY,
            fresh: true,
            sequence: SequenceRecord {
                clip_index: 0,
                start_t: 0,
                initial_hidden: Tensor::zeros(1, 1),
                steps: Vec::new(),
                bootstrap_value: 0.0,
            },
        }
    }

    fn start_episode(&mut self, train_indices: &[usize], zero_hidden: Tensor<E>) {
        let pick = rand::Rng::random_range(&mut self.rng, 0..train_indices.len());
        self.clip_index = train_indices[pick];
        self.t = 0;
        self.hidden = zero_hidden;
        self.episode_reward = 0.0;
        self.best_confidence = f64::NEG_INFINITY;
        self.fresh = false;
        self.open_sequence();
    }

    /// Begins a new replay sequence from the current state.
    fn open_sequence(&mut self) {
        self.sequence = SequenceRecord {
            clip_index: self.clip_index,
            start_t: self.t,
            initial_hidden: self.hidden.clone(),
            steps: Vec::new(),
            bootstrap_value: 0.0,
        };
    }
}

/// Trains `policy` against the frozen `detector` on the train split.
///
/// Transitions are scored by `scheme` as they are collected; every
/// `cfg.horizon` steps per stream the batch is handed to the PPO update.
/// `on_log` receives each training-log record as it is produced.
pub fn train_policy<E: Element>(
    policy: &mut PolicyNet<E>,
    detector: &Detector<E>,
    data: &Dataset,
    scheme: &RewardScheme,
    cfg: &PpoConfig,
    seed: u64,
    mut on_log: impl FnMut(&TrainLogRecord),
) -> Result<TrainPolicyOutcome> {
    cfg.validate()?;
    scheme.validate()?;
    let train_indices = data.split_indices(Split::Train);
    if train_indices.is_empty() {
        return Err(Error::Config("policy training needs a non-empty train split".into()));
    }
    if data.feature_dim != policy.feature_dim {
        return Err(Error::Config(format!(
            "policy expects feature dim {}, dataset provides {}",
            policy.feature_dim, data.feature_dim
        )));
    }
    if data.feature_dim != detector.cfg.feature_dim {
        return Err(Error::Config(format!(
            "detector expects feature dim {}, dataset provides {}",
            detector.cfg.feature_dim, data.feature_dim
        )));
    }
    let detector_checksum = detector.checksum();

    let mut optimizer = Optimizer::new(OptimizerConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    })?;
    let mut update_rng = seeded(seed, "ppo-shuffle");
    let mut cache = ConfidenceCache::new();
    let mut streams: Vec<Stream<E>> = (0..cfg.streams)
        .map(|i| Stream::new(i, seed, policy.zero_hidden()))
        .collect();

    let steps_per_cycle = cfg.horizon * cfg.streams;
    let cycles = cfg.total_steps.div_ceil(steps_per_cycle);

    let mut log = Vec::new();
    let mut steps_done = 0usize;
    let mut episodes = 0usize;
    // Episode statistics accumulated since the last log record.
    let mut window_reward = 0.0;
    let mut window_or = 0.0;
    let mut window_episodes = 0usize;
    let mut last_mean_reward = 0.0;
    let mut last_mean_or = 0.0;
    let mut latest_probe: Option<f64> = None;

    for cycle in 1..=cycles {
        let mut batch =
            TransitionBatch { version: policy.store.version(), sequences: Vec::new() };
        for _ in 0..cfg.horizon {
            for stream in streams.iter_mut() {
                if stream.fresh {
                    stream.start_episode(&train_indices, policy.zero_hidden());
                }
                let clip = &data.clips[stream.clip_index];
                let n = clip.frame_count();
                let t = stream.t;
                let conf = cache.confidences(detector, clip, stream.clip_index, t)?;
                let conf_f64 = [conf[0].to_f64(), conf[1].to_f64()];
                stream.best_confidence =
                    stream.best_confidence.max(conf_f64[clip.label as usize]);

                let frame = clip.frame::<E>(t);
                let out = policy.policy_step(&frame, &conf, &stream.hidden, Some(&mut stream.rng))?;
                let natural_end = out.action == Action::Continue && t + 1 == n;
                let done = out.action.is_exit() || natural_end;
                let exit_point = if out.action.is_exit() { t } else { n };

                let conf_next = if out.action == Action::Continue && t + 1 < n {
                    let c = cache.confidences(detector, clip, stream.clip_index, t + 1)?;
                    [c[0].to_f64(), c[1].to_f64()]
                } else {
                    conf_f64
                };
                let reward = scheme_reward(
                    scheme,
                    t,
                    exit_point,
                    n,
                    clip.duration,
                    &conf_f64,
                    &conf_next,
                    clip.label,
                    out.action,
                    stream.best_confidence,
                )?;

                stream.sequence.steps.push(TransitionStep {
                    t,
                    frame,
                    confidences: conf,
                    action: out.action,
                    log_prob: out.log_prob,
                    value: out.value,
                    reward,
                    done,
                });
                stream.episode_reward += reward;
                stream.hidden = out.h_next;

                if done {
                    episodes += 1;
                    window_episodes += 1;
                    window_reward += stream.episode_reward;
                    window_or += exit_point as f64 / n as f64;
                    stream.sequence.bootstrap_value = 0.0;
                    batch.sequences.push(std::mem::replace(
                        &mut stream.sequence,
                        SequenceRecord {
                            clip_index: 0,
                            start_t: 0,
                            initial_hidden: Tensor::zeros(1, 1),
                            steps: Vec::new(),
                            bootstrap_value: 0.0,
                        },
                    ));
                    stream.fresh = true;
                } else {
                    stream.t += 1;
                }
            }
        }
        // Close out truncated sequences with a critic bootstrap of the state
        // each stream is currently in.
        for stream in streams.iter_mut() {
            if stream.sequence.steps.is_empty() || stream.fresh {
                continue;
            }
            let clip = &data.clips[stream.clip_index];
            let conf = cache.confidences(detector, clip, stream.clip_index, stream.t)?;
            let frame = clip.frame::<E>(stream.t);
            let peek = policy.policy_step(&frame, &conf, &stream.hidden, None)?;
            stream.sequence.bootstrap_value = peek.value.to_f64();
            let continued = std::mem::replace(
                &mut stream.sequence,
                SequenceRecord {
                    clip_index: stream.clip_index,
                    start_t: stream.t,
                    initial_hidden: stream.hidden.clone(),
                    steps: Vec::new(),
                    bootstrap_value: 0.0,
                },
            );
            batch.sequences.push(continued);
        }

        let stats = ppo_update(policy, &mut optimizer, &batch, cfg, &mut update_rng)?;
        steps_done += steps_per_cycle;

        let probing = cycle % cfg.probe_every == 0 || cycle == cycles;
        if probing {
            latest_probe = probe_validation_ap(policy, detector, data, &mut cache)?;
        }
        if cycle % cfg.log_every == 0 || cycle == cycles {
            if window_episodes > 0 {
                last_mean_reward = window_reward / window_episodes as f64;
                last_mean_or = window_or / window_episodes as f64;
            }
            window_reward = 0.0;
            window_or = 0.0;
            window_episodes = 0;
            let record = TrainLogRecord {
                step: steps_done,
                mean_reward: last_mean_reward,
                mean_or: last_mean_or,
                probe_ap: if probing { latest_probe } else { None },
                action_loss: stats.action_loss,
                value_loss: stats.value_loss,
                entropy: stats.entropy,
            };
            on_log(&record);
            log.push(record);
        }
    }

    if cycles == 0 {
        latest_probe = probe_validation_ap(policy, detector, data, &mut cache)?;
    }
    if detector.checksum() != detector_checksum {
        return Err(Error::Internal(
            "detector parameters changed during policy training; the detector must stay frozen"
                .into(),
        ));
    }
    Ok(TrainPolicyOutcome { log, steps: steps_done, episodes, final_probe_ap: latest_probe })
}

/// Greedy policy evaluation on the validation split, reduced to average
/// precision. Returns `None` when the split has no mistake clip to rank.
fn probe_validation_ap<E: Element>(
    policy: &PolicyNet<E>,
    detector: &Detector<E>,
    data: &Dataset,
    cache: &mut ConfidenceCache<E>,
) -> Result<Option<f64>> {
    let has_positive = data
        .clips
        .iter()
        .any(|c| c.split == Split::Val && c.label == LABEL_MISTAKE);
    if !has_positive {
        return Ok(None);
    }
    let mut decider = GreedyPolicyDecider::new(policy);
    let summary = evaluate_model("probe", &mut decider, detector, data, Split::Val, 0, "", cache)?;
    Ok(Some(summary.ap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::env::synth::{generate_split_dataset, SynthConfig};
    use crate::training::reward::RewardWeights;

    fn tiny_setup() -> (Detector<f32>, Dataset) {
        let synth = SynthConfig {
            feature_dim: 6,
            duration_range: [2.0, 4.0],
            ..Default::default()
        };
        let data = generate_split_dataset(&synth, 6, 4, 2).unwrap();
        let det_cfg = DetectorConfig {
            window: 3,
            anticipation: 4,
            feature_dim: 6,
            projection_dim: 8,
            ff_dim: 8,
            layers: 1,
            heads: 1,
            dropout: 0.0,
        };
        let detector = Detector::init(&det_cfg, 99).unwrap();
        (detector, data)
    }

    fn tiny_policy(feature_dim: usize, seed: u64) -> PolicyNet<f32> {
        let cfg = PolicyConfig {
            visual_widths: vec![8, 6],
            confidence_widths: vec![4, 3],
            hidden_size: 6,
            causal: true,
        };
        PolicyNet::init(&cfg, feature_dim, seed).unwrap()
    }

    fn tiny_ppo(total_steps: usize) -> PpoConfig {
        PpoConfig {
            total_steps,
            horizon: 8,
            epochs: 2,
            minibatch_size: 4,
            streams: 4,
            learning_rate: 1e-3,
            probe_every: 2,
            log_every: 1,
            ..Default::default()
        }
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let (detector, data) = tiny_setup();
        let run = |seed: u64| {
            let mut policy = tiny_policy(data.feature_dim, seed);
            let outcome = train_policy(
                &mut policy,
                &detector,
                &data,
                &RewardScheme::default(),
                &tiny_ppo(128),
                seed,
                |_| {},
            )
            .unwrap();
            (policy.checksum(), outcome)
        };
        let (sum_a, out_a) = run(7);
        let (sum_b, out_b) = run(7);
        let (sum_c, _) = run(8);
        assert_eq!(sum_a, sum_b);
        assert_eq!(out_a.log, out_b.log);
        assert_ne!(sum_a, sum_c, "different seeds should produce different parameters");
        assert_eq!(out_a.steps, 128);
        assert!(out_a.episodes > 0, "short clips must finish episodes in 128 steps");
        assert!(out_a.log.iter().all(|r| {
            r.mean_reward.is_finite() && r.action_loss.is_finite() && r.entropy.is_finite()
        }));
        // probe_every=2 with 4 cycles: cycles 2 and 4 probe.
        assert!(out_a.log.last().unwrap().probe_ap.is_some());
        assert_eq!(out_a.final_probe_ap, out_a.log.last().unwrap().probe_ap);
    }

    #[test]
    fn detector_stays_frozen_through_training() {
        let (detector, data) = tiny_setup();
        let before = detector.checksum();
        let mut policy = tiny_policy(data.feature_dim, 3);
        train_policy(
            &mut policy,
            &detector,
            &data,
            &RewardScheme::Exit { weights: RewardWeights::default() },
            &tiny_ppo(64),
            3,
            |_| {},
        )
        .unwrap();
        assert_eq!(detector.checksum(), before);
    }

    #[test]
    fn alternative_schemes_train() {
        let (detector, data) = tiny_setup();
        for scheme in [RewardScheme::FastForward { penalty: 0.01 }, RewardScheme::AdaFrame] {
            let mut policy = tiny_policy(data.feature_dim, 5);
            let outcome =
                train_policy(&mut policy, &detector, &data, &scheme, &tiny_ppo(64), 5, |_| {})
                    .unwrap();
            assert_eq!(outcome.steps, 64);
            assert!(outcome.log.iter().all(|r| r.mean_reward.is_finite()));
        }
    }

    #[test]
    fn zero_step_training_only_probes() {
        let (detector, data) = tiny_setup();
        let mut policy = tiny_policy(data.feature_dim, 11);
        let before = policy.checksum();
        let outcome = train_policy(
            &mut policy,
            &detector,
            &data,
            &RewardScheme::default(),
            &tiny_ppo(0),
            11,
            |_| {},
        )
        .unwrap();
        assert_eq!(policy.checksum(), before);
        assert_eq!(outcome.steps, 0);
        assert!(outcome.log.is_empty());
        assert!(outcome.final_probe_ap.is_some());
    }

    #[test]
    fn policy_checkpoint_round_trips() {
        let (detector, data) = tiny_setup();
        let mut policy = tiny_policy(data.feature_dim, 21);
        let outcome = train_policy(
            &mut policy,
            &detector,
            &data,
            &RewardScheme::default(),
            &tiny_ppo(32),
            21,
            |_| {},
        )
        .unwrap();
        let meta = PolicyMeta {
            config: policy.cfg.clone(),
            feature_dim: policy.feature_dim,
            seed: 21,
            scheme: RewardScheme::default(),
            ppo: tiny_ppo(32),
            steps_trained: outcome.steps,
            final_probe_ap: outcome.final_probe_ap,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.exl1");
        save_policy(&policy, &path, &meta).unwrap();
        let (restored, restored_meta) = load_policy::<f32>(&path).unwrap();
        assert_eq!(restored.checksum(), policy.checksum());
        assert_eq!(restored_meta, meta);
        // The restored policy reproduces decisions bit for bit.
        let clip = &data.clips[0];
        let h = policy.zero_hidden();
        let conf = [0.4f32, 0.6];
        let a = policy.policy_step(&clip.frame::<f32>(0), &conf, &h, None).unwrap();
        let b = restored.policy_step(&clip.frame::<f32>(0), &conf, &h, None).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn mismatched_feature_dim_is_rejected() {
        let (detector, data) = tiny_setup();
        let mut policy = tiny_policy(data.feature_dim + 1, 2);
        let err = train_policy(
            &mut policy,
            &detector,
            &data,
            &RewardScheme::default(),
            &tiny_ppo(32),
            2,
            |_| {},
        )
        .unwrap_err();
        assert!(err.to_string().contains("feature dim"));
    }

    #[test]
    fn sequences_are_cut_at_episode_boundaries() {
        // Indirect check: training over many short episodes would fail batch
        // validation inside ppo_update if a sequence crossed an episode end.
        let (detector, data) = tiny_setup();
        let mut policy = tiny_policy(data.feature_dim, 13);
        let cfg = PpoConfig { horizon: 16, ..tiny_ppo(128) };
        let outcome =
            train_policy(&mut policy, &detector, &data, &RewardScheme::default(), &cfg, 13, |_| {})
                .unwrap();
        assert!(outcome.episodes >= 2);
    }
}
