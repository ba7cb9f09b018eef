//! The recurrent exit policy.
//!
//! At every frame the policy sees the newest raw frame feature and the
//! detector's confidence pair, encodes each through its own ReLU MLP,
//! concatenates the embeddings, folds them into a GRU hidden state, and maps
//! the concatenated `[new state, previous state]` through an actor head
//! (three action logits) and a critic head (state value). During training
//! actions are sampled; evaluation uses the argmax.

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorOutput};
use crate::env::clip::ClipRecord;
use crate::env::episode::{Action, EpisodeState, ACTIONS};
use crate::error::{shape_error, Error, Result};
use crate::eval::ExitDecider;
use crate::numerics::layers::{Dense, GruCell, Init, Mlp};
use crate::numerics::store::ParameterStore;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Element, Tensor};
use crate::rng::{seeded, Rng};

/// Architecture of the exit policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Hidden widths of the frame-feature encoder MLP.
    pub visual_widths: Vec<usize>,
    /// Hidden widths of the confidence encoder MLP.
    pub confidence_widths: Vec<usize>,
    /// GRU hidden size.
    pub hidden_size: usize,
    /// Streaming inference requires causal recurrence; `false` is rejected
    /// at validation time and exists only to make the choice explicit.
    pub causal: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            visual_widths: vec![64, 64, 32],
            confidence_widths: vec![16, 16, 8],
            hidden_size: 64,
            causal: true,
        }
    }
}

impl PolicyConfig {
    /// Full-scale configuration (512 recurrent units).
    pub fn paper() -> Self {
        PolicyConfig { hidden_size: 512, ..PolicyConfig::default() }
    }

    /// Small encoders for benchmark-scale training sets. Capacity is kept
    /// deliberately tight: with wide encoders the policy can memorize the
    /// first frames of individual training clips and exit correctly without
    /// watching, which scores near chance on held-out clips.
    pub fn desk() -> Self {
        PolicyConfig {
            visual_widths: vec![8],
            confidence_widths: vec![16, 8],
            hidden_size: 24,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, widths) in [
            ("visual_widths", &self.visual_widths),
            ("confidence_widths", &self.confidence_widths),
        ] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::Config(format!(
                    "policy {name} must be a non-empty list of positive widths, got {widths:?}"
                )));
            }
        }
        if self.hidden_size == 0 {
            return Err(Error::Config("policy hidden_size must be positive".into()));
        }
        if !self.causal {
            return Err(Error::Config(
                "policy causal=false (bidirectional recurrence) cannot be evaluated on a stream; \
                 only causal=true is supported"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One decision of the policy.
#[derive(Debug, Clone)]
pub struct PolicyStepOutput<E: Element> {
    /// Action distribution over [Continue, ExitMistake, ExitCorrect].
    pub probs: [E; 3],
    pub action: Action,
    /// Log-probability of `action` under the distribution.
    pub log_prob: E,
    /// Critic value estimate.
    pub value: E,
    /// Updated recurrent state.
    pub h_next: Tensor<E>,
}

impl<E: Element> PolicyStepOutput<E> {
    /// Natural-log entropy of the action distribution.
    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for p in self.probs {
            let p = p.to_f64();
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        h
    }
}

/// Tape handles produced by one policy step.
pub struct PolicyCoreVars {
    /// `(1, 3)` action probabilities.
    pub probs: Var,
    /// `(1, 3)` log-probabilities (stable log-softmax).
    pub log_probs: Var,
    /// `(1, 1)` critic value.
    pub value: Var,
    /// `(1, hidden)` updated recurrent state.
    pub h_next: Var,
}

/// The exit policy network: parameter store plus layer handles.
#[derive(Debug, Clone)]
pub struct PolicyNet<E: Element> {
    pub cfg: PolicyConfig,
    pub feature_dim: usize,
    pub store: ParameterStore<E>,
    visual: Mlp,
    confidence: Mlp,
    gru: GruCell,
    actor: Dense,
    critic: Dense,
}

impl<E: Element> PolicyNet<E> {
    pub fn init(cfg: &PolicyConfig, feature_dim: usize, seed: u64) -> Result<PolicyNet<E>> {
        cfg.validate()?;
        if feature_dim == 0 {
            return Err(Error::Config("policy feature_dim must be positive".into()));
        }
        let mut store = ParameterStore::new();
        let mut rng = seeded(seed, "policy-init");
        let visual = Mlp::register(&mut store, "policy/visual", feature_dim, &cfg.visual_widths, &mut rng)?;
        let confidence =
            Mlp::register(&mut store, "policy/confidence", 2, &cfg.confidence_widths, &mut rng)?;
        let embed = visual.out_dim() + confidence.out_dim();
        let gru = GruCell::register(&mut store, "policy/gru", embed, cfg.hidden_size, &mut rng)?;
        let head_in = 2 * cfg.hidden_size;
        let actor = Dense::register(&mut store, "policy/actor", head_in, 3, Init::UniformFanIn, &mut rng)?;
        let critic = Dense::register(&mut store, "policy/critic", head_in, 1, Init::UniformFanIn, &mut rng)?;
        Ok(PolicyNet { cfg: cfg.clone(), feature_dim, store, visual, confidence, gru, actor, critic })
    }

    /// Rebuilds layer handles over an existing store (e.g. from a checkpoint).
    pub fn from_store(
        cfg: &PolicyConfig,
        feature_dim: usize,
        store: ParameterStore<E>,
    ) -> Result<PolicyNet<E>> {
        cfg.validate()?;
        let visual = Mlp::from_store(&store, "policy/visual", feature_dim, &cfg.visual_widths)?;
        let confidence = Mlp::from_store(&store, "policy/confidence", 2, &cfg.confidence_widths)?;
        let embed = visual.out_dim() + confidence.out_dim();
        let gru = GruCell::from_store(&store, "policy/gru", embed, cfg.hidden_size)?;
        let head_in = 2 * cfg.hidden_size;
        let actor = Dense::from_store(&store, "policy/actor", head_in, 3)?;
        let critic = Dense::from_store(&store, "policy/critic", head_in, 1)?;
        Ok(PolicyNet { cfg: cfg.clone(), feature_dim, store, visual, confidence, gru, actor, critic })
    }

    /// Width of the policy embedding `p`.
    pub fn embed_dim(&self) -> usize {
        self.visual.out_dim() + self.confidence.out_dim()
    }

    /// Fresh all-zero recurrent state for an episode start.
    pub fn zero_hidden(&self) -> Tensor<E> {
        Tensor::zeros(1, self.cfg.hidden_size)
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Encodes the newest frame feature and detector confidences into the
    /// policy embedding `p = [MLP_v(frame), MLP_m(confidences)]`.
    pub fn encode_inputs(
        &self,
        tape: &mut Tape<E>,
        frame: &Tensor<E>,
        confidences: &[E; 2],
    ) -> Result<Var> {
        if frame.shape() != (1, self.feature_dim) {
            return Err(shape_error(
                "encode_inputs",
                format!("1x{} frame feature", self.feature_dim),
                frame.shape_string(),
            ));
        }
        let frame = tape.constant(frame.clone());
        let conf = tape.constant(Tensor::row_vector(confidences.to_vec()));
        let v = self.visual.forward(tape, &self.store, frame)?;
        let m = self.confidence.forward(tape, &self.store, conf)?;
        tape.concat_cols(&[v, m])
    }

    /// Recurrent update plus actor/critic heads. This single code path is
    /// shared by rollouts and PPO replays so recomputed log-probabilities are
    /// bit-identical when parameters have not changed.
    pub fn step_core(&self, tape: &mut Tape<E>, p: Var, h_prev: Var) -> Result<PolicyCoreVars> {
        let h_next = self.gru.step(tape, &self.store, p, h_prev)?;
        let both = tape.concat_cols(&[h_next, h_prev])?;
        let logits = self.actor.forward(tape, &self.store, both)?;
        let probs = tape.softmax_rows(logits);
        let log_probs = tape.log_softmax_rows(logits);
        let value = self.critic.forward(tape, &self.store, both)?;
        Ok(PolicyCoreVars { probs, log_probs, value, h_next })
    }

    /// Full step on a fresh tape: encode, recur, select an action. Pass an
    /// RNG to sample; pass `None` for greedy argmax.
    pub fn policy_step(
        &self,
        frame: &Tensor<E>,
        confidences: &[E; 2],
        h_prev: &Tensor<E>,
        rng: Option<&mut Rng>,
    ) -> Result<PolicyStepOutput<E>> {
        Ok(self.policy_step_with_embedding(frame, confidences, h_prev, rng)?.0)
    }

    /// As [`Self::policy_step`], also returning the policy embedding `p`.
    pub fn policy_step_with_embedding(
        &self,
        frame: &Tensor<E>,
        confidences: &[E; 2],
        h_prev: &Tensor<E>,
        rng: Option<&mut Rng>,
    ) -> Result<(PolicyStepOutput<E>, Tensor<E>)> {
        if h_prev.shape() != (1, self.cfg.hidden_size) {
            return Err(shape_error(
                "policy_step",
                format!("1x{} hidden state", self.cfg.hidden_size),
                h_prev.shape_string(),
            ));
        }
        let mut tape = Tape::new();
        let p = self.encode_inputs(&mut tape, frame, confidences)?;
        let h_var = tape.constant(h_prev.clone());
        let core = self.step_core(&mut tape, p, h_var)?;

        let probs_row = tape.value(core.probs);
        let probs = [probs_row.get(0, 0), probs_row.get(0, 1), probs_row.get(0, 2)];
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence(format!(
                "policy action distribution is not finite: {:?}",
                probs.map(|p| p.to_f64())
            )));
        }
        let value = tape.value(core.value).get(0, 0);
        let h_next = tape.value(core.h_next).clone();
        if !value.is_finite() || !h_next.all_finite() {
            return Err(Error::Divergence("policy value or hidden state is not finite".into()));
        }

        let action = match rng {
            Some(rng) => sample_action(&probs, rng),
            None => greedy_action(&probs),
        };
        let log_prob = tape.value(core.log_probs).get(0, action.index());
        let embedding = tape.value(p).clone();
        Ok((PolicyStepOutput { probs, action, log_prob, value, h_next }, embedding))
    }
}

fn sample_action<E: Element>(probs: &[E; 3], rng: &mut Rng) -> Action {
    let u: f64 = rand::Rng::random_range(rng, 0.0..1.0);
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p.to_f64();
        if u < cum {
            return ACTIONS[i];
        }
    }
    ACTIONS[2]
}

fn greedy_action<E: Element>(probs: &[E; 3]) -> Action {
    let mut best = 0;
    for i in 1..3 {
        if probs[i].to_f64() > probs[best].to_f64() {
            best = i;
        }
    }
    ACTIONS[best]
}

/// One recorded step of an episode rollout.
#[derive(Debug, Clone)]
pub struct RolloutStep<E: Element> {
    pub t: usize,
    /// Policy embedding `p` at this frame.
    pub embedding: Tensor<E>,
    /// Full detector verdict at this frame.
    pub detector: DetectorOutput<E>,
    pub probs: [E; 3],
    pub action: Action,
    pub log_prob: E,
    pub value: E,
}

/// A finished episode: its steps and final environment state.
#[derive(Debug, Clone)]
pub struct Rollout<E: Element> {
    pub steps: Vec<RolloutStep<E>>,
    pub state: EpisodeState<E>,
}

impl<E: Element> Rollout<E> {
    /// Exit point `E_i`: exit frame, or frame count at natural end.
    pub fn exit_point(&self) -> usize {
        self.state.exit_point.expect("finished rollout has an exit point")
    }
}

/// Evaluation adapter: steps the policy greedily (argmax action) and carries
/// its recurrent state across the frames of one clip.
#[derive(Debug)]
pub struct GreedyPolicyDecider<'a, E: Element> {
    policy: &'a PolicyNet<E>,
    hidden: Tensor<E>,
}

impl<'a, E: Element> GreedyPolicyDecider<'a, E> {
    pub fn new(policy: &'a PolicyNet<E>) -> Self {
        GreedyPolicyDecider { hidden: policy.zero_hidden(), policy }
    }
}

impl<E: Element> ExitDecider<E> for GreedyPolicyDecider<'_, E> {
    fn reset(&mut self, _seed: u64) {
        self.hidden = self.policy.zero_hidden();
    }

    fn decide(&mut self, _t: usize, frame: &Tensor<E>, confidences: &[E; 2]) -> Result<Action> {
        let out = self.policy.policy_step(frame, confidences, &self.hidden, None)?;
        self.hidden = out.h_next;
        Ok(out.action)
    }
}

/// Plays one full episode of `clip` with the policy driving the exit
/// decision. Pass an RNG to sample actions (training); `None` for greedy.
pub fn rollout_episode<E: Element>(
    clip: &ClipRecord,
    clip_index: usize,
    detector: &Detector<E>,
    policy: &PolicyNet<E>,
    mut rng: Option<&mut Rng>,
) -> Result<Rollout<E>> {
    let n = clip.frame_count();
    let mut state = EpisodeState::new(clip_index, policy.zero_hidden());
    let mut steps = Vec::new();
    while !state.done {
        let t = state.t;
        let window = clip.window::<E>(t, detector.cfg.window)?;
        let det_out = detector.forward(&window, false)?;
        let frame = clip.frame::<E>(t);
        let (out, embedding) = policy.policy_step_with_embedding(
            &frame,
            &det_out.confidences,
            &state.hidden,
            rng.as_deref_mut(),
        )?;
        steps.push(RolloutStep {
            t,
            embedding,
            detector: det_out,
            probs: out.probs,
            action: out.action,
            log_prob: out.log_prob,
            value: out.value,
        });
        state.hidden = out.h_next;
        state.step(out.action, n)?;
    }
    Ok(Rollout { steps, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::env::synth::{generate_dataset, SynthConfig};

    fn tiny_policy(seed: u64) -> PolicyNet<f64> {
        let cfg = PolicyConfig {
            visual_widths: vec![8, 8, 4],
            confidence_widths: vec![4, 4, 2],
            hidden_size: 6,
            causal: true,
        };
        PolicyNet::init(&cfg, 5, seed).unwrap()
    }

    fn set_actor_bias(net: &mut PolicyNet<f64>, bias: [f64; 3]) {
        let ids: Vec<_> = net.store.ids().collect();
        for id in ids {
            let name = net.store.name(id).to_string();
            if name == "policy/actor/w" {
                net.store.value_mut(id).fill(0.0);
            }
            if name == "policy/actor/b" {
                let b = net.store.value_mut(id);
                for (i, v) in bias.iter().enumerate() {
                    b.set(0, i, *v);
                }
            }
        }
    }

    #[test]
    fn embedding_width_is_sum_of_encoder_outputs() {
        let net = tiny_policy(0);
        assert_eq!(net.embed_dim(), 4 + 2);
        let mut tape = Tape::new();
        let frame = Tensor::row_vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let p = net.encode_inputs(&mut tape, &frame, &[0.6, 0.4]).unwrap();
        assert_eq!(tape.value(p).shape(), (1, 6));
    }

    #[test]
    fn zero_parameter_encoders_give_zero_embedding() {
        let mut net = tiny_policy(1);
        let ids: Vec<_> = net.store.ids().collect();
        for id in ids {
            let name = net.store.name(id).to_string();
            if name.starts_with("policy/visual") || name.starts_with("policy/confidence") {
                net.store.value_mut(id).fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let frame = Tensor::row_vector(vec![1.0, -2.0, 3.0, 0.5, 0.1]);
        let p = net.encode_inputs(&mut tape, &frame, &[0.9, 0.1]).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_actor_head_gives_uniform_distribution() {
        let mut net = tiny_policy(2);
        set_actor_bias(&mut net, [0.0; 3]);
        let frame = Tensor::row_vector(vec![0.3; 5]);
        let out = net.policy_step(&frame, &[0.5, 0.5], &net.zero_hidden(), None).unwrap();
        for p in out.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((out.entropy() - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn greedy_mode_takes_the_argmax() {
        let mut net = tiny_policy(3);
        set_actor_bias(&mut net, [2.0, 0.0, 0.0]);
        let frame = Tensor::row_vector(vec![0.3; 5]);
        let out = net.policy_step(&frame, &[0.5, 0.5], &net.zero_hidden(), None).unwrap();
        assert_eq!(out.action, Action::Continue);
        assert!((out.log_prob - out.probs[0].ln()).abs() < 1e-12);
    }

    #[test]
    fn sampled_frequencies_match_the_distribution() {
        let mut net = tiny_policy(4);
        let target = [0.2f64, 0.3, 0.5];
        set_actor_bias(&mut net, [target[0].ln(), target[1].ln(), target[2].ln()]);
        let frame = Tensor::row_vector(vec![0.3; 5]);
        let hidden = net.zero_hidden();

        let probe = net.policy_step(&frame, &[0.5, 0.5], &hidden, None).unwrap();
        for (p, t) in probe.probs.iter().zip(target) {
            assert!((p - t).abs() < 1e-9, "distribution setup failed: {p} vs {t}");
        }

        let mut rng = seeded(9, "sampling-test");
        let n = 100_000usize;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let out = net.policy_step(&frame, &[0.5, 0.5], &hidden, Some(&mut rng)).unwrap();
            counts[out.action.index()] += 1;
        }
        for (i, t) in target.iter().enumerate() {
            let sigma = (t * (1.0 - t) * n as f64).sqrt();
            let diff = (counts[i] as f64 - t * n as f64).abs();
            assert!(diff <= 3.0 * sigma, "action {i}: off by {diff}, 3 sigma = {}", 3.0 * sigma);
        }
    }

    #[test]
    fn entropy_stays_within_bounds() {
        let net = tiny_policy(5);
        let frame = Tensor::row_vector(vec![0.7, -0.1, 0.4, 0.9, -0.5]);
        let out = net.policy_step(&frame, &[0.8, 0.2], &net.zero_hidden(), None).unwrap();
        let h = out.entropy();
        assert!(h >= 0.0 && h <= 3f64.ln() + 1e-12, "entropy {h}");
        let sum = out.probs[0] + out.probs[1] + out.probs[2];
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_distribution_reports_divergence() {
        let mut net = tiny_policy(6);
        let ids: Vec<_> = net.store.ids().collect();
        for id in ids {
            if net.store.name(id) == "policy/actor/w" {
                net.store.value_mut(id).set(0, 0, f64::NAN);
            }
        }
        let frame = Tensor::row_vector(vec![0.3; 5]);
        let err = net.policy_step(&frame, &[0.5, 0.5], &net.zero_hidden(), None).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "got {err:?}");
    }

    fn rollout_fixture() -> (crate::env::clip::Dataset, Detector<f64>, SynthConfig) {
        let synth = SynthConfig {
            feature_dim: 5,
            duration_range: [2.0, 3.0],
            seed: 17,
            ..SynthConfig::default()
        };
        let data = crate::env::clip::Dataset::new(generate_dataset(&synth, 3).unwrap()).unwrap();
        let det_cfg = DetectorConfig {
            window: 3,
            anticipation: 2,
            feature_dim: 5,
            projection_dim: 8,
            ff_dim: 8,
            layers: 1,
            heads: 1,
            dropout: 0.0,
        };
        let det = Detector::init(&det_cfg, 3).unwrap();
        (data, det, synth)
    }

    #[test]
    fn always_exit_policy_stops_at_frame_zero() {
        let (data, det, _) = rollout_fixture();
        let mut net = tiny_policy(7);
        set_actor_bias(&mut net, [-10.0, 10.0, -10.0]);
        let rollout = rollout_episode(&data.clips[0], 0, &det, &net, None).unwrap();
        assert_eq!(rollout.steps.len(), 1);
        assert_eq!(rollout.exit_point(), 0);
        assert_eq!(rollout.state.exit_action, Some(Action::ExitMistake));
    }

    #[test]
    fn never_exit_policy_reaches_the_natural_end() {
        let (data, det, _) = rollout_fixture();
        let mut net = tiny_policy(8);
        set_actor_bias(&mut net, [10.0, -10.0, -10.0]);
        let clip = &data.clips[0];
        let rollout = rollout_episode(clip, 0, &det, &net, None).unwrap();
        assert_eq!(rollout.steps.len(), clip.frame_count());
        assert_eq!(rollout.exit_point(), clip.frame_count());
        assert_eq!(rollout.state.exit_action, None);
    }

    #[test]
    fn greedy_rollouts_are_reproducible_and_sampled_ones_seeded() {
        let (data, det, _) = rollout_fixture();
        let net = tiny_policy(9);
        let clip = &data.clips[1];

        let a = rollout_episode(clip, 1, &det, &net, None).unwrap();
        let b = rollout_episode(clip, 1, &det, &net, None).unwrap();
        assert_eq!(a.steps.len(), b.steps.len());
        assert_eq!(a.exit_point(), b.exit_point());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.action, y.action);
            assert_eq!(x.log_prob, y.log_prob);
        }

        let mut r1 = seeded(5, "rollout");
        let mut r2 = seeded(5, "rollout");
        let s1 = rollout_episode(clip, 1, &det, &net, Some(&mut r1)).unwrap();
        let s2 = rollout_episode(clip, 1, &det, &net, Some(&mut r2)).unwrap();
        assert_eq!(s1.exit_point(), s2.exit_point());
    }

    #[test]
    fn non_causal_config_is_rejected() {
        let cfg = PolicyConfig { causal: false, ..PolicyConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(PolicyNet::<f64>::init(&cfg, 4, 0).is_err());
    }
}
