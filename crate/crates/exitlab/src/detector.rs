//! Future-anticipating mistake detector.
//!
//! The detector watches the `K` most recent frame features of a streaming
//! clip and answers two questions at once: *is the performer making a
//! mistake?* and *what will the next `L` frames look like?* Each observed
//! frame is projected into the model width, `L + 1` zero tokens are appended
//! (placeholders for the anticipated frames plus one classification token),
//! sinusoidal position embeddings and three learned modality embeddings
//! (observed / anticipated / classification) are added, and the sequence runs
//! through a transformer encoder. The classification token's output feeds a
//! two-way logit head; the anticipated tokens feed a head that regresses the
//! raw input features of upcoming frames.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::clip::{ClipRecord, Dataset, Split, LABEL_MISTAKE};
use crate::env::synth::{clip_plan, SynthConfig};
use crate::error::{shape_error, Error, Result};
use crate::eval::{average_precision, ApItem};
use crate::numerics::checkpoint;
use crate::numerics::layers::{Dense, Dropout, EncoderLayer, Init};
use crate::numerics::optim::{Algorithm, Optimizer, OptimizerConfig};
use crate::numerics::store::{ParamId, ParameterStore};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Element, Tensor};
use crate::rng::seeded;

/// Architecture of the mistake detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Number of recent frames the detector observes (`K`).
    pub window: usize,
    /// Number of future frames the detector anticipates (`L`).
    pub anticipation: usize,
    /// Input feature dimension (`F`).
    pub feature_dim: usize,
    /// Model width every token is projected into.
    pub projection_dim: usize,
    /// Feed-forward hidden width inside each encoder block.
    pub ff_dim: usize,
    /// Encoder block count.
    pub layers: usize,
    /// Attention head count; must divide `projection_dim`.
    pub heads: usize,
    /// Dropout probability applied during pretraining only.
    pub dropout: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window: 5,
            anticipation: 20,
            feature_dim: 16,
            projection_dim: 64,
            ff_dim: 64,
            layers: 1,
            heads: 1,
            dropout: 0.0,
        }
    }
}

impl DetectorConfig {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        DetectorConfig {
            heads: 2,
            ..DetectorConfig::default()
        }
    }

    /// Full-scale configuration for precomputed video features.
    pub fn paper() -> Self {
        DetectorConfig {
            window: 5,
            anticipation: 20,
            feature_dim: 2048,
            projection_dim: 2048,
            ff_dim: 1024,
            layers: 1,
            heads: 1,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("detector window must be at least 1 frame".into()));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("projection_dim", self.projection_dim),
            ("ff_dim", self.ff_dim),
            ("layers", self.layers),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("detector {name} must be positive")));
            }
        }
        if self.projection_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "detector projection_dim {} is not divisible by heads {}",
                self.projection_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "detector dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Total token count per forward pass: `K` observed + `L` anticipated +
    /// one classification token.
    pub fn sequence_len(&self) -> usize {
        self.window + self.anticipation + 1
    }
}

/// One detector verdict over a frame window.
#[derive(Debug, Clone)]
pub struct DetectorOutput<E: Element> {
    /// Raw two-way logits: `[mistake, correct]`.
    pub logits: [E; 2],
    /// Softmax of the logits; sums to one.
    pub confidences: [E; 2],
    /// Anticipated raw features for the next `L` frames (`L x F`).
    pub anticipated: Tensor<E>,
    /// Attention of the classification token over the `K` observed
    /// positions, renormalized to sum to one and averaged over heads and
    /// layers. Present only when requested.
    pub attention: Option<Vec<E>>,
}

impl<E: Element> DetectorOutput<E> {
    /// Hard label implied by the confidences; ties go to "mistake".
    pub fn predicted_label(&self) -> u8 {
        if self.confidences[0].to_f64() >= self.confidences[1].to_f64() {
            LABEL_MISTAKE
        } else {
            crate::env::clip::LABEL_CORRECT
        }
    }

    /// Natural-log entropy of the confidence distribution.
    pub fn entropy(&self) -> f64 {
        let mut h = 0.0;
        for c in self.confidences {
            let p = c.to_f64();
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        h
    }
}

/// Tape handles produced by one detector forward pass.
pub struct DetectorVars {
    /// `(1, 2)` logits.
    pub logits: Var,
    /// `(1, 2)` softmax confidences.
    pub confidences: Var,
    /// `(L, F)` anticipated features; absent when `L = 0`.
    pub anticipated: Option<Var>,
    /// Full `(K+L+1, K+L+1)` attention probabilities, one per (layer, head).
    pub attention: Vec<Var>,
}

/// The detector model: a parameter store plus layer handles into it.
#[derive(Debug, Clone)]
pub struct Detector<E: Element> {
    pub cfg: DetectorConfig,
    pub store: ParameterStore<E>,
    input_proj: Dense,
    modality: ParamId,
    encoder: Vec<EncoderLayer>,
    anticipation_head: Dense,
    logit_head: Dense,
}

const MODALITIES: usize = 3;

impl<E: Element> Detector<E> {
    /// Creates a freshly initialized detector.
    pub fn init(cfg: &DetectorConfig, seed: u64) -> Result<Detector<E>> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = seeded(seed, "detector-init");
        let p = cfg.projection_dim;
        let input_proj =
            Dense::register(&mut store, "detector/proj", cfg.feature_dim, p, Init::UniformFanIn, &mut rng)?;
        let modality = store.register(
            "detector/modality".to_string(),
            Init::UniformSymmetric(1.0 / (p as f64).sqrt()).sample(MODALITIES, p, &mut rng),
        )?;
        let mut encoder = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            encoder.push(EncoderLayer::register(
                &mut store,
                &format!("detector/enc{i}"),
                p,
                cfg.ff_dim,
                cfg.heads,
                &mut rng,
            )?);
        }
        let anticipation_head = Dense::register(
            &mut store,
            "detector/anticipation",
            p,
            cfg.feature_dim,
            Init::UniformFanIn,
            &mut rng,
        )?;
        let logit_head =
            Dense::register(&mut store, "detector/logits", p, 2, Init::UniformFanIn, &mut rng)?;
        Ok(Detector { cfg: cfg.clone(), store, input_proj, modality, encoder, anticipation_head, logit_head })
    }

    /// Rebuilds layer handles over an existing store (e.g. from a checkpoint).
    pub fn from_store(cfg: &DetectorConfig, store: ParameterStore<E>) -> Result<Detector<E>> {
        cfg.validate()?;
        let p = cfg.projection_dim;
        let input_proj = Dense::from_store(&store, "detector/proj", cfg.feature_dim, p)?;
        let modality = store
            .id("detector/modality")
            .ok_or_else(|| Error::MissingArtifact("parameter \"detector/modality\" not found in checkpoint".into()))?;
        if store.value(modality).shape() != (MODALITIES, p) {
            return Err(Error::Config(format!(
                "modality embedding has shape {}, expected {MODALITIES}x{p}",
                store.value(modality).shape_string()
            )));
        }
        let mut encoder = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            encoder.push(EncoderLayer::from_store(&store, &format!("detector/enc{i}"), p, cfg.ff_dim, cfg.heads)?);
        }
        let anticipation_head = Dense::from_store(&store, "detector/anticipation", p, cfg.feature_dim)?;
        let logit_head = Dense::from_store(&store, "detector/logits", p, 2)?;
        Ok(Detector { cfg: cfg.clone(), store, input_proj, modality, encoder, anticipation_head, logit_head })
    }

    /// Records the full forward computation on `tape`. The window must be
    /// `(K, F)`, oldest frame first.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<E>,
        window: &Tensor<E>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<DetectorVars> {
        let (k, l, f, p) = (
            self.cfg.window,
            self.cfg.anticipation,
            self.cfg.feature_dim,
            self.cfg.projection_dim,
        );
        if window.shape() != (k, f) {
            return Err(shape_error("detector_forward", format!("{k}x{f} window"), window.shape_string()));
        }
        let obs = tape.constant(window.clone());
        let obs = self.input_proj.forward(tape, &self.store, obs)?;
        let placeholders = tape.constant(Tensor::zeros(l + 1, p));
        let seq = tape.concat_rows(&[obs, placeholders])?;

        let pos = tape.constant(sinusoidal_embeddings(k + l + 1, p));
        let seq = tape.add(seq, pos)?;

        let modality = tape.param(&self.store, self.modality);
        let observed = tape.slice_rows(modality, 0, 1)?;
        let observed = tape.repeat_row(observed, k)?;
        let class = tape.slice_rows(modality, 2, 1)?;
        let modality_rows = if l > 0 {
            let anticipated = tape.slice_rows(modality, 1, 1)?;
            let anticipated = tape.repeat_row(anticipated, l)?;
            tape.concat_rows(&[observed, anticipated, class])?
        } else {
            tape.concat_rows(&[observed, class])?
        };
        let mut x = tape.add(seq, modality_rows)?;

        let mut attention = Vec::with_capacity(self.cfg.layers * self.cfg.heads);
        for layer in &self.encoder {
            let (next, probs) = layer.forward_dropout(tape, &self.store, x, dropout.as_deref_mut())?;
            x = next;
            attention.extend(probs);
        }

        let anticipated = if l > 0 {
            let tokens = tape.slice_rows(x, k, l)?;
            Some(self.anticipation_head.forward(tape, &self.store, tokens)?)
        } else {
            None
        };
        let class_token = tape.slice_rows(x, k + l, 1)?;
        let logits = self.logit_head.forward(tape, &self.store, class_token)?;
        let confidences = tape.softmax_rows(logits);
        Ok(DetectorVars { logits, confidences, anticipated, attention })
    }

    /// Inference-mode forward pass (no dropout, fresh tape).
    pub fn forward(&self, window: &Tensor<E>, capture_attention: bool) -> Result<DetectorOutput<E>> {
        let mut tape = Tape::new();
        let vars = self.forward_on_tape(&mut tape, window, None)?;
        self.extract_output(&tape, &vars, capture_attention)
    }

    /// Reads plain tensors out of a recorded forward pass.
    pub fn extract_output(
        &self,
        tape: &Tape<E>,
        vars: &DetectorVars,
        capture_attention: bool,
    ) -> Result<DetectorOutput<E>> {
        let logits_t = tape.value(vars.logits);
        let conf_t = tape.value(vars.confidences);
        let logits = [logits_t.get(0, 0), logits_t.get(0, 1)];
        let confidences = [conf_t.get(0, 0), conf_t.get(0, 1)];
        let anticipated = match vars.anticipated {
            Some(v) => tape.value(v).clone(),
            None => Tensor::zeros(0, self.cfg.feature_dim),
        };
        let attention = if capture_attention {
            Some(self.average_attention(tape, &vars.attention)?)
        } else {
            None
        };
        Ok(DetectorOutput { logits, confidences, anticipated, attention })
    }

    /// Attention of the classification token over the `K` observed
    /// positions: each (layer, head) row is renormalized to sum to one, then
    /// averaged.
    fn average_attention(&self, tape: &Tape<E>, attention: &[Var]) -> Result<Vec<E>> {
        let (k, l) = (self.cfg.window, self.cfg.anticipation);
        if attention.is_empty() {
            return Err(Error::Internal("forward pass recorded no attention maps".into()));
        }
        let mut avg = vec![0.0f64; k];
        for &probs in attention {
            let m = tape.value(probs);
            let mut row: Vec<f64> = (0..k).map(|j| m.get(k + l, j).to_f64()).collect();
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(Error::Divergence("attention row over observed positions sums to zero".into()));
            }
            for (a, r) in avg.iter_mut().zip(&mut row) {
                *a += *r / total;
            }
        }
        let n = attention.len() as f64;
        Ok(avg.into_iter().map(|a| E::from_f64(a / n)).collect())
    }

    /// Records the pretraining loss `w1 * CE(label, logits) + w2 * L1(future,
    /// anticipated)` for one example. `future` must be `(L, F)` — the true
    /// upcoming features, final frame repeated past the clip end.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<E>,
        window: &Tensor<E>,
        future: &Tensor<E>,
        label: u8,
        weights: &DetectorLossWeights,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let (l, f) = (self.cfg.anticipation, self.cfg.feature_dim);
        if future.shape() != (l, f) {
            return Err(shape_error("detector_loss", format!("{l}x{f} future truth"), future.shape_string()));
        }
        let vars = self.forward_on_tape(tape, window, dropout.as_deref_mut())?;
        let ce = tape.cross_entropy(vars.logits, label as usize)?;
        let classification = tape.affine(ce, weights.w1, 0.0);
        match vars.anticipated {
            // Skipping the anticipation term when its weight is zero makes
            // the "no gradient reaches the anticipation head" contract exact.
            Some(anticipated) if weights.w2 != 0.0 => {
                let truth = tape.constant(future.clone());
                let l1 = tape.l1_mean(truth, anticipated)?;
                let anticipation = tape.affine(l1, weights.w2, 0.0);
                tape.add(classification, anticipation)
            }
            _ => Ok(classification),
        }
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Saves parameters plus a JSON sidecar describing the run.
    pub fn save(&self, path: &Path, meta: &DetectorMeta) -> Result<()> {
        checkpoint::save_with_meta(path, &self.store, meta)
    }

    /// Loads a detector and its sidecar metadata.
    pub fn load(path: &Path) -> Result<(Detector<E>, DetectorMeta)> {
        let meta: DetectorMeta = checkpoint::load_meta(path)?;
        let store = checkpoint::load(path)?;
        let detector = Detector::from_store(&meta.config, store)?;
        Ok((detector, meta))
    }
}

/// Loss weights: `w1` scales the classification cross-entropy, `w2` the mean
/// absolute anticipation error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorLossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for DetectorLossWeights {
    fn default() -> Self {
        DetectorLossWeights { w1: 1.0, w2: 0.1 }
    }
}

impl DetectorLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1.is_finite() && self.w2.is_finite()) || self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(Error::Config(format!(
                "detector loss weights (w1={}, w2={}) must be finite and non-negative",
                self.w1, self.w2
            )));
        }
        Ok(())
    }
}

/// Sidecar metadata written next to detector checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub config: DetectorConfig,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
}

/// Pretraining schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub loss: DetectorLossWeights,
    pub optimizer: OptimizerConfig,
    /// Emit a loss record every this many steps (and at the final step).
    pub log_every: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            steps: 1500,
            batch_size: 16,
            loss: DetectorLossWeights::default(),
            optimizer: OptimizerConfig {
                algorithm: Algorithm::AdamW,
                learning_rate: 1e-3,
                weight_decay: 1e-4,
                ..OptimizerConfig::default()
            },
            log_every: 100,
        }
    }
}

impl DetectorTrainConfig {
    /// Full-scale schedule for precomputed video features.
    pub fn paper() -> Self {
        DetectorTrainConfig {
            batch_size: 128,
            optimizer: OptimizerConfig {
                algorithm: Algorithm::AdamW,
                learning_rate: 1e-6,
                weight_decay: 5e-2,
                ..OptimizerConfig::default()
            },
            ..DetectorTrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("detector batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("detector log_every must be positive".into()));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

/// One running-loss record from pretraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
}

/// Outcome of a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub records: Vec<PretrainRecord>,
}

/// Pretrains the detector on randomly sampled (clip, time) pairs from the
/// train split. Deterministic under a fixed seed.
pub fn pretrain<E: Element>(
    detector: &mut Detector<E>,
    data: &Dataset,
    cfg: &DetectorTrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    cfg.validate()?;
    let train = data.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("detector pretraining needs a non-empty train split".into()));
    }
    if data.feature_dim != detector.cfg.feature_dim {
        return Err(Error::Config(format!(
            "dataset feature dim {} does not match detector feature dim {}",
            data.feature_dim, detector.cfg.feature_dim
        )));
    }
    let mut rng = seeded(seed, "detector-pretrain");
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut records = Vec::new();
    let mut final_loss = f64::NAN;
    let (k, l) = (detector.cfg.window, detector.cfg.anticipation);

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let clip = &data.clips[train[rand::Rng::random_range(&mut rng, 0..train.len())]];
            let t = rand::Rng::random_range(&mut rng, 0..clip.frame_count());
            let window = clip.window::<E>(t, k)?;
            let future = clip.future_frames::<E>(t, l);
            let mut dropout = Dropout { p: detector.cfg.dropout, rng: &mut rng };
            losses.push(detector.loss_on_tape(
                &mut tape,
                &window,
                &future,
                clip.label,
                &cfg.loss,
                Some(&mut dropout),
            )?);
        }
        let mean = tape.mean_of(&losses)?;
        let loss = tape.scalar(mean).to_f64();
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "detector pretraining loss became {loss} at step {step}"
            )));
        }
        let grads = tape.backward(mean)?;
        tape.accumulate_param_grads(&grads, &mut detector.store, E::ONE)?;
        optimizer.step(&mut detector.store)?;
        detector.store.zero_grads();
        final_loss = loss;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            records.push(PretrainRecord { step, loss });
        }
    }
    Ok(PretrainReport { steps: cfg.steps, final_loss, records })
}

/// Memoizes detector confidences per `(clip index, frame)`. Valid only while
/// the detector is frozen and the dataset indexing is stable — exactly the
/// situation during policy training and evaluation.
#[derive(Debug, Default)]
pub struct ConfidenceCache<E: Element> {
    map: HashMap<(usize, usize), [E; 2]>,
}

impl<E: Element> ConfidenceCache<E> {
    pub fn new() -> Self {
        ConfidenceCache { map: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Confidences of `detector` on the window ending at frame `t` of
    /// `clip`, computing and memoizing on first use.
    pub fn confidences(
        &mut self,
        detector: &Detector<E>,
        clip: &ClipRecord,
        clip_index: usize,
        t: usize,
    ) -> Result<[E; 2]> {
        if let Some(c) = self.map.get(&(clip_index, t)) {
            return Ok(*c);
        }
        let window = clip.window::<E>(t, detector.cfg.window)?;
        let out = detector.forward(&window, false)?;
        self.map.insert((clip_index, t), out.confidences);
        Ok(out.confidences)
    }
}

/// AP of the detector alone with the entire clip observed: one window at the
/// final frame per clip, scored by mistake confidence.
pub fn full_observation_ap<E: Element>(
    detector: &Detector<E>,
    data: &Dataset,
    split: Split,
) -> Result<f64> {
    let mut items = Vec::new();
    for &i in &data.split_indices(split) {
        let clip = &data.clips[i];
        let window = clip.window::<E>(clip.frame_count() - 1, detector.cfg.window)?;
        let out = detector.forward(&window, false)?;
        items.push(ApItem {
            score: out.confidences[0].to_f64(),
            positive: clip.label == LABEL_MISTAKE,
            tie_key: clip.id.clone(),
        });
    }
    average_precision(&items)
}

/// AP pooled over every window at or after the clip's evidence onset.
/// Requires the synthetic generator config that produced `data` in order to
/// recover onset frames.
pub fn post_onset_ap<E: Element>(
    detector: &Detector<E>,
    data: &Dataset,
    split: Split,
    synth: &SynthConfig,
) -> Result<f64> {
    let items = post_onset_items(detector, data, split, synth, |out| out.confidences[0].to_f64())?;
    average_precision(&items)
}

/// Fraction of post-onset windows whose hard prediction matches the label.
pub fn post_onset_accuracy<E: Element>(
    detector: &Detector<E>,
    data: &Dataset,
    split: Split,
    synth: &SynthConfig,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (ordinal, &i) in data.split_indices(split).iter().enumerate() {
        let clip = &data.clips[i];
        let plan = clip_plan(synth, split, ordinal);
        for t in plan.onset_frame..clip.frame_count() {
            let window = clip.window::<E>(t, detector.cfg.window)?;
            let out = detector.forward(&window, false)?;
            total += 1;
            if out.predicted_label() == clip.label {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Config("split has no post-onset windows".into()));
    }
    Ok(hits as f64 / total as f64)
}

fn post_onset_items<E: Element>(
    detector: &Detector<E>,
    data: &Dataset,
    split: Split,
    synth: &SynthConfig,
    score: impl Fn(&DetectorOutput<E>) -> f64,
) -> Result<Vec<ApItem>> {
    let mut items = Vec::new();
    for (ordinal, &i) in data.split_indices(split).iter().enumerate() {
        let clip = &data.clips[i];
        let plan = clip_plan(synth, split, ordinal);
        for t in plan.onset_frame..clip.frame_count() {
            let window = clip.window::<E>(t, detector.cfg.window)?;
            let out = detector.forward(&window, false)?;
            items.push(ApItem {
                score: score(&out),
                positive: clip.label == LABEL_MISTAKE,
                tie_key: format!("{}:{t}", clip.id),
            });
        }
    }
    Ok(items)
}

/// Sinusoidal position embeddings: even columns carry `sin(pos * freq_i)`,
/// odd columns `cos(pos * freq_i)` with geometrically spaced frequencies.
fn sinusoidal_embeddings<E: Element>(positions: usize, dim: usize) -> Tensor<E> {
    let mut out = Tensor::zeros(positions, dim);
    for pos in 0..positions {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.set(pos, i, E::from_f64(v));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::synth::generate_split_dataset;

    fn tiny_cfg() -> DetectorConfig {
        DetectorConfig {
            window: 3,
            anticipation: 4,
            feature_dim: 6,
            projection_dim: 8,
            ff_dim: 8,
            layers: 1,
            heads: 2,
            dropout: 0.0,
        }
    }

    fn tiny_window(cfg: &DetectorConfig) -> Tensor<f64> {
        let mut w = Tensor::zeros(cfg.window, cfg.feature_dim);
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.7).sin();
        }
        w
    }

    #[test]
    fn output_shapes_follow_the_config() {
        let cfg = DetectorConfig { window: 5, anticipation: 20, feature_dim: 16, ..DetectorConfig::desk() };
        let det = Detector::<f64>::init(&cfg, 7).unwrap();
        let window = Tensor::full(5, 16, 0.3);
        let out = det.forward(&window, true).unwrap();
        assert_eq!(out.anticipated.shape(), (20, 16));
        let sum = out.confidences[0] + out.confidences[1];
        assert!((sum - 1.0).abs() < 1e-6);
        let attn = out.attention.unwrap();
        assert_eq!(attn.len(), 5);
        let total: f64 = attn.iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "attention sums to {total}");
    }

    #[test]
    fn zero_anticipation_still_classifies() {
        let cfg = DetectorConfig { anticipation: 0, ..tiny_cfg() };
        let det = Detector::<f64>::init(&cfg, 1).unwrap();
        let out = det.forward(&tiny_window(&cfg), false).unwrap();
        assert_eq!(out.anticipated.shape(), (0, cfg.feature_dim));
        assert!(out.confidences[0].is_finite() && out.confidences[1].is_finite());
    }

    #[test]
    fn zero_parameters_yield_even_confidences() {
        let cfg = tiny_cfg();
        let mut det = Detector::<f64>::init(&cfg, 2).unwrap();
        let ids: Vec<_> = det.store.ids().collect();
        for id in ids {
            det.store.value_mut(id).fill(0.0);
        }
        let out = det.forward(&tiny_window(&cfg), false).unwrap();
        assert_eq!(out.logits[0], 0.0);
        assert_eq!(out.logits[1], 0.0);
        assert_eq!(out.confidences[0], 0.5);
        assert_eq!(out.confidences[1], 0.5);
    }

    #[test]
    fn forward_is_deterministic_and_rejects_bad_windows() {
        let cfg = tiny_cfg();
        let det = Detector::<f64>::init(&cfg, 3).unwrap();
        let w = tiny_window(&cfg);
        let a = det.forward(&w, false).unwrap();
        let b = det.forward(&w, false).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.anticipated.data(), b.anticipated.data());

        let bad = Tensor::<f64>::zeros(cfg.window + 1, cfg.feature_dim);
        assert!(det.forward(&bad, false).is_err());
    }

    #[test]
    fn loss_matches_hand_combined_terms() {
        let cfg = tiny_cfg();
        let det = Detector::<f64>::init(&cfg, 4).unwrap();
        let window = tiny_window(&cfg);
        let future = Tensor::full(cfg.anticipation, cfg.feature_dim, 0.25);
        let weights = DetectorLossWeights { w1: 1.0, w2: 0.1 };

        let mut tape = Tape::new();
        let loss = det.loss_on_tape(&mut tape, &window, &future, 0, &weights, None).unwrap();
        let loss = tape.scalar(loss);

        let out = det.forward(&window, false).unwrap();
        let ce = -out.confidences[0].ln();
        let n = (cfg.anticipation * cfg.feature_dim) as f64;
        let l1: f64 = out
            .anticipated
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (future.data()[i] - v).abs())
            .sum::<f64>()
            / n;
        assert!((loss - (ce + 0.1 * l1)).abs() < 1e-12, "loss {loss} vs hand {}", ce + 0.1 * l1);
    }

    #[test]
    fn zero_anticipation_weight_leaves_head_gradient_exactly_zero() {
        let cfg = tiny_cfg();
        let mut det = Detector::<f64>::init(&cfg, 5).unwrap();
        let window = tiny_window(&cfg);
        let future = Tensor::full(cfg.anticipation, cfg.feature_dim, 0.25);
        let head = det.anticipation_head.clone();

        for (w2, expect_zero) in [(0.0, true), (0.1, false)] {
            let weights = DetectorLossWeights { w1: 1.0, w2 };
            let mut tape = Tape::new();
            let loss = det
                .loss_on_tape(&mut tape, &window, &future, 0, &weights, None)
                .unwrap();
            let grads = tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&grads, &mut det.store, 1.0).unwrap();
            let all_zero = det.store.grad(head.w).data().iter().all(|&g| g == 0.0)
                && det.store.grad(head.b).data().iter().all(|&g| g == 0.0);
            assert_eq!(all_zero, expect_zero, "w2={w2}");
            det.store.zero_grads();
        }
    }

    fn tiny_dataset(noise: f64, seed: u64) -> (Dataset, SynthConfig) {
        let synth = SynthConfig {
            feature_dim: 6,
            duration_range: [2.0, 4.0],
            noise_level: noise,
            seed,
            ..SynthConfig::default()
        };
        (generate_split_dataset(&synth, 12, 4, 4).unwrap(), synth)
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let cfg = tiny_cfg();
        let mut det = Detector::<f64>::init(&cfg, 6).unwrap();
        let before = det.checksum();
        let (data, _) = tiny_dataset(0.5, 11);
        let train_cfg = DetectorTrainConfig { steps: 0, ..DetectorTrainConfig::default() };
        let report = pretrain(&mut det, &data, &train_cfg, 9).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(det.checksum(), before);
    }

    #[test]
    fn pretraining_is_deterministic_under_a_seed() {
        let cfg = tiny_cfg();
        let (data, _) = tiny_dataset(0.5, 12);
        let train_cfg = DetectorTrainConfig { steps: 5, batch_size: 4, ..DetectorTrainConfig::default() };
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut det = Detector::<f64>::init(&cfg, 7).unwrap();
            let report = pretrain(&mut det, &data, &train_cfg, 21).unwrap();
            runs.push((det.checksum(), report.final_loss));
        }
        assert_eq!(runs[0], runs[1]);
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let cfg = tiny_cfg();
        let det = Detector::<f32>::init(&cfg, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.exl1");
        let meta = DetectorMeta { config: cfg.clone(), seed: 8, steps: 0, final_loss: 0.0 };
        det.save(&path, &meta).unwrap();
        let (loaded, meta2) = Detector::<f32>::load(&path).unwrap();
        assert_eq!(meta2.config, cfg);
        assert_eq!(loaded.checksum(), det.checksum());
        let w = Tensor::<f32>::full(cfg.window, cfg.feature_dim, 0.4);
        let a = det.forward(&w, false).unwrap();
        let b = loaded.forward(&w, false).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn confidence_cache_matches_direct_forward() {
        let cfg = tiny_cfg();
        let det = Detector::<f64>::init(&cfg, 9).unwrap();
        let (data, _) = tiny_dataset(0.5, 13);
        let mut cache = ConfidenceCache::new();
        let clip = &data.clips[0];
        let cached = cache.confidences(&det, clip, 0, 1).unwrap();
        let direct = det.forward(&clip.window(1, cfg.window).unwrap(), false).unwrap();
        assert_eq!(cached, direct.confidences);
        let again = cache.confidences(&det, clip, 0, 1).unwrap();
        assert_eq!(again, cached);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn probe_aps_are_defined_on_tiny_data() {
        let cfg = tiny_cfg();
        let det = Detector::<f64>::init(&cfg, 10).unwrap();
        let (data, synth) = tiny_dataset(0.5, 14);
        let full = full_observation_ap(&det, &data, Split::Test).unwrap();
        let post = post_onset_ap(&det, &data, Split::Test, &synth).unwrap();
        assert!((0.0..=1.0).contains(&full));
        assert!((0.0..=1.0).contains(&post));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            DetectorConfig { window: 0, ..tiny_cfg() },
            DetectorConfig { heads: 3, ..tiny_cfg() },
            DetectorConfig { dropout: 1.0, ..tiny_cfg() },
            DetectorConfig { projection_dim: 0, ..tiny_cfg() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?} should be invalid");
        }
    }
}
