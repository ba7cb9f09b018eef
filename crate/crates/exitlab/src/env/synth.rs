//! Synthetic keystep generator.
//!
//! Each clip carries a hidden evidence onset: before it, frames follow a
//! label-independent mean-reverting walk around the origin; from the onset
//! frame on, they drift toward a label-specific prototype. The label is
//! therefore undecidable from pre-onset frames and increasingly decidable
//! afterwards — exactly the structure an early-exit policy should exploit.

use rand::SeedableRng;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::clip::{time_to_frame_index, ClipRecord, Dataset, Split, LABEL_CORRECT, LABEL_MISTAKE};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::rng::{derive_seed, derive_seed_indexed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Feature dimension F.
    pub feature_dim: usize,
    /// Clip duration range in seconds, inclusive.
    pub duration_range: [f64; 2],
    /// Frames per second.
    pub fps: f64,
    /// Probability that a clip is a mistake.
    pub mistake_rate: f64,
    /// Evidence onset as a fraction of clip duration, `[lo, hi]`.
    pub onset_range: [f64; 2],
    /// Distance between the two class prototypes.
    pub prototype_separation: f64,
    /// Standard deviation of per-frame Gaussian noise.
    pub noise_level: f64,
    /// Per-frame pull toward the target (origin before onset, prototype after).
    pub drift_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            feature_dim: 16,
            duration_range: [4.0, 12.0],
            fps: 2.0,
            mistake_rate: 0.5,
            onset_range: [0.2, 0.5],
            prototype_separation: 4.0,
            noise_level: 0.5,
            drift_rate: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Benchmark geometry for minutes-scale CPU runs: one frame per second,
    /// six-to-twelve-second clips, onsets in the first third, and mild noise.
    /// At this frame rate the time cost of watching a clip to its onset is
    /// clearly smaller than the value of the evidence gained, so exit
    /// policies trained on this data learn to wait rather than guess at the
    /// first frame.
    pub fn desk() -> Self {
        SynthConfig {
            fps: 1.0,
            duration_range: [6.0, 12.0],
            onset_range: [0.2, 0.35],
            noise_level: 0.4,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        let [t_min, t_max] = self.duration_range;
        if !(t_min > 0.0 && t_min <= t_max && t_max.is_finite()) {
            return Err(Error::Config(format!(
                "duration_range must satisfy 0 < min <= max, got [{t_min}, {t_max}]"
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if t_min * self.fps < 1.0 {
            return Err(Error::Config(format!(
                "duration_range minimum {t_min}s yields no frames at {} fps",
                self.fps
            )));
        }
        if !(0.0..=1.0).contains(&self.mistake_rate) {
            return Err(Error::Config(format!(
                "mistake_rate must lie in [0, 1], got {}",
                self.mistake_rate
            )));
        }
        let [lo, hi] = self.onset_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "onset_range must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]"
            )));
        }
        if self.prototype_separation < 0.0 {
            return Err(Error::Config("prototype_separation must be non-negative".into()));
        }
        if self.noise_level < 0.0 {
            return Err(Error::Config("noise_level must be non-negative".into()));
        }
        if !(self.drift_rate > 0.0 && self.drift_rate <= 1.0) {
            return Err(Error::Config(format!(
                "drift_rate must lie in (0, 1], got {}",
                self.drift_rate
            )));
        }
        Ok(())
    }

    /// The two class prototypes, `(mistake, correct)`, at ±separation/2 along
    /// a unit direction derived from the dataset seed. Shared by every split
    /// generated from the same seed.
    pub fn prototypes(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rng = Rng::seed_from_u64(derive_seed(self.seed, "prototype"));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut direction: Vec<f64> = (0..self.feature_dim).map(|_| normal.sample(&mut rng)).collect();
        let norm: f64 = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            direction = std::iter::once(1.0)
                .chain(std::iter::repeat(0.0))
                .take(self.feature_dim)
                .collect();
        } else {
            for v in &mut direction {
                *v /= norm;
            }
        }
        let half = self.prototype_separation / 2.0;
        let mistake: Vec<f64> = direction.iter().map(|v| -half * v).collect();
        let correct: Vec<f64> = direction.iter().map(|v| half * v).collect();
        (mistake, correct)
    }
}


/// Label, geometry, and onset of one clip — everything decided before any
/// feature noise is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipPlan {
    pub label: u8,
    pub frame_count: usize,
    /// Quantized duration, `frame_count / fps`.
    pub duration: f64,
    /// First frame index at which label evidence is present.
    pub onset_frame: usize,
}

fn clip_rng(cfg: &SynthConfig, split: Split, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed_indexed(
        cfg.seed,
        &format!("clip/{}", split.name()),
        index,
    ))
}

fn plan_from_rng(cfg: &SynthConfig, rng: &mut Rng) -> ClipPlan {
    let label = if rng.random_bool(cfg.mistake_rate) {
        LABEL_MISTAKE
    } else {
        LABEL_CORRECT
    };
    let [t_min, t_max] = cfg.duration_range;
    let raw_duration = if t_min == t_max { t_min } else { rng.random_range(t_min..t_max) };
    let frame_count = time_to_frame_index(raw_duration, cfg.fps)
        .expect("validated config")
        .max(1);
    let duration = frame_count as f64 / cfg.fps;
    let [lo, hi] = cfg.onset_range;
    let onset_time = if lo == hi {
        lo * duration
    } else {
        rng.random_range(lo * duration..hi * duration)
    };
    let onset_frame = time_to_frame_index(onset_time, cfg.fps)
        .expect("validated config")
        .min(frame_count - 1);
    ClipPlan {
        label,
        frame_count,
        duration,
        onset_frame,
    }
}

/// The plan of the `index`-th clip of `split`, recomputed from the seed.
/// Lets tests and probes recover each clip's evidence onset without storing
/// it in the record.
pub fn clip_plan(cfg: &SynthConfig, split: Split, index: usize) -> ClipPlan {
    let mut rng = clip_rng(cfg, split, index as u64);
    plan_from_rng(cfg, &mut rng)
}

fn generate_clip(
    cfg: &SynthConfig,
    split: Split,
    index: usize,
    prototypes: &(Vec<f64>, Vec<f64>),
) -> ClipRecord {
    let mut rng = clip_rng(cfg, split, index as u64);
    let plan = plan_from_rng(cfg, &mut rng);
    let target: &[f64] = if plan.label == LABEL_MISTAKE {
        &prototypes.0
    } else {
        &prototypes.1
    };
    let f = cfg.feature_dim;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Tensor::zeros(plan.frame_count, f);
    let mut state = vec![0.0f64; f];
    for k in 0..plan.frame_count {
        let post_onset = k >= plan.onset_frame;
        for (d, s) in state.iter_mut().enumerate() {
            let pull = if post_onset { target[d] } else { 0.0 };
            let noise = if cfg.noise_level > 0.0 {
                cfg.noise_level * normal.sample(&mut rng)
            } else {
                // Keep the draw count label- and noise-independent so
                // configurations differing only in noise stay comparable.
                let _ = normal.sample(&mut rng);
                0.0
            };
            *s += cfg.drift_rate * (pull - *s) + noise;
        }
        for (o, &v) in features.row_mut(k).iter_mut().zip(&state) {
            *o = v as f32;
        }
    }
    ClipRecord {
        id: format!("{}_{index:06}", split.name()),
        features,
        duration: plan.duration,
        fps: cfg.fps,
        label: plan.label,
        split,
    }
}

/// Generates `n_clips` train-split clips.
pub fn generate_dataset(cfg: &SynthConfig, n_clips: usize) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    if n_clips == 0 {
        return Err(Error::Config("n_clips must be at least 1".into()));
    }
    let prototypes = cfg.prototypes();
    Ok((0..n_clips)
        .map(|i| generate_clip(cfg, Split::Train, i, &prototypes))
        .collect())
}

/// Generates a full dataset with train/val/test splits. All splits share the
/// class prototypes but draw from disjoint random streams.
pub fn generate_split_dataset(
    cfg: &SynthConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<Dataset> {
    generate_split_dataset_with_workers(cfg, n_train, n_val, n_test, 1)
}

/// [`generate_split_dataset`] fanned out over a worker pool. Each clip's
/// stream is seeded from its `(split, index)` alone, so any worker count
/// produces the identical dataset.
pub fn generate_split_dataset_with_workers(
    cfg: &SynthConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    workers: usize,
) -> Result<Dataset> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Config("n_train must be at least 1".into()));
    }
    let prototypes = cfg.prototypes();
    let jobs: Vec<(Split, usize)> = [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)]
        .into_iter()
        .flat_map(|(split, n)| (0..n).map(move |i| (split, i)))
        .collect();
    let clips = crate::workers::map_ordered(&jobs, workers, |_, &(split, i)| {
        generate_clip(cfg, split, i, &prototypes)
    });
    Dataset::new(clips)
}

/// Classifies a frame by its nearest class prototype. Ties go to "mistake".
/// With zero noise this oracle is perfect on post-onset frames and at chance
/// before the onset; it upper-bounds any detector.
pub fn nearest_prototype_label(frame: &[f32], cfg: &SynthConfig) -> u8 {
    let (mistake, correct) = cfg.prototypes();
    let mut d_mistake = 0.0f64;
    let mut d_correct = 0.0f64;
    for (i, &v) in frame.iter().enumerate() {
        let v = v as f64;
        d_mistake += (v - mistake[i]).powi(2);
        d_correct += (v - correct[i]).powi(2);
    }
    if d_mistake <= d_correct {
        LABEL_MISTAKE
    } else {
        LABEL_CORRECT
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> SynthConfig {
        SynthConfig {
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_yields_bit_identical_datasets() {
        let cfg = base_cfg();
        let a = generate_dataset(&cfg, 25).unwrap();
        let b = generate_dataset(&cfg, 25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_mistake_rate_yields_all_correct() {
        let cfg = SynthConfig {
            mistake_rate: 0.0,
            ..base_cfg()
        };
        let clips = generate_dataset(&cfg, 50).unwrap();
        assert!(clips.iter().all(|c| c.label == LABEL_CORRECT));
    }

    #[test]
    fn prevalence_matches_rate_within_three_standard_errors() {
        let cfg = SynthConfig {
            mistake_rate: 0.3,
            ..base_cfg()
        };
        let n = 2000;
        let clips = generate_dataset(&cfg, n).unwrap();
        let observed = clips.iter().filter(|c| c.is_mistake()).count() as f64 / n as f64;
        let se = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!(
            (observed - 0.3).abs() <= 3.0 * se,
            "prevalence {observed} vs expected 0.3 ± {}",
            3.0 * se
        );
    }

    #[test]
    fn plans_match_generated_geometry() {
        let cfg = base_cfg();
        let clips = generate_dataset(&cfg, 40).unwrap();
        for (i, clip) in clips.iter().enumerate() {
            let plan = clip_plan(&cfg, Split::Train, i);
            assert_eq!(plan.label, clip.label);
            assert_eq!(plan.frame_count, clip.frame_count());
            assert_eq!(plan.duration, clip.duration);
            assert!(plan.onset_frame < plan.frame_count);
            // Onset respects the configured fraction range (up to frame quantization).
            let onset_time = plan.onset_frame as f64 / cfg.fps;
            assert!(onset_time <= cfg.onset_range[1] * plan.duration + 1e-9);
        }
    }

    #[test]
    fn noiseless_clips_are_perfectly_decidable_post_onset_and_not_before() {
        let cfg = SynthConfig {
            noise_level: 0.0,
            mistake_rate: 0.5,
            seed: 5,
            ..SynthConfig::default()
        };
        let n = 400;
        let clips = generate_dataset(&cfg, n).unwrap();
        let mut post_correct = 0usize;
        let mut post_total = 0usize;
        let mut pre_correct = 0usize;
        let mut pre_total = 0usize;
        for (i, clip) in clips.iter().enumerate() {
            let plan = clip_plan(&cfg, Split::Train, i);
            for t in 0..clip.frame_count() {
                let guess = nearest_prototype_label(clip.features.row(t), &cfg);
                if t >= plan.onset_frame {
                    post_total += 1;
                    post_correct += usize::from(guess == clip.label);
                } else {
                    pre_total += 1;
                    pre_correct += usize::from(guess == clip.label);
                }
            }
        }
        assert_eq!(post_correct, post_total, "oracle must be perfect after onset");
        let pre_acc = pre_correct as f64 / pre_total as f64;
        let se = (0.25f64 / pre_total as f64).sqrt();
        assert!(
            (pre_acc - 0.5).abs() <= 3.0 * se + 1e-12,
            "pre-onset accuracy {pre_acc} should be chance (±{})",
            3.0 * se
        );
    }

    #[test]
    fn noisy_pre_onset_frames_stay_at_chance() {
        let cfg = SynthConfig {
            noise_level: 0.5,
            mistake_rate: 0.5,
            seed: 9,
            ..SynthConfig::default()
        };
        let clips = generate_dataset(&cfg, 600).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for (i, clip) in clips.iter().enumerate() {
            let plan = clip_plan(&cfg, Split::Train, i);
            for t in 0..plan.onset_frame {
                total += 1;
                correct += usize::from(nearest_prototype_label(clip.features.row(t), &cfg) == clip.label);
            }
        }
        let acc = correct as f64 / total as f64;
        let se = (0.25f64 / total as f64).sqrt();
        assert!(
            (acc - 0.5).abs() <= 3.0 * se,
            "pre-onset accuracy {acc} should be chance over {total} frames"
        );
    }

    #[test]
    fn worker_count_does_not_change_the_dataset() {
        let cfg = base_cfg();
        let sequential = generate_split_dataset(&cfg, 9, 4, 3).unwrap();
        for workers in [2, 4, 16] {
            let parallel = generate_split_dataset_with_workers(&cfg, 9, 4, 3, workers).unwrap();
            assert_eq!(parallel.clips, sequential.clips, "workers={workers}");
        }
    }

    #[test]
    fn splits_share_prototypes_but_not_noise_streams() {
        let cfg = base_cfg();
        let data = generate_split_dataset(&cfg, 10, 10, 10).unwrap();
        assert_eq!(data.split_len(Split::Train), 10);
        assert_eq!(data.split_len(Split::Val), 10);
        assert_eq!(data.split_len(Split::Test), 10);
        let train0 = &data.clips[0];
        let val0 = &data.clips[10];
        assert_ne!(train0.features, val0.features);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_onset = SynthConfig {
            onset_range: [0.0, 0.5],
            ..base_cfg()
        };
        assert!(bad_onset.validate().is_err());
        let bad_duration = SynthConfig {
            duration_range: [3.0, 2.0],
            ..base_cfg()
        };
        assert!(bad_duration.validate().is_err());
        let too_short = SynthConfig {
            duration_range: [0.2, 2.0],
            ..base_cfg()
        };
        assert!(too_short.validate().is_err());
    }
}
