//! Reward functions for exit-policy training.
//!
//! All schemes score one transition at a time from the same observable
//! quantities: the detector's class confidences before and after the step,
//! the clip's true label, and the action taken. Rewards are plain `f64`
//! arithmetic so an independent re-implementation can be compared bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::env::{extract_correctness, Action, LABEL_CORRECT, LABEL_MISTAKE};
use crate::error::{Error, Result};

/// Weights of the three reward terms for the main exit policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Scales the per-step change in the detector's confidence for the clip's
    /// true label (shaping toward informative frames).
    pub dense: f64,
    /// Terminal bonus paid when the episode's final label matches the truth.
    pub sparse: f64,
    /// Scales the per-step time cost `1 / duration`, charging each observed
    /// frame its share of the clip's length in seconds.
    pub penalty: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { dense: 0.1, sparse: 1.0, penalty: 1.0 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in
            [("dense", self.dense), ("sparse", self.sparse), ("penalty", self.penalty)]
        {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "reward weight {name} must be non-negative and finite, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Fixed per-step cost of the fast-forward reward scheme.
pub const FIXED_STEP_PENALTY: f64 = 0.01;

/// Which reward function drives policy training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardScheme {
    /// Three-term reward: dense confidence shaping, a terminal bonus for
    /// exiting with the right label, and a per-second time cost.
    Exit {
        #[serde(default)]
        weights: RewardWeights,
    },
    /// Dense confidence shaping with a fixed per-step cost; the terminal
    /// reward pays the detector's confidence in the true class, whatever exit
    /// label was chosen.
    FastForward {
        #[serde(default = "default_step_penalty")]
        penalty: f64,
    },
    /// Dense-only: pays out each improvement of the true-class confidence
    /// over the best value seen so far, and nothing at termination.
    AdaFrame,
}

fn default_step_penalty() -> f64 {
    FIXED_STEP_PENALTY
}

impl Default for RewardScheme {
    fn default() -> Self {
        RewardScheme::Exit { weights: RewardWeights::default() }
    }
}

impl RewardScheme {
    pub fn validate(&self) -> Result<()> {
        match self {
            RewardScheme::Exit { weights } => weights.validate(),
            RewardScheme::FastForward { penalty } => {
                if !(penalty.is_finite() && *penalty >= 0.0) {
                    return Err(Error::Config(format!(
                        "fast_forward step penalty must be non-negative and finite, got {penalty}"
                    )));
                }
                Ok(())
            }
            RewardScheme::AdaFrame => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RewardScheme::Exit { .. } => "exit",
            RewardScheme::FastForward { .. } => "fast_forward",
            RewardScheme::AdaFrame => "ada_frame",
        }
    }
}

fn check_common(
    t: usize,
    exit_point: usize,
    frame_count: usize,
    duration: f64,
    conf_t: &[f64; 2],
    conf_next: &[f64; 2],
    label: u8,
    action: Action,
) -> Result<()> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Config(format!("clip duration must be positive, got {duration}")));
    }
    if label != LABEL_MISTAKE && label != LABEL_CORRECT {
        return Err(Error::Config(format!("reward label must be 0 or 1, got {label}")));
    }
    for (name, c) in [("current", conf_t), ("next", conf_next)] {
        if c.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Config(format!(
                "{name} confidences must lie in [0, 1], got {c:?}"
            )));
        }
    }
    if t >= frame_count || exit_point > frame_count {
        return Err(Error::Internal(format!(
            "reward at frame {t} with exit point {exit_point} in a {frame_count}-frame clip"
        )));
    }
    if action.is_exit() && t != exit_point {
        return Err(Error::Internal(format!(
            "exit action rewarded at frame {t}, but the exit point is {exit_point}"
        )));
    }
    if !action.is_exit() && t >= exit_point {
        return Err(Error::Internal(format!(
            "continue rewarded at frame {t}, at or past the exit point {exit_point}"
        )));
    }
    Ok(())
}

/// The label the detector asserts when the stream runs out: argmax of the
/// final-frame confidences, favouring "mistake" on perfect ties.
fn final_prediction(conf: &[f64; 2]) -> u8 {
    if conf[0] >= conf[1] {
        LABEL_MISTAKE
    } else {
        LABEL_CORRECT
    }
}

/// Reward for one transition of the main exit policy.
///
/// * Continuing mid-clip earns `dense * (conf_next[label] - conf_t[label])`
///   minus the time cost `penalty / duration`.
/// * An exit action earns `sparse` when its implied label matches the truth,
///   else zero (the time cost stops with the stream).
/// * Continuing off the final frame ends the episode naturally; that last
///   transition pays its time cost plus the terminal bonus judged against the
///   detector's final prediction, since no explicit exit label exists.
///
/// `conf_next` is ignored on terminal transitions (exits and natural ends);
/// pass `conf_t` again if no successor frame exists.
#[allow(clippy::too_many_arguments)]
pub fn exit_reward(
    t: usize,
    exit_point: usize,
    frame_count: usize,
    duration: f64,
    conf_t: &[f64; 2],
    conf_next: &[f64; 2],
    label: u8,
    action: Action,
    weights: &RewardWeights,
) -> Result<f64> {
    weights.validate()?;
    check_common(t, exit_point, frame_count, duration, conf_t, conf_next, label, action)?;
    match action {
        Action::ExitMistake | Action::ExitCorrect => {
            let asserted = extract_correctness(action)?;
            Ok(if asserted == label { weights.sparse } else { 0.0 })
        }
        Action::Continue => {
            let time_cost = weights.penalty / duration;
            if t + 1 < frame_count {
                let delta = conf_next[label as usize] - conf_t[label as usize];
                Ok(weights.dense * delta - time_cost)
            } else {
                let bonus =
                    if final_prediction(conf_t) == label { weights.sparse } else { 0.0 };
                Ok(bonus - time_cost)
            }
        }
    }
}

/// Reward for one transition under the fast-forward scheme: raw true-class
/// confidence gains minus a fixed per-step cost, and a terminal payout equal
/// to the true-class confidence at the decision point (for natural ends, at
/// the final frame). The exit label itself is never scored.
#[allow(clippy::too_many_arguments)]
pub fn fixed_penalty_reward(
    t: usize,
    exit_point: usize,
    frame_count: usize,
    duration: f64,
    conf_t: &[f64; 2],
    conf_next: &[f64; 2],
    label: u8,
    action: Action,
    per_step_penalty: f64,
) -> Result<f64> {
    if !(per_step_penalty.is_finite() && per_step_penalty >= 0.0) {
        return Err(Error::Config(format!(
            "per-step penalty must be non-negative and finite, got {per_step_penalty}"
        )));
    }
    check_common(t, exit_point, frame_count, duration, conf_t, conf_next, label, action)?;
    let target = label as usize;
    match action {
        Action::ExitMistake | Action::ExitCorrect => Ok(conf_t[target]),
        Action::Continue => {
            if t + 1 < frame_count {
                Ok(conf_next[target] - conf_t[target] - per_step_penalty)
            } else {
                Ok(conf_t[target] - per_step_penalty)
            }
        }
    }
}

/// Positive part of a confidence improvement over the best value seen so far;
/// the building block of the dense-only scheme.
pub fn confidence_gain(current: f64, best_so_far: f64) -> f64 {
    (current - best_so_far).max(0.0)
}

/// Dispatches one transition to the scheme's reward function.
///
/// `best_so_far` is the running maximum of the true-class confidence over the
/// frames observed so far; only the dense-only scheme reads it.
#[allow(clippy::too_many_arguments)]
pub fn scheme_reward(
    scheme: &RewardScheme,
    t: usize,
    exit_point: usize,
    frame_count: usize,
    duration: f64,
    conf_t: &[f64; 2],
    conf_next: &[f64; 2],
    label: u8,
    action: Action,
    best_so_far: f64,
) -> Result<f64> {
    match scheme {
        RewardScheme::Exit { weights } => exit_reward(
            t,
            exit_point,
            frame_count,
            duration,
            conf_t,
            conf_next,
            label,
            action,
            weights,
        ),
        RewardScheme::FastForward { penalty } => fixed_penalty_reward(
            t,
            exit_point,
            frame_count,
            duration,
            conf_t,
            conf_next,
            label,
            action,
            *penalty,
        ),
        RewardScheme::AdaFrame => {
            check_common(t, exit_point, frame_count, duration, conf_t, conf_next, label, action)?;
            if action == Action::Continue && t + 1 < frame_count {
                Ok(confidence_gain(conf_next[label as usize], best_so_far))
            } else {
                Ok(0.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: RewardWeights = RewardWeights { dense: 0.1, sparse: 1.0, penalty: 1.0 };

    #[test]
    fn mid_clip_continue_matches_hand_computation() {
        // True-class confidence rises 0.60 -> 0.70 in a 20-second clip.
        let r = exit_reward(
            3,
            40,
            40,
            20.0,
            &[0.60, 0.40],
            &[0.70, 0.30],
            LABEL_MISTAKE,
            Action::Continue,
            &W,
        )
        .unwrap();
        assert!((r - (-0.04)).abs() < 1e-15, "got {r}");
    }

    #[test]
    fn exit_bonus_depends_on_label_match() {
        let hit = exit_reward(
            5,
            5,
            40,
            20.0,
            &[0.9, 0.1],
            &[0.9, 0.1],
            LABEL_MISTAKE,
            Action::ExitMistake,
            &W,
        )
        .unwrap();
        let miss = exit_reward(
            5,
            5,
            40,
            20.0,
            &[0.9, 0.1],
            &[0.9, 0.1],
            LABEL_MISTAKE,
            Action::ExitCorrect,
            &W,
        )
        .unwrap();
        assert_eq!(hit, 1.0);
        assert_eq!(miss, 0.0);
    }

    #[test]
    fn natural_end_pays_time_cost_and_judges_final_prediction() {
        // Final Continue of a 10-frame, 5-second clip; detector ends leaning
        // "correct" on a correct clip: bonus plus time cost.
        let r = exit_reward(
            9,
            10,
            10,
            5.0,
            &[0.2, 0.8],
            &[0.2, 0.8],
            LABEL_CORRECT,
            Action::Continue,
            &W,
        )
        .unwrap();
        assert!((r - (1.0 - 0.2)).abs() < 1e-15, "got {r}");
        // Same stream over a mistake clip: no bonus, only the time cost.
        let r = exit_reward(
            9,
            10,
            10,
            5.0,
            &[0.2, 0.8],
            &[0.2, 0.8],
            LABEL_MISTAKE,
            Action::Continue,
            &W,
        )
        .unwrap();
        assert!((r - (-0.2)).abs() < 1e-15, "got {r}");
    }

    #[test]
    fn never_exit_episode_time_costs_sum_to_penalty_times_fps() {
        // n frames at fps f: duration n/f, so n transitions each pay
        // penalty*f/n and the total is exactly penalty*f. n is a power of two
        // so every partial sum is exact in floating point.
        let fps = 2.0;
        let n = 16usize;
        let duration = n as f64 / fps;
        let conf = [0.5, 0.5];
        let mut total = 0.0;
        for t in 0..n {
            total += exit_reward(
                t,
                n,
                n,
                duration,
                &conf,
                &conf,
                LABEL_CORRECT,
                Action::Continue,
                &W,
            )
            .unwrap();
        }
        // conf is constant so every dense term is zero; the natural-end bonus
        // is zero because the tie resolves to "mistake" on a correct clip.
        assert_eq!(total, -W.penalty * fps);
    }

    #[test]
    fn fixed_penalty_scheme_pays_confidence_at_exit() {
        let r = fixed_penalty_reward(
            4,
            4,
            40,
            20.0,
            &[0.8, 0.2],
            &[0.8, 0.2],
            LABEL_MISTAKE,
            Action::ExitCorrect,
            FIXED_STEP_PENALTY,
        )
        .unwrap();
        // The payout ignores which exit label was chosen.
        assert_eq!(r, 0.8);
        let r = fixed_penalty_reward(
            4,
            40,
            40,
            20.0,
            &[0.8, 0.2],
            &[0.9, 0.1],
            LABEL_MISTAKE,
            Action::Continue,
            FIXED_STEP_PENALTY,
        )
        .unwrap();
        assert!((r - (0.1 - 0.01)).abs() < 1e-12, "got {r}");
    }

    #[test]
    fn dense_only_scheme_pays_improvements_over_best() {
        let s = RewardScheme::AdaFrame;
        let r = scheme_reward(
            &s,
            1,
            40,
            40,
            20.0,
            &[0.5, 0.5],
            &[0.7, 0.3],
            LABEL_MISTAKE,
            Action::Continue,
            0.6,
        )
        .unwrap();
        assert!((r - 0.1).abs() < 1e-15);
        // No improvement over the best so far: zero, never negative.
        let r = scheme_reward(
            &s,
            2,
            40,
            40,
            20.0,
            &[0.7, 0.3],
            &[0.55, 0.45],
            LABEL_MISTAKE,
            Action::Continue,
            0.7,
        )
        .unwrap();
        assert_eq!(r, 0.0);
        // Exits pay nothing.
        let r = scheme_reward(
            &s,
            3,
            3,
            40,
            20.0,
            &[0.7, 0.3],
            &[0.7, 0.3],
            LABEL_MISTAKE,
            Action::ExitMistake,
            0.7,
        )
        .unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn misaligned_exit_frames_are_rejected() {
        let err = exit_reward(
            3,
            5,
            40,
            20.0,
            &[0.5, 0.5],
            &[0.5, 0.5],
            LABEL_MISTAKE,
            Action::ExitMistake,
            &W,
        )
        .unwrap_err();
        assert!(err.to_string().contains("exit point"));
        let err = exit_reward(
            5,
            5,
            40,
            20.0,
            &[0.5, 0.5],
            &[0.5, 0.5],
            LABEL_MISTAKE,
            Action::Continue,
            &W,
        )
        .unwrap_err();
        assert!(err.to_string().contains("past the exit point"));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(RewardWeights { dense: -0.1, ..Default::default() }.validate().is_err());
        assert!(RewardWeights { sparse: f64::NAN, ..Default::default() }.validate().is_err());
        let err = exit_reward(
            0,
            1,
            1,
            0.0,
            &[0.5, 0.5],
            &[0.5, 0.5],
            LABEL_MISTAKE,
            Action::Continue,
            &W,
        )
        .unwrap_err();
        assert!(err.to_string().contains("duration"));
        let err = exit_reward(
            0,
            2,
            2,
            1.0,
            &[1.5, -0.5],
            &[0.5, 0.5],
            LABEL_MISTAKE,
            Action::Continue,
            &W,
        )
        .unwrap_err();
        assert!(err.to_string().contains("[0, 1]"));
        assert!(RewardScheme::FastForward { penalty: -1.0 }.validate().is_err());
    }

    #[test]
    fn scheme_serialization_round_trips() {
        let schemes = [
            RewardScheme::default(),
            RewardScheme::FastForward { penalty: 0.02 },
            RewardScheme::AdaFrame,
        ];
        for s in schemes {
            let json = serde_json::to_string(&s).unwrap();
            let back: RewardScheme = serde_json::from_str(&json).unwrap();
            assert_eq!(s, back);
        }
        let parsed: RewardScheme = serde_json::from_str(r#"{"scheme":"exit"}"#).unwrap();
        assert_eq!(parsed, RewardScheme::default());
        assert!(serde_json::from_str::<RewardScheme>(r#"{"scheme":"exit","tau":1}"#).is_err());
    }
}
