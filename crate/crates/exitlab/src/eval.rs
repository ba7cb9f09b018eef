//! Evaluation: average precision over mistake scores, observation ratio,
//! the per-clip evaluation harness, and frontier/attention exports.
//!
//! Conventions (also recorded in every [`EvalSummary`]):
//! - The positive class is "mistake" (label 0), scored by the detector's
//!   mistake confidence at the decision point.
//! - An exit action overrides the detector's argmax as the predicted label;
//!   the ranking score stays the confidence.
//! - Score ties are broken by clip id so rankings are deterministic.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{ConfidenceCache, Detector};
use crate::env::clip::{ClipRecord, Dataset, Split, LABEL_MISTAKE};
use crate::env::episode::{extract_correctness, Action};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::write_atomic;
use crate::numerics::tensor::{Element, Tensor};
use crate::rng::derive_seed_indexed;

/// One scored item for average precision.
#[derive(Debug, Clone)]
pub struct ApItem {
    pub score: f64,
    pub positive: bool,
    /// Deterministic tie break for equal scores (ascending).
    pub tie_key: String,
}

/// Average precision: mean of precision-at-rank over the ranks where
/// positives sit, after sorting by score descending (ties by key).
pub fn average_precision(items: &[ApItem]) -> Result<f64> {
    if items.iter().any(|i| !i.score.is_finite()) {
        return Err(Error::Config("average precision got a non-finite score".into()));
    }
    let positives = items.iter().filter(|i| i.positive).count();
    if positives == 0 {
        return Err(Error::Config(
            "average precision is undefined without at least one positive (mistake) item".into(),
        ));
    }
    let mut order: Vec<&ApItem> = items.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores checked finite")
            .then_with(|| a.tie_key.cmp(&b.tie_key))
    });
    let mut seen_pos = 0usize;
    let mut sum = 0.0;
    for (rank0, item) in order.iter().enumerate() {
        if item.positive {
            seen_pos += 1;
            sum += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Result of evaluating one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub clip_id: String,
    /// Exit point: exit frame index, or the frame count at natural end.
    pub exit_frame: usize,
    pub frame_count: usize,
    /// `exit_frame / frame_count`.
    pub observation_ratio: f64,
    /// Mistake confidence at the decision point.
    pub score: f64,
    pub predicted_label: u8,
    pub true_label: u8,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.observation_ratio) {
            return Err(Error::Config(format!(
                "observation ratio {} of clip {:?} is outside [0, 1]",
                self.observation_ratio, self.clip_id
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Config(format!(
                "mistake score {} of clip {:?} is outside [0, 1]",
                self.score, self.clip_id
            )));
        }
        Ok(())
    }
}

/// Mean observation ratio over records.
pub fn observation_ratio(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Config("observation ratio over zero records is undefined".into()));
    }
    Ok(records.iter().map(|r| r.observation_ratio).sum::<f64>() / records.len() as f64)
}

/// Scoring conventions baked into this harness, recorded for auditability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConventions {
    pub positive_class: String,
    pub score: String,
    pub predicted_label: String,
    pub tie_break: String,
}

impl Default for EvalConventions {
    fn default() -> Self {
        EvalConventions {
            positive_class: "mistake (label 0)".into(),
            score: "detector mistake confidence at the decision point".into(),
            predicted_label: "exit action overrides detector argmax; natural end uses the final argmax".into(),
            tie_break: "clip id ascending".into(),
        }
    }
}

/// Aggregate evaluation result for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub ap: f64,
    pub mean_or: f64,
    pub seed: u64,
    pub config_hash: String,
    pub conventions: EvalConventions,
    pub records: Vec<EvalRecord>,
}

impl EvalSummary {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<EvalSummary> {
        let display = path.display().to_string();
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("evaluation summary {display}")));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&display, e))
    }
}

/// A per-frame exit rule. `reset` is called once per clip with a derived
/// seed; `decide` sees the latest frame and the detector's confidences.
pub trait ExitDecider<E: Element> {
    fn reset(&mut self, seed: u64);
    fn decide(&mut self, t: usize, frame: &Tensor<E>, confidences: &[E; 2]) -> Result<Action>;
}

/// Watches every frame; the evaluation then reduces to the detector's own
/// final prediction (the full-observation reference point).
#[derive(Debug, Default, Clone)]
pub struct NeverExit;

impl<E: Element> ExitDecider<E> for NeverExit {
    fn reset(&mut self, _seed: u64) {}

    fn decide(&mut self, _t: usize, _frame: &Tensor<E>, _conf: &[E; 2]) -> Result<Action> {
        Ok(Action::Continue)
    }
}

fn argmax_label<E: Element>(conf: &[E; 2]) -> u8 {
    if conf[0].to_f64() >= conf[1].to_f64() {
        LABEL_MISTAKE
    } else {
        crate::env::clip::LABEL_CORRECT
    }
}

/// Runs `decider` over one clip and reports the exit record.
pub fn evaluate_clip<E: Element>(
    decider: &mut dyn ExitDecider<E>,
    detector: &Detector<E>,
    clip: &ClipRecord,
    clip_index: usize,
    cache: &mut ConfidenceCache<E>,
) -> Result<EvalRecord> {
    let n = clip.frame_count();
    for t in 0..n {
        let conf = cache.confidences(detector, clip, clip_index, t)?;
        let frame = clip.frame::<E>(t);
        let action = decider.decide(t, &frame, &conf)?;
        if action.is_exit() {
            let record = EvalRecord {
                clip_id: clip.id.clone(),
                exit_frame: t,
                frame_count: n,
                observation_ratio: t as f64 / n as f64,
                score: conf[0].to_f64(),
                predicted_label: extract_correctness(action)?,
                true_label: clip.label,
            };
            record.validate()?;
            return Ok(record);
        }
    }
    // Natural end: the detector's final prediction stands in for the exit.
    let conf = cache.confidences(detector, clip, clip_index, n - 1)?;
    let record = EvalRecord {
        clip_id: clip.id.clone(),
        exit_frame: n,
        frame_count: n,
        observation_ratio: 1.0,
        score: conf[0].to_f64(),
        predicted_label: argmax_label(&conf),
        true_label: clip.label,
    };
    record.validate()?;
    Ok(record)
}

/// Evaluates an exit rule over every clip of `split`, in dataset order.
pub fn evaluate_model<E: Element>(
    model: &str,
    decider: &mut dyn ExitDecider<E>,
    detector: &Detector<E>,
    data: &Dataset,
    split: Split,
    seed: u64,
    config_hash: &str,
    cache: &mut ConfidenceCache<E>,
) -> Result<EvalSummary> {
    let indices = data.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Config(format!("split {:?} has no clips to evaluate", split.name())));
    }
    let mut records = Vec::with_capacity(indices.len());
    for (ordinal, &i) in indices.iter().enumerate() {
        decider.reset(derive_seed_indexed(seed, "eval-clip", ordinal as u64));
        records.push(evaluate_clip(decider, detector, &data.clips[i], i, cache)?);
    }
    summarize(model, records, seed, config_hash)
}

/// Builds an [`EvalSummary`] from finished records.
pub fn summarize(
    model: &str,
    records: Vec<EvalRecord>,
    seed: u64,
    config_hash: &str,
) -> Result<EvalSummary> {
    let items: Vec<ApItem> = records
        .iter()
        .map(|r| ApItem {
            score: r.score,
            positive: r.true_label == LABEL_MISTAKE,
            tie_key: r.clip_id.clone(),
        })
        .collect();
    let ap = average_precision(&items)?;
    let mean_or = observation_ratio(&records)?;
    Ok(EvalSummary {
        model: model.to_string(),
        ap,
        mean_or,
        seed,
        config_hash: config_hash.to_string(),
        conventions: EvalConventions::default(),
        records,
    })
}

/// One point of the accuracy-versus-efficiency frontier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub model: String,
    pub ap: f64,
    pub or: f64,
    pub seed: u64,
}

pub fn frontier_points(summaries: &[EvalSummary]) -> Vec<FrontierPoint> {
    summaries
        .iter()
        .map(|s| FrontierPoint { model: s.model.clone(), ap: s.ap, or: s.mean_or, seed: s.seed })
        .collect()
}

pub const FRONTIER_HEADER: &str = "model,ap,or,seed";

/// Writes frontier points as CSV (`model,ap,or,seed`); zero points produce a
/// header-only file.
pub fn export_frontier(points: &[FrontierPoint], path: &Path) -> Result<()> {
    let mut out = String::from(FRONTIER_HEADER);
    out.push('\n');
    for p in points {
        if !p.ap.is_finite() || !p.or.is_finite() {
            return Err(Error::Config(format!(
                "frontier point for model {:?} has non-finite metrics (ap={}, or={})",
                p.model, p.ap, p.or
            )));
        }
        if p.model.contains(',') || p.model.contains('\n') {
            return Err(Error::Config(format!(
                "model name {:?} cannot contain commas or newlines in CSV output",
                p.model
            )));
        }
        let _ = writeln!(out, "{},{},{},{}", p.model, p.ap, p.or, p.seed);
    }
    write_atomic(path, out.as_bytes())
}

/// Parses a frontier CSV written by [`export_frontier`].
pub fn load_frontier(path: &Path) -> Result<Vec<FrontierPoint>> {
    let display = path.display().to_string();
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("frontier file {display}")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == FRONTIER_HEADER => {}
        other => {
            return Err(Error::format(
                &display,
                format!("expected header {FRONTIER_HEADER:?}, got {other:?}"),
            ))
        }
    }
    let mut points = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(
                &display,
                format!("line {}: expected 4 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::format(&display, format!("line {}: bad {what} {s:?}", lineno + 2)))
        };
        points.push(FrontierPoint {
            model: fields[0].to_string(),
            ap: parse_f(fields[1], "ap")?,
            or: parse_f(fields[2], "or")?,
            seed: fields[3]
                .parse()
                .map_err(|_| Error::format(&display, format!("line {}: bad seed {:?}", lineno + 2, fields[3])))?,
        });
    }
    Ok(points)
}

/// Exports the detector's attention over the observed window at frame `t` of
/// `clip` as CSV (`frame_index,score`), one row per window position. The
/// frame index column names the source frame each window slot came from
/// (early windows repeat frame 0).
pub fn export_attention<E: Element>(
    detector: &Detector<E>,
    clip: &ClipRecord,
    t: usize,
    path: &Path,
) -> Result<()> {
    let k = detector.cfg.window;
    let window = clip.window::<E>(t, k)?;
    let out = detector.forward(&window, true)?;
    let scores = out
        .attention
        .ok_or_else(|| Error::Internal("attention capture was requested but not produced".into()))?;
    let mut csv = String::from("frame_index,score\n");
    for (i, s) in scores.iter().enumerate() {
        let source = (t + 1 + i).saturating_sub(k);
        let _ = writeln!(csv, "{source},{}", s.to_f64());
    }
    write_atomic(path, csv.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(rows: &[(f64, bool)]) -> Vec<ApItem> {
        rows.iter()
            .enumerate()
            .map(|(i, &(score, positive))| ApItem { score, positive, tie_key: format!("c{i:02}") })
            .collect()
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let ap = average_precision(&items(&[(0.9, true), (0.8, true), (0.1, false)])).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn worked_example_matches_hand_sum() {
        let ap = average_precision(&items(&[(0.9, false), (0.8, true), (0.7, true)])).unwrap();
        assert!((ap - 0.58333).abs() < 5e-6, "ap={ap}");
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn no_positives_is_an_error() {
        assert!(average_precision(&items(&[(0.9, false), (0.1, false)])).is_err());
        assert!(average_precision(&[]).is_err());
    }

    #[test]
    fn ap_is_invariant_under_monotone_score_transforms() {
        let base = items(&[(0.9, false), (0.5, true), (0.4, true), (0.2, false), (0.1, true)]);
        let ap = average_precision(&base).unwrap();
        let transformed: Vec<ApItem> = base
            .iter()
            .map(|i| ApItem { score: (i.score * 3.0).exp() + 7.0, ..i.clone() })
            .collect();
        assert_eq!(ap, average_precision(&transformed).unwrap());
    }

    #[test]
    fn ties_are_broken_by_key_deterministically() {
        let mut a = items(&[(0.5, true), (0.5, false)]);
        let ap1 = average_precision(&a).unwrap();
        a.swap(0, 1);
        let ap2 = average_precision(&a).unwrap();
        assert_eq!(ap1, ap2);
        // c00 (positive) sorts before c01 at equal scores → precision 1 at rank 1.
        assert_eq!(ap1, 1.0);
    }

    fn record(or: f64) -> EvalRecord {
        EvalRecord {
            clip_id: "x".into(),
            exit_frame: 0,
            frame_count: 1,
            observation_ratio: or,
            score: 0.5,
            predicted_label: 0,
            true_label: 0,
        }
    }

    #[test]
    fn observation_ratio_is_the_mean() {
        let records = [record(0.25), record(0.75)];
        assert_eq!(observation_ratio(&records).unwrap(), 0.5);
        assert!(observation_ratio(&[]).is_err());
    }

    #[test]
    fn frontier_round_trips_and_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frontier.csv");
        let points = vec![
            FrontierPoint { model: "a".into(), ap: 0.75, or: 0.5, seed: 1 },
            FrontierPoint { model: "b".into(), ap: 0.5, or: 0.25, seed: 2 },
        ];
        export_frontier(&points, &path).unwrap();
        assert_eq!(load_frontier(&path).unwrap(), points);

        let bad = vec![FrontierPoint { model: "c".into(), ap: f64::NAN, or: 0.0, seed: 0 }];
        assert!(export_frontier(&bad, &path).is_err());
    }

    #[test]
    fn empty_frontier_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        export_frontier(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "model,ap,or,seed\n");
        assert!(load_frontier(&path).unwrap().is_empty());
    }

    #[test]
    fn summary_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.json");
        let summary = summarize(
            "demo",
            vec![
                EvalRecord {
                    clip_id: "a".into(),
                    exit_frame: 1,
                    frame_count: 4,
                    observation_ratio: 0.25,
                    score: 0.8,
                    predicted_label: 0,
                    true_label: 0,
                },
                EvalRecord {
                    clip_id: "b".into(),
                    exit_frame: 4,
                    frame_count: 4,
                    observation_ratio: 1.0,
                    score: 0.3,
                    predicted_label: 1,
                    true_label: 1,
                },
            ],
            7,
            "hash",
        )
        .unwrap();
        summary.save(&path).unwrap();
        assert_eq!(EvalSummary::load(&path).unwrap(), summary);
        assert_eq!(summary.ap, 1.0);
        assert_eq!(summary.mean_or, 0.625);
    }
}
