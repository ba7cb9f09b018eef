//! Clip records: one streaming keystep with per-frame features and a binary
//! correctness label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{Element, Tensor};

/// Label value meaning "the performer made a mistake".
pub const LABEL_MISTAKE: u8 = 0;
/// Label value meaning "the keystep was performed correctly".
pub const LABEL_CORRECT: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}, expected train|val|test"
            ))),
        }
    }
}

/// Converts a time in seconds to a frame index at the given frame rate.
/// A small nudge absorbs binary representation error in `t * f` so that
/// quantized durations (`n / f` seconds) map back to exactly `n`.
pub fn time_to_frame_index(t: f64, fps: f64) -> Result<usize> {
    if t < 0.0 || !t.is_finite() {
        return Err(Error::Config(format!("time must be non-negative and finite, got {t}")));
    }
    if !(fps > 0.0) {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    Ok((t * fps + 1e-9).floor() as usize)
}

/// One keystep clip: a fixed-rate stream of feature vectors plus the label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    /// `(frame count, feature dim)` feature matrix.
    pub features: Tensor<f32>,
    /// Duration in seconds; always `frame_count / fps`.
    pub duration: f64,
    pub fps: f64,
    /// 0 = mistake, 1 = correct.
    pub label: u8,
    pub split: Split,
}

impl ClipRecord {
    pub fn frame_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_mistake(&self) -> bool {
        self.label == LABEL_MISTAKE
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Config("clip id must be non-empty".into()));
        }
        if self.label != LABEL_MISTAKE && self.label != LABEL_CORRECT {
            return Err(Error::Config(format!(
                "clip {:?} has label {}, expected 0 or 1",
                self.id, self.label
            )));
        }
        let n = self.frame_count();
        if n == 0 {
            return Err(Error::Config(format!("clip {:?} has no frames", self.id)));
        }
        let expected = time_to_frame_index(self.duration, self.fps)?;
        if expected != n {
            return Err(Error::Config(format!(
                "clip {:?}: duration {}s at {} fps implies {} frames, found {}",
                self.id, self.duration, self.fps, expected, n
            )));
        }
        if !self.features.all_finite() {
            return Err(Error::Config(format!("clip {:?} has non-finite features", self.id)));
        }
        Ok(())
    }

    /// The `K` most recent frames at time index `t`, oldest first. Before `K`
    /// frames have streamed, the first frame is repeated on the left.
    pub fn window<E: Element>(&self, t: usize, k: usize) -> Result<Tensor<E>> {
        if t >= self.frame_count() {
            return Err(Error::Internal(format!(
                "window at frame {t} of clip {:?} with {} frames",
                self.id,
                self.frame_count()
            )));
        }
        if k == 0 {
            return Err(Error::Config("window size K must be at least 1".into()));
        }
        let f = self.feature_dim();
        let mut out = Tensor::zeros(k, f);
        for i in 0..k {
            // Window positions map to frames t-K+1+i, clamped at frame 0.
            let src = (t + 1 + i).saturating_sub(k);
            for (o, &v) in out.row_mut(i).iter_mut().zip(self.features.row(src)) {
                *o = E::from_f64(v as f64);
            }
        }
        Ok(out)
    }

    /// One frame as a `1 x F` row in the requested element type.
    pub fn frame<E: Element>(&self, t: usize) -> Tensor<E> {
        let f = self.feature_dim();
        let mut out = Tensor::zeros(1, f);
        for (o, &v) in out.row_mut(0).iter_mut().zip(self.features.row(t)) {
            *o = E::from_f64(v as f64);
        }
        out
    }

    /// Ground-truth future frames `t+1 ..= t+len`, repeating the final frame
    /// once the clip runs out.
    pub fn future_frames<E: Element>(&self, t: usize, len: usize) -> Tensor<E> {
        let f = self.feature_dim();
        let last = self.frame_count() - 1;
        let mut out = Tensor::zeros(len, f);
        for i in 0..len {
            let src = (t + 1 + i).min(last);
            for (o, &v) in out.row_mut(i).iter_mut().zip(self.features.row(src)) {
                *o = E::from_f64(v as f64);
            }
        }
        out
    }
}

/// The K-most-recent-frames window ending at frame `t`.
pub fn window<E: Element>(clip: &ClipRecord, t: usize, k: usize) -> Result<Tensor<E>> {
    clip.window(t, k)
}

/// A dataset of clips plus the shared feature geometry.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<ClipRecord>,
    pub feature_dim: usize,
    pub fps: f64,
}

impl Dataset {
    pub fn new(clips: Vec<ClipRecord>) -> Result<Dataset> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Config("dataset must contain at least one clip".into()))?;
        let dataset = Dataset {
            feature_dim: first.feature_dim(),
            fps: first.fps,
            clips,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for clip in &self.clips {
            clip.validate()?;
            if clip.feature_dim() != self.feature_dim {
                return Err(Error::Config(format!(
                    "clip {:?} has feature dim {}, dataset uses {}",
                    clip.id,
                    clip.feature_dim(),
                    self.feature_dim
                )));
            }
            if clip.fps != self.fps {
                return Err(Error::Config(format!(
                    "clip {:?} has fps {}, dataset uses {}",
                    clip.id, clip.fps, self.fps
                )));
            }
            if !seen.insert(clip.id.as_str()) {
                return Err(Error::Config(format!("duplicate clip id {:?}", clip.id)));
            }
        }
        Ok(())
    }

    /// Indices of clips in `split`, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.clips.iter().filter(|c| c.split == split).count()
    }
}
