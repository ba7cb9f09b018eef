//! Episode bookkeeping: the three-way action space and per-clip stream state.

use serde::{Deserialize, Serialize};

use crate::env::clip::{LABEL_CORRECT, LABEL_MISTAKE};
use crate::error::{Error, Result};
use crate::numerics::tensor::{Element, Tensor};

/// What the exit policy can do at each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Continue,
    ExitMistake,
    ExitCorrect,
}

pub const ACTIONS: [Action; 3] = [Action::Continue, Action::ExitMistake, Action::ExitCorrect];

impl Action {
    /// Stable index used by the policy head: Continue=0, ExitMistake=1,
    /// ExitCorrect=2.
    pub fn index(self) -> usize {
        match self {
            Action::Continue => 0,
            Action::ExitMistake => 1,
            Action::ExitCorrect => 2,
        }
    }

    pub fn from_index(index: usize) -> Result<Action> {
        ACTIONS
            .get(index)
            .copied()
            .ok_or_else(|| Error::Internal(format!("action index {index} out of range")))
    }

    pub fn is_exit(self) -> bool {
        !matches!(self, Action::Continue)
    }
}

/// The correctness label implied by an exit action.
pub fn extract_correctness(action: Action) -> Result<u8> {
    match action {
        Action::ExitMistake => Ok(LABEL_MISTAKE),
        Action::ExitCorrect => Ok(LABEL_CORRECT),
        Action::Continue => Err(Error::Internal(
            "extract_correctness called on Continue, which implies no label".into(),
        )),
    }
}

/// Mutable state of one streaming episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState<E: Element> {
    /// Index of the clip within its dataset.
    pub clip_index: usize,
    /// Current frame index; the policy has observed frames `0..=t`.
    pub t: usize,
    /// Recurrent policy hidden state (zeros at episode start).
    pub hidden: Tensor<E>,
    /// Exit point `E_i`: the exit frame, or the frame count at natural end.
    pub exit_point: Option<usize>,
    /// The exit action taken, if the policy exited (natural ends have none).
    pub exit_action: Option<Action>,
    pub done: bool,
}

impl<E: Element> EpisodeState<E> {
    pub fn new(clip_index: usize, hidden: Tensor<E>) -> Self {
        EpisodeState {
            clip_index,
            t: 0,
            hidden,
            exit_point: None,
            exit_action: None,
            done: false,
        }
    }

    /// Applies `action` at the current frame of a clip with `frame_count`
    /// frames. Continue advances the stream; either exit variant stops it;
    /// Continue on the final frame ends the episode naturally.
    pub fn step(&mut self, action: Action, frame_count: usize) -> Result<()> {
        if self.done {
            return Err(Error::Internal("step called on a finished episode".into()));
        }
        if self.t >= frame_count {
            return Err(Error::Internal(format!(
                "episode at frame {} of a {frame_count}-frame clip",
                self.t
            )));
        }
        match action {
            Action::Continue => {
                if self.t + 1 == frame_count {
                    self.exit_point = Some(frame_count);
                    self.done = true;
                } else {
                    self.t += 1;
                }
            }
            exit => {
                self.exit_point = Some(self.t);
                self.exit_action = Some(exit);
                self.done = true;
            }
        }
        Ok(())
    }

    /// The exit point `E_i`; valid once the episode is done.
    pub fn exit_frame(&self) -> Result<usize> {
        self.exit_point
            .ok_or_else(|| Error::Internal("exit point requested before episode end".into()))
    }
}
