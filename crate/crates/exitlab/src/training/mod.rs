//! Exit-policy training: reward schemes, recurrent PPO, and the stream
//! trainer that ties them to a frozen detector.

mod ppo;
mod reward;
mod trainer;

pub use ppo::{
    compute_advantages, ppo_update, AdvantageEstimates, PpoConfig, PpoStats, SequenceRecord,
    TransitionBatch, TransitionStep,
};
pub use reward::{
    confidence_gain, exit_reward, fixed_penalty_reward, scheme_reward, RewardScheme,
    RewardWeights, FIXED_STEP_PENALTY,
};
pub use trainer::{
    load_policy, save_policy, train_policy, PolicyMeta, TrainLogRecord, TrainPolicyOutcome,
};
