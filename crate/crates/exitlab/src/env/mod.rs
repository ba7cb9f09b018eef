//! Streaming clip environment: clip records, synthetic data generation,
//! binary clip/manifest storage, and episode state for exit decisions.

pub mod clip;
pub mod episode;
pub mod io;
pub mod synth;

pub use clip::{time_to_frame_index, ClipRecord, Dataset, Split, LABEL_CORRECT, LABEL_MISTAKE};
pub use episode::{extract_correctness, Action, EpisodeState, ACTIONS};
pub use io::{load_feature_files, resolve_manifest, save_dataset, Manifest, ManifestEntry};
pub use synth::{
    clip_plan, generate_dataset, generate_split_dataset, generate_split_dataset_with_workers,
    ClipPlan, SynthConfig,
};
