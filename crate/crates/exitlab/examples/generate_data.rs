//! Generates a synthetic clip dataset, prints its shape, and round-trips it
//! through the on-disk format.
//!
//! Each clip hides an evidence onset: frames wander around the origin until
//! the onset, then drift toward a label-specific prototype. Run with
//! `cargo run --example generate_data`.

use exitlab::env::{
    clip_plan, generate_split_dataset, load_feature_files, save_dataset, Split, SynthConfig,
};
use exitlab::Result;

fn main() -> Result<()> {
    let cfg = SynthConfig {
        feature_dim: 8,
        seed: 42,
        ..SynthConfig::default()
    };
    let data = generate_split_dataset(&cfg, 40, 10, 20)?;

    println!("generated {} clips at {} fps, feature dim {}", data.clips.len(), data.fps, data.feature_dim);
    for split in [Split::Train, Split::Val, Split::Test] {
        let indices = data.split_indices(split);
        let mistakes = indices.iter().filter(|&&i| data.clips[i].is_mistake()).count();
        let frames: usize = indices.iter().map(|&i| data.clips[i].frame_count()).sum();
        println!(
            "  {:<5}  {:>3} clips  {:>4} frames  {:>2} mistakes",
            split.name(),
            indices.len(),
            frames,
            mistakes
        );
    }

    // The generator plans each clip from (seed, split, ordinal) alone, so the
    // hidden onset of any clip can be recovered without storing it.
    let clip = &data.clips[data.split_indices(Split::Test)[0]];
    let plan = clip_plan(&cfg, Split::Test, 0);
    println!(
        "first test clip {}: {} frames, label {}, evidence onset at frame {}",
        clip.id,
        clip.frame_count(),
        if clip.is_mistake() { "mistake" } else { "correct" },
        plan.onset_frame
    );

    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = save_dataset(dir.path(), &data)?;
    let reloaded = load_feature_files(&manifest)?;
    assert_eq!(reloaded.clips.len(), data.clips.len());
    let same = data
        .clips
        .iter()
        .zip(&reloaded.clips)
        .all(|(a, b)| a.id == b.id && a.label == b.label && a.features.data() == b.features.data());
    println!("save/load round trip through {}: {}", manifest.display(), if same { "bit-identical" } else { "MISMATCH" });
    Ok(())
}
