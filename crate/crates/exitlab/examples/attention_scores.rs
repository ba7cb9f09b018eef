//! Exports the detector's attention over the observed window at several
//! decision points of one clip.
//!
//! The scores are the classification token's attention row, restricted to
//! the frames actually observed and renormalized, so they always sum to one.
//! Run with `cargo run --example attention_scores`.

use exitlab::detector::{pretrain, Detector, DetectorConfig, DetectorTrainConfig};
use exitlab::env::{clip_plan, generate_split_dataset, Split, SynthConfig};
use exitlab::eval::export_attention;
use exitlab::Result;

fn main() -> Result<()> {
    let synth = SynthConfig { feature_dim: 8, seed: 4, ..SynthConfig::default() };
    let data = generate_split_dataset(&synth, 40, 10, 10)?;
    let det_cfg = DetectorConfig { feature_dim: synth.feature_dim, ..DetectorConfig::default() };
    let mut detector = Detector::<f64>::init(&det_cfg, 6)?;
    pretrain(&mut detector, &data, &DetectorTrainConfig { steps: 200, ..DetectorTrainConfig::default() }, 6)?;

    let clip = &data.clips[data.split_indices(Split::Test)[0]];
    let plan = clip_plan(&synth, Split::Test, 0);
    println!(
        "clip {}: {} frames, label {}, evidence onset at frame {}",
        clip.id,
        clip.frame_count(),
        if clip.is_mistake() { "mistake" } else { "correct" },
        plan.onset_frame
    );

    let dir = tempfile::tempdir().expect("temp dir");
    for t in [1, plan.onset_frame, clip.frame_count() - 1] {
        let path = dir.path().join(format!("attention_t{t}.csv"));
        export_attention(&detector, clip, t, &path)?;
        let text = std::fs::read_to_string(&path).expect("read back");
        let mut total = 0.0;
        print!("t={t:>2}  attention over observed frames:");
        for line in text.lines().skip(1) {
            let (frame, score) = line.split_once(',').expect("frame,score");
            let score: f64 = score.parse().expect("numeric score");
            total += score;
            print!("  {frame}:{score:.3}");
        }
        println!("  (sum {total:.6})");
    }
    Ok(())
}
