//! Pretrains the mistake detector on a small synthetic dataset and reports
//! how well it separates the classes once evidence is visible.
//!
//! The detector sees a sliding window of frames, anticipates the next frames
//! with an auxiliary regression head, and classifies mistake vs. correct.
//! Run with `cargo run --example train_detector`.

use exitlab::detector::{
    full_observation_ap, post_onset_accuracy, post_onset_ap, pretrain, Detector, DetectorConfig,
    DetectorMeta, DetectorTrainConfig,
};
use exitlab::env::{generate_split_dataset, Split, SynthConfig};
use exitlab::Result;

fn main() -> Result<()> {
    let synth = SynthConfig {
        feature_dim: 8,
        noise_level: 0.2,
        seed: 3,
        ..SynthConfig::default()
    };
    let data = generate_split_dataset(&synth, 60, 20, 20)?;

    let cfg = DetectorConfig {
        feature_dim: synth.feature_dim,
        ..DetectorConfig::default()
    };
    let train = DetectorTrainConfig {
        steps: 300,
        log_every: 60,
        ..DetectorTrainConfig::default()
    };

    let seed = 7;
    let mut detector = Detector::<f64>::init(&cfg, seed)?;
    let report = pretrain(&mut detector, &data, &train, seed)?;
    for record in &report.records {
        println!("step {:>4}  loss {:.4}", record.step, record.loss);
    }

    // Windows before the evidence onset are undecidable by construction, so
    // the probes only pool windows at or after it.
    println!("val  full-observation AP : {:.4}", full_observation_ap(&detector, &data, Split::Val)?);
    println!("val  post-onset AP       : {:.4}", post_onset_ap(&detector, &data, Split::Val, &synth)?);
    println!("val  post-onset accuracy : {:.4}", post_onset_accuracy(&detector, &data, Split::Val, &synth)?);

    // Checkpoints store parameters as 32-bit floats; saving a reloaded model
    // again must reproduce the file byte for byte.
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("detector.ckpt");
    let copy = dir.path().join("detector_copy.ckpt");
    let meta = DetectorMeta { config: cfg, seed, steps: report.steps, final_loss: report.final_loss };
    detector.save(&path, &meta)?;
    let (reloaded, meta) = Detector::<f64>::load(&path)?;
    reloaded.save(&copy, &meta)?;
    let identical = std::fs::read(&path).expect("read") == std::fs::read(&copy).expect("read");
    println!(
        "checkpoint round trip: {} ({} steps recorded, resave {})",
        path.display(),
        meta.steps,
        if identical { "bit-identical" } else { "DIFFERS" }
    );
    Ok(())
}
