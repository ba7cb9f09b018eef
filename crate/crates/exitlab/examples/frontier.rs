//! Builds an accuracy-vs-observation frontier CSV from several evaluation
//! summaries, then reads it back.
//!
//! Each evaluated model contributes one (AP, mean OR) point; the frontier
//! file is what the plotting side consumes. Run with
//! `cargo run --example frontier`.

use exitlab::baselines::{ConfidenceThresholdDecider, RandomDecider};
use exitlab::detector::{pretrain, ConfidenceCache, Detector, DetectorConfig, DetectorTrainConfig};
use exitlab::env::{generate_split_dataset, Split, SynthConfig};
use exitlab::eval::{evaluate_model, export_frontier, frontier_points, load_frontier, NeverExit};
use exitlab::Result;

fn main() -> Result<()> {
    let synth = SynthConfig { feature_dim: 8, seed: 33, ..SynthConfig::default() };
    let data = generate_split_dataset(&synth, 40, 10, 24)?;
    let det_cfg = DetectorConfig { feature_dim: synth.feature_dim, ..DetectorConfig::default() };
    let mut detector = Detector::<f64>::init(&det_cfg, 2)?;
    pretrain(&mut detector, &data, &DetectorTrainConfig { steps: 200, ..DetectorTrainConfig::default() }, 2)?;

    // Sweep the confidence threshold to trace a frontier, and bracket it with
    // the random and full-observation extremes.
    let mut cache = ConfidenceCache::new();
    let mut summaries = Vec::new();
    summaries.push(evaluate_model(
        "random", &mut RandomDecider::new(0), &detector, &data, Split::Test, 9, "example", &mut cache,
    )?);
    for tau in [0.6, 0.75, 0.9] {
        let mut decider = ConfidenceThresholdDecider::new(tau, 1)?;
        summaries.push(evaluate_model(
            &format!("threshold_{tau}"), &mut decider, &detector, &data, Split::Test, 9, "example", &mut cache,
        )?);
    }
    summaries.push(evaluate_model(
        "full_observation", &mut NeverExit, &detector, &data, Split::Test, 9, "example", &mut cache,
    )?);

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("frontier.csv");
    let points = frontier_points(&summaries);
    export_frontier(&points, &path)?;

    println!("{:<18} {:>8} {:>8}", "model", "AP", "mean OR");
    for point in load_frontier(&path)? {
        println!("{:<18} {:>8.4} {:>8.4}", point.model, point.ap, point.or);
    }
    println!("wrote {} points to {}", points.len(), path.display());
    Ok(())
}
