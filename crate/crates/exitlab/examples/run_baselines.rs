//! Runs every baseline exit strategy on one small synthetic benchmark and
//! prints an AP / observation-ratio table.
//!
//! Five baselines are stateless rules over the detector's running output;
//! the other three (frameexit, fastforward, adaframe) train a model first.
//! Run with `cargo run --example run_baselines`.

use exitlab::baselines::{
    adaframe_train, fastforward_train, frameexit_train, stateless_baseline_decider,
    AdaFrameDecider, BaselineSpec, FrameExitDecider, FrameExitTrainConfig, BASELINE_KINDS,
};
use exitlab::detector::{pretrain, ConfidenceCache, Detector, DetectorConfig, DetectorTrainConfig};
use exitlab::env::{generate_split_dataset, Split, SynthConfig};
use exitlab::eval::{evaluate_model, EvalSummary};
use exitlab::policy::{PolicyConfig, PolicyNet};
use exitlab::training::PpoConfig;
use exitlab::Result;

fn main() -> Result<()> {
    let synth = SynthConfig { feature_dim: 8, seed: 21, ..SynthConfig::desk() };
    let data = generate_split_dataset(&synth, 256, 48, 64)?;

    let det_cfg = DetectorConfig { feature_dim: synth.feature_dim, ..DetectorConfig::default() };
    let mut detector = Detector::<f64>::init(&det_cfg, 1)?;
    pretrain(&mut detector, &data, &DetectorTrainConfig { steps: 400, ..DetectorTrainConfig::default() }, 1)?;

    let policy_cfg = PolicyConfig::desk();
    let ppo = PpoConfig { total_steps: 24_000, probe_every: 1_000_000, ..PpoConfig::default() };
    let mut cache = ConfidenceCache::new();
    let mut rows: Vec<EvalSummary> = Vec::new();

    for (i, kind) in BASELINE_KINDS.iter().enumerate() {
        let seed = 100 + i as u64;
        let spec = BaselineSpec::default_for_kind(kind)?;
        let summary = match &spec {
            BaselineSpec::Frameexit { .. } => {
                let train = FrameExitTrainConfig { steps: 120, ..FrameExitTrainConfig::default() };
                let outcome = frameexit_train(&detector, &data, &policy_cfg, &train, seed, &mut cache)?;
                println!("  [frameexit selected schedule tau0={} tau1={}]", outcome.tau0, outcome.tau1);
                let mut decider = FrameExitDecider { classifier: outcome.classifier };
                evaluate_model(kind, &mut decider, &detector, &data, Split::Test, 9, "example", &mut cache)?
            }
            BaselineSpec::Fastforward { penalty } => {
                let mut policy = PolicyNet::<f64>::init(&policy_cfg, data.feature_dim, seed)?;
                fastforward_train(&mut policy, &detector, &data, *penalty, &ppo, seed, |_| {})?;
                let mut decider = exitlab::policy::GreedyPolicyDecider::new(&policy);
                evaluate_model(kind, &mut decider, &detector, &data, Split::Test, 9, "example", &mut cache)?
            }
            BaselineSpec::Adaframe { value_drop, drop_count } => {
                let mut policy = PolicyNet::<f64>::init(&policy_cfg, data.feature_dim, seed)?;
                adaframe_train(&mut policy, &detector, &data, &ppo, seed, |_| {})?;
                let mut decider = AdaFrameDecider::new(&policy, *value_drop, *drop_count)?;
                evaluate_model(kind, &mut decider, &detector, &data, Split::Test, 9, "example", &mut cache)?
            }
            stateless => {
                let mut decider = stateless_baseline_decider::<f64>(stateless, seed)?;
                evaluate_model(kind, decider.as_mut(), &detector, &data, Split::Test, 9, "example", &mut cache)?
            }
        };
        rows.push(summary);
    }

    println!();
    println!("{:<14} {:>8} {:>8}", "baseline", "AP", "mean OR");
    for row in &rows {
        println!("{:<14} {:>8.4} {:>8.4}", row.model, row.ap, row.mean_or);
    }
    println!("(cached detector passes reused across baselines: {} windows)", cache.len());
    Ok(())
}
