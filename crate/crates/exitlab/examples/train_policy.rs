//! Trains the recurrent exit policy with PPO against a frozen detector and
//! compares it with never exiting early.
//!
//! The reward has three parts: a dense confidence-improvement term for
//! continuing, a sparse terminal correctness term for exiting, and a
//! per-step observation penalty. Under the desk preset the numbers work out
//! so that watching a clip up to its onset costs clearly less than the value
//! of the evidence gained, and over a few hundred thousand PPO steps the
//! policy moves from exiting at the first frame to waiting for the
//! detector's confidence to commit. Takes about a minute on one CPU core.
//!
//! Run with `cargo run --release --example train_policy`.

use exitlab::config::RunConfig;
use exitlab::detector::{full_observation_ap, pretrain, ConfidenceCache, Detector};
use exitlab::env::{generate_split_dataset, Split};
use exitlab::eval::evaluate_model;
use exitlab::policy::{GreedyPolicyDecider, PolicyNet};
use exitlab::training::{load_policy, save_policy, train_policy, PolicyMeta, RewardScheme};
use exitlab::Result;

fn main() -> Result<()> {
    let cfg = RunConfig::desk();
    let synth = cfg.synth_with_seed();
    let data = generate_split_dataset(&synth, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test)?;
    println!(
        "generated {} clips ({} train / {} val / {} test)",
        data.clips.len(),
        cfg.data.n_train,
        cfg.data.n_val,
        cfg.data.n_test
    );

    let mut detector = Detector::<f64>::init(&cfg.detector, cfg.detector_seed())?;
    pretrain(&mut detector, &data, &cfg.detector_train, cfg.detector_seed())?;
    let frozen = detector.checksum();
    println!(
        "detector ready: test full-observation AP {:.3}",
        full_observation_ap(&detector, &data, Split::Test)?
    );

    // The exit policy trains against the frozen detector. Early on it exits
    // immediately (observation ratio near zero, probe AP near chance); the
    // dense term and the value function then pull it toward watching until
    // the confidence stream commits.
    let scheme = RewardScheme::Exit { weights: cfg.reward.clone() };
    let mut policy = PolicyNet::<f64>::init(&cfg.policy, data.feature_dim, cfg.policy_seed())?;
    let outcome = train_policy(
        &mut policy,
        &detector,
        &data,
        &scheme,
        &cfg.ppo,
        cfg.policy_seed(),
        |r| {
            if r.step % 40_000 == 0 {
                let probe = r.probe_ap.map(|ap| format!("{ap:.3}")).unwrap_or_else(|| "-".into());
                println!(
                    "step {:>6}  reward {:+.3}  or {:.3}  probe_ap {}  entropy {:.3}",
                    r.step, r.mean_reward, r.mean_or, probe, r.entropy
                );
            }
        },
    )?;
    println!(
        "trained {} steps over {} episodes; detector stayed frozen: {}",
        outcome.steps,
        outcome.episodes,
        detector.checksum() == frozen
    );

    // Greedy evaluation on the test split, against the full-observation
    // reference that watches every clip to the end.
    let mut cache = ConfidenceCache::new();
    let policy_summary = evaluate_model(
        "exit_policy",
        &mut GreedyPolicyDecider::new(&policy),
        &detector,
        &data,
        Split::Test,
        cfg.eval_seed(),
        "example",
        &mut cache,
    )?;
    let full_summary = evaluate_model(
        "full_observation",
        &mut exitlab::eval::NeverExit,
        &detector,
        &data,
        Split::Test,
        cfg.eval_seed(),
        "example",
        &mut cache,
    )?;
    println!(
        "test split  exit policy       AP {:.4}  mean OR {:.4}",
        policy_summary.ap, policy_summary.mean_or
    );
    println!(
        "test split  full observation  AP {:.4}  mean OR {:.4}",
        full_summary.ap, full_summary.mean_or
    );

    // Checkpoints store parameters as 32-bit floats; saving a reloaded policy
    // again must reproduce the file byte for byte.
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("exit_policy.ckpt");
    let copy = dir.path().join("exit_policy_copy.ckpt");
    let meta = PolicyMeta {
        config: policy.cfg.clone(),
        feature_dim: policy.feature_dim,
        seed: cfg.policy_seed(),
        scheme,
        ppo: cfg.ppo.clone(),
        steps_trained: outcome.steps,
        final_probe_ap: outcome.final_probe_ap,
    };
    save_policy(&policy, &path, &meta)?;
    let (reloaded, meta) = load_policy::<f64>(&path)?;
    save_policy(&reloaded, &copy, &meta)?;
    let identical = std::fs::read(&path).expect("read") == std::fs::read(&copy).expect("read");
    println!(
        "checkpoint round trip: resave {}",
        if identical { "bit-identical" } else { "DIFFERS" }
    );
    Ok(())
}
