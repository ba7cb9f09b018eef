//! Run configuration and run manifests.
//!
//! One JSON file drives every command. A config may carry a `"preset"` key
//! (`"desk"` for the minutes-scale CPU setup, `"paper"` for the full-scale
//! one); the preset expands to a complete configuration and the file's
//! remaining keys are deep-merged over it — objects merge recursively,
//! scalars and arrays replace. Unknown keys are rejected everywhere.
//!
//! A single root `seed` drives the whole run: each component (data
//! generation, detector, policy, every baseline, evaluation) works from a
//! seed derived from it by label, so components can be re-run independently
//! without disturbing one another's random streams. `data.synth.seed` is
//! therefore derived, not set directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineSpec;
use crate::detector::{DetectorConfig, DetectorTrainConfig};
use crate::env::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::numerics::checkpoint::write_atomic;
use crate::policy::PolicyConfig;
use crate::rng::derive_seed;
use crate::training::{PpoConfig, RewardWeights};

/// Dataset settings: the synthetic generator plus split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthConfig::desk(),
            n_train: 4096,
            n_val: 64,
            n_test: 128,
        }
    }
}

impl DataConfig {
    /// Full-scale split sizes and feature width.
    pub fn paper() -> Self {
        DataConfig {
            synth: SynthConfig {
                feature_dim: 2048,
                ..SynthConfig::default()
            },
            n_train: 2624,
            n_val: 200,
            n_test: 1037,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config(format!(
                "every split needs at least one clip, got n_train={}, n_val={}, n_test={}",
                self.n_train, self.n_val, self.n_test
            )));
        }
        Ok(())
    }
}

/// Everything one run needs, in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; all component seeds are derived from it.
    pub seed: u64,
    /// Directory that receives artifacts when `--out` is omitted.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    /// Weights of the exit policy's three-term reward.
    pub reward: RewardWeights,
    /// Baselines available to `run-baseline --kind` and `evaluate
    /// --baseline`, at most one spec per kind.
    pub baselines: Vec<BaselineSpec>,
}

fn default_baselines() -> Vec<BaselineSpec> {
    crate::baselines::BASELINE_KINDS
        .iter()
        .map(|kind| BaselineSpec::default_for_kind(kind).expect("known kind"))
        .collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            data: DataConfig::default(),
            detector: DetectorConfig::desk(),
            detector_train: DetectorTrainConfig::default(),
            policy: PolicyConfig::desk(),
            ppo: PpoConfig::desk(),
            reward: RewardWeights::default(),
            baselines: default_baselines(),
        }
    }
}

impl RunConfig {
    /// Minutes-scale single-CPU setup; identical to [`Default`].
    pub fn desk() -> Self {
        RunConfig::default()
    }

    /// Full-scale setup: 2048-dim features, 2624/200/1037 splits, the large
    /// detector and policy, and the 42M-step optimization schedule.
    pub fn paper() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/paper"),
            data: DataConfig::paper(),
            detector: DetectorConfig::paper(),
            detector_train: DetectorTrainConfig::paper(),
            policy: PolicyConfig::paper(),
            ppo: PpoConfig::paper(),
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        self.data.validate()?;
        self.detector.validate()?;
        self.detector_train.validate()?;
        self.policy.validate()?;
        self.ppo.validate()?;
        self.reward.validate()?;
        let mut seen = Vec::new();
        for spec in &self.baselines {
            spec.validate()?;
            if seen.contains(&spec.kind()) {
                return Err(Error::Config(format!(
                    "baseline kind {:?} appears more than once; --kind lookups would be ambiguous",
                    spec.kind()
                )));
            }
            seen.push(spec.kind());
        }
        if self.data.synth.seed != 0 {
            return Err(Error::Config(format!(
                "data.synth.seed ({}) is derived from the root seed and cannot be set directly; \
                 set the top-level \"seed\" instead",
                self.data.synth.seed
            )));
        }
        if self.detector.feature_dim != self.data.synth.feature_dim {
            return Err(Error::Config(format!(
                "detector feature_dim {} does not match data feature_dim {}",
                self.detector.feature_dim, self.data.synth.feature_dim
            )));
        }
        Ok(())
    }

    /// The generator config with the derived data seed applied.
    pub fn synth_with_seed(&self) -> SynthConfig {
        SynthConfig {
            seed: self.data_seed(),
            ..self.data.synth.clone()
        }
    }

    /// The spec for `kind` from [`Self::baselines`], or the kind's defaults
    /// when the list does not mention it.
    pub fn baseline_for_kind(&self, kind: &str) -> Result<BaselineSpec> {
        for spec in &self.baselines {
            if spec.kind() == kind {
                return Ok(spec.clone());
            }
        }
        BaselineSpec::default_for_kind(kind)
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data")
    }

    pub fn detector_seed(&self) -> u64 {
        derive_seed(self.seed, "detector")
    }

    pub fn policy_seed(&self) -> u64 {
        derive_seed(self.seed, "policy")
    }

    pub fn baseline_seed(&self, kind: &str) -> u64 {
        derive_seed(self.seed, &format!("baseline-{kind}"))
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, "eval")
    }
}

/// SHA-256 (hex) over the canonical JSON serialization of the resolved
/// config. Field order is fixed by declaration, so equal configs hash
/// equally.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let json = serde_json::to_string(cfg).map_err(|e| Error::json("run config", e))?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Deep-merges `user` over `base`: objects merge key by key, everything else
/// is replaced by the user value.
fn merge(base: serde_json::Value, user: serde_json::Value) -> serde_json::Value {
    match (base, user) {
        (serde_json::Value::Object(mut b), serde_json::Value::Object(u)) => {
            for (key, uv) in u {
                let merged = match b.remove(&key) {
                    Some(bv) => merge(bv, uv),
                    None => uv,
                };
                b.insert(key, merged);
            }
            serde_json::Value::Object(b)
        }
        (_, user) => user,
    }
}

fn preset_value(name: &str) -> Result<serde_json::Value> {
    let cfg = match name {
        "desk" => RunConfig::desk(),
        "paper" => RunConfig::paper(),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected \"desk\" or \"paper\""
            )))
        }
    };
    serde_json::to_value(&cfg).map_err(|e| Error::json(format!("preset {name}"), e))
}

/// Parses and validates a run config from JSON text. `origin` names the
/// source in error messages.
pub fn parse_run_config(text: &str, origin: &str) -> Result<RunConfig> {
    let mut value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("{origin} is not valid JSON: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("{origin}: run config must be a JSON object")))?;
    let merged = match obj.remove("preset") {
        Some(serde_json::Value::String(name)) => merge(preset_value(&name)?, value),
        Some(other) => {
            return Err(Error::Config(format!(
                "{origin}: \"preset\" must be a string, got {other}"
            )))
        }
        None => value,
    };
    let cfg: RunConfig = serde_json::from_value(merged)
        .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a run config file (see [`parse_run_config`]).
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let display = path.display().to_string();
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("config file {display}")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    parse_run_config(&text, &display)
}

/// What a command did: written atomically next to its primary artifact, and
/// sufficient (config + seed) to reproduce the run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// The subcommand that ran.
    pub command: String,
    /// SHA-256 of the resolved config; absent for config-free commands.
    pub config_hash: Option<String>,
    /// Root seed of the run; absent for commands that draw no randomness.
    pub seed: Option<u64>,
    pub tool_version: String,
    /// RFC 3339 UTC timestamps. The only fields that differ between repeated
    /// runs of the same command.
    pub started_at: String,
    pub finished_at: String,
    /// Paths of everything the command wrote or consumed, by role.
    pub artifacts: BTreeMap<String, String>,
    /// Headline metrics of the run.
    pub metrics: BTreeMap<String, f64>,
    /// The fully resolved configuration the hash covers.
    pub config: Option<RunConfig>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.config.is_some() != self.config_hash.is_some() {
            return Err(Error::Internal(
                "run manifest must carry a config and its hash together".into(),
            ));
        }
        if let (Some(cfg), Some(hash)) = (&self.config, &self.config_hash) {
            let expected = config_hash(cfg)?;
            if *hash != expected {
                return Err(Error::Internal(format!(
                    "run manifest hash {hash} does not match its config (expected {expected})"
                )));
            }
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        write_atomic(path, json.as_bytes())
    }

    /// Loads a manifest and re-verifies that the stored hash matches the
    /// stored config.
    pub fn load(path: &Path) -> Result<RunManifest> {
        let display = path.display().to_string();
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("run manifest {display}")));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&display, e))?;
        match (&manifest.config, &manifest.config_hash) {
            (Some(cfg), Some(hash)) => {
                let expected = config_hash(cfg)?;
                if *hash != expected {
                    return Err(Error::format(
                        &display,
                        format!("config hash {hash} does not match the embedded config ({expected})"),
                    ));
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::format(
                    &display,
                    "config and config_hash must be present or absent together",
                ))
            }
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_desk_preset() {
        let cfg = parse_run_config("{}", "test").unwrap();
        assert_eq!(cfg, RunConfig::desk());
        let named = parse_run_config(r#"{"preset": "desk"}"#, "test").unwrap();
        assert_eq!(named, cfg);
    }

    #[test]
    fn paper_preset_sets_full_scale_values() {
        let cfg = parse_run_config(r#"{"preset": "paper"}"#, "test").unwrap();
        assert_eq!(cfg.data.n_train, 2624);
        assert_eq!(cfg.data.n_val, 200);
        assert_eq!(cfg.data.n_test, 1037);
        assert_eq!(cfg.data.synth.feature_dim, 2048);
        assert_eq!(cfg.detector.feature_dim, 2048);
        assert_eq!(cfg.detector.projection_dim, 2048);
        assert_eq!(cfg.policy.hidden_size, 512);
        assert_eq!(cfg.ppo.total_steps, 42_000_000);
        assert_eq!(cfg.ppo.learning_rate, 1e-4);
    }

    #[test]
    fn user_keys_override_preset_values_deeply() {
        let text = r#"{
            "preset": "paper",
            "seed": 7,
            "ppo": {"total_steps": 1234},
            "data": {"synth": {"noise_level": 0.25}}
        }"#;
        let cfg = parse_run_config(text, "test").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ppo.total_steps, 1234);
        // Untouched siblings keep preset values.
        assert_eq!(cfg.ppo.learning_rate, 1e-4);
        assert_eq!(cfg.data.synth.noise_level, 0.25);
        assert_eq!(cfg.data.synth.feature_dim, 2048);
        assert_eq!(cfg.data.n_test, 1037);
    }

    #[test]
    fn arrays_replace_rather_than_merge() {
        let text = r#"{"baselines": [{"kind": "random"}]}"#;
        let cfg = parse_run_config(text, "test").unwrap();
        assert_eq!(cfg.baselines, vec![BaselineSpec::Random]);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"data": {"bogus": 1}}"#,
            r#"{"data": {"synth": {"bogus": 1}}}"#,
            r#"{"detector": {"bogus": 1}}"#,
            r#"{"ppo": {"bogus": 1}}"#,
            r#"{"baselines": [{"kind": "random", "bogus": 1}]}"#,
        ] {
            let err = parse_run_config(text, "test").unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text} should be an invalid-config error: {err}");
        }
    }

    #[test]
    fn malformed_json_and_bad_presets_are_config_errors() {
        for text in ["{not json", r#"{"preset": "warehouse"}"#, r#"{"preset": 3}"#, "[1, 2]"] {
            let err = parse_run_config(text, "test").unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn cross_field_validation_catches_inconsistencies() {
        let mismatched = r#"{"detector": {"feature_dim": 8}}"#;
        let err = parse_run_config(mismatched, "test").unwrap_err();
        assert!(err.to_string().contains("feature_dim"), "{err}");

        let direct_seed = r#"{"data": {"synth": {"seed": 5}}}"#;
        let err = parse_run_config(direct_seed, "test").unwrap_err();
        assert!(err.to_string().contains("derived from the root seed"), "{err}");

        let dup = r#"{"baselines": [{"kind": "random"}, {"kind": "random"}]}"#;
        let err = parse_run_config(dup, "test").unwrap_err();
        assert!(err.to_string().contains("more than once"), "{err}");
    }

    #[test]
    fn presets_validate_and_hash_deterministically() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            cfg.validate().unwrap();
            assert_eq!(config_hash(&cfg).unwrap(), config_hash(&cfg).unwrap());
        }
        let desk = config_hash(&RunConfig::desk()).unwrap();
        let paper = config_hash(&RunConfig::paper()).unwrap();
        assert_ne!(desk, paper);
        assert_eq!(desk.len(), 64);
        let reseeded = RunConfig { seed: 1, ..RunConfig::desk() };
        assert_ne!(config_hash(&reseeded).unwrap(), desk);
    }

    #[test]
    fn component_seeds_are_distinct_and_stable() {
        let cfg = RunConfig::desk();
        let seeds = [
            cfg.data_seed(),
            cfg.detector_seed(),
            cfg.policy_seed(),
            cfg.eval_seed(),
            cfg.baseline_seed("random"),
            cfg.baseline_seed("frameexit"),
        ];
        for (i, a) in seeds.iter().enumerate() {
            for b in &seeds[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(cfg.data_seed(), RunConfig::desk().data_seed());
        assert_eq!(cfg.synth_with_seed().seed, cfg.data_seed());
        let other = RunConfig { seed: 9, ..RunConfig::desk() };
        assert_ne!(other.data_seed(), cfg.data_seed());
    }

    #[test]
    fn baseline_lookup_prefers_the_configured_spec() {
        let text = r#"{"baselines": [{"kind": "adafocus_v2", "threshold": 0.6}]}"#;
        let cfg = parse_run_config(text, "test").unwrap();
        assert_eq!(
            cfg.baseline_for_kind("adafocus_v2").unwrap(),
            BaselineSpec::AdafocusV2 { threshold: 0.6 }
        );
        // Kinds absent from the list fall back to their defaults.
        assert_eq!(cfg.baseline_for_kind("random").unwrap(), BaselineSpec::Random);
        assert!(cfg.baseline_for_kind("made_up").is_err());
    }

    #[test]
    fn run_manifest_round_trips_and_verifies_its_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run_manifest.json");
        let cfg = RunConfig::desk();
        let manifest = RunManifest {
            command: "gen-data".into(),
            config_hash: Some(config_hash(&cfg).unwrap()),
            seed: Some(cfg.seed),
            tool_version: "0.1.0".into(),
            started_at: "2026-01-01T00:00:00Z".into(),
            finished_at: "2026-01-01T00:00:01Z".into(),
            artifacts: BTreeMap::from([("data_dir".to_string(), "runs/desk/data".to_string())]),
            metrics: BTreeMap::from([("n_train".to_string(), 256.0)]),
            config: Some(cfg),
        };
        manifest.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded, manifest);

        // Tampering with the stored config breaks the hash check on load.
        let mut value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        value["config"]["seed"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let err = RunManifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");
    }

    #[test]
    fn config_free_manifest_is_valid_but_mixed_presence_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let manifest = RunManifest {
            command: "frontier".into(),
            config_hash: None,
            seed: None,
            tool_version: "0.1.0".into(),
            started_at: "2026-01-01T00:00:00Z".into(),
            finished_at: "2026-01-01T00:00:01Z".into(),
            artifacts: BTreeMap::new(),
            metrics: BTreeMap::new(),
            config: None,
        };
        manifest.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), manifest);

        let broken = RunManifest {
            config_hash: Some("deadbeef".into()),
            ..manifest
        };
        assert!(broken.save(&path).is_err());
    }
}
