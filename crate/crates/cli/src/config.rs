//! Pipeline configuration: one JSON file covering all six stages.
//!
//! Parsing is fail-closed (unknown keys are errors), defaults are filled
//! during normalization, and every randomized component draws its seed
//! from the master seed.

use std::path::{Path, PathBuf};

use dynamite_core::attack::{AttackKind, AttackParams};
use dynamite_core::data::{CleanSpec, SynthSpec};
use dynamite_core::defense::DefenseConfig;
use dynamite_core::nn::TrainConfig;
use dynamite_core::router::GbtConfig;
use dynamite_core::seeding::seed_for;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthSpec),
    Csv { path: PathBuf, schema: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub clean: CleanSpec,
    pub test_fraction: Option<f64>,
    pub stratified: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dims: Option<Vec<usize>>,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kinds: Option<Vec<AttackKind>>,
    pub epsilons: Option<Vec<f64>>,
    pub train_epsilon: Option<f64>,
    pub params: Option<AttackParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub random_trials: Option<usize>,
    pub timing_repeats: Option<usize>,
    pub timing_max_samples: Option<usize>,
}

/// The raw on-disk configuration; every field optional so a minimal file
/// normalizes to the full default pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfigFile {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub data: DataSection,
    pub model: ModelSection,
    pub attack: AttackSection,
    pub defense: Option<DefenseConfig>,
    pub selector: Option<GbtConfig>,
    pub eval: EvalSection,
}

/// Fully resolved configuration: defaults filled, seeds derived, every
/// cross-field constraint checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
    pub source: DataSource,
    pub clean: CleanSpec,
    pub test_fraction: f64,
    pub stratified: bool,
    pub hidden_dims: Vec<usize>,
    pub train: TrainConfig,
    pub kinds: Vec<AttackKind>,
    pub epsilons: Vec<f64>,
    pub train_epsilon: f64,
    pub attack_params: AttackParams,
    pub defense: DefenseConfig,
    pub selector: GbtConfig,
    pub random_trials: usize,
    pub timing_repeats: usize,
    pub timing_max_samples: usize,
}

impl PipelineConfig {
    /// Canonical fingerprint of the normalized configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hex(&hasher.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Loads, normalizes, and validates a configuration file. The
/// `DYNAMITE_SEED` environment variable (when set) overrides the master
/// seed.
pub fn validate_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let file: PipelineConfigFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    normalize_config(file)
}

pub fn normalize_config(file: PipelineConfigFile) -> Result<PipelineConfig, CliError> {
    let mut seed = file.seed.unwrap_or(7);
    if let Ok(env_seed) = std::env::var("DYNAMITE_SEED") {
        seed = env_seed
            .parse()
            .map_err(|_| CliError::Config(format!("DYNAMITE_SEED={env_seed} is not a u64")))?;
    }

    let mut source = file.data.source;
    if let DataSource::Synth(spec) = &mut source {
        // like every other stage seed, the generator seed derives from
        // the master seed
        spec.seed = seed_for(seed, "synth");
        spec.validate()
            .map_err(|e| CliError::Config(format!("data.source.synth: {e}")))?;
    }

    let test_fraction = file.data.test_fraction.unwrap_or(0.3);
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CliError::Config(format!(
            "data.test_fraction must be in (0,1), got {test_fraction}"
        )));
    }

    let mut train = file.model.train.unwrap_or_default();
    train.seed = seed_for(seed, "baseline-train");
    train
        .validate()
        .map_err(|e| CliError::Config(format!("model.train: {e}")))?;

    let hidden_dims = file.model.hidden_dims.unwrap_or_else(|| vec![128, 64]);
    if hidden_dims.is_empty() || hidden_dims.iter().any(|&d| d == 0) {
        return Err(CliError::Config(
            "model.hidden_dims must be nonempty positive".into(),
        ));
    }

    let kinds = file.attack.kinds.unwrap_or_else(|| AttackKind::ALL.to_vec());
    if kinds.is_empty() {
        return Err(CliError::Config("attack.kinds must be nonempty".into()));
    }
    let epsilons = file
        .attack
        .epsilons
        .unwrap_or_else(|| vec![0.01, 0.1, 0.2, 0.3]);
    if epsilons.is_empty() {
        return Err(CliError::Config("attack.epsilons must be nonempty".into()));
    }
    if epsilons.iter().any(|&e| e < 0.0) {
        return Err(CliError::Config("attack.epsilons must be >= 0".into()));
    }
    let train_epsilon = file.attack.train_epsilon.unwrap_or(0.1);
    if !epsilons.iter().any(|e| e.to_bits() == train_epsilon.to_bits()) {
        return Err(CliError::Config(format!(
            "attack.train_epsilon {train_epsilon} is not one of attack.epsilons {epsilons:?}"
        )));
    }
    let attack_params = file.attack.params.unwrap_or_default();
    attack_params
        .validate()
        .map_err(|e| CliError::Config(format!("attack.params: {e}")))?;

    let mut defense = file.defense.unwrap_or_default();
    defense.seed = seed_for(seed, "defenses");
    defense.train.seed = seed_for(seed, "defense-train");
    defense
        .validate()
        .map_err(|e| CliError::Config(format!("defense: {e}")))?;

    let mut selector = file.selector.unwrap_or_default();
    selector.seed = seed_for(seed, "selector");
    selector
        .validate()
        .map_err(|e| CliError::Config(format!("selector: {e}")))?;

    let random_trials = file.eval.random_trials.unwrap_or(100);
    if random_trials < 1 {
        return Err(CliError::Config("eval.random_trials must be >= 1".into()));
    }
    let timing_repeats = file.eval.timing_repeats.unwrap_or(5);
    if timing_repeats < 3 {
        return Err(CliError::Config("eval.timing_repeats must be >= 3".into()));
    }
    let timing_max_samples = file.eval.timing_max_samples.unwrap_or(512);
    if timing_max_samples == 0 {
        return Err(CliError::Config("eval.timing_max_samples must be >= 1".into()));
    }

    Ok(PipelineConfig {
        seed,
        output_dir: file.output_dir.unwrap_or_else(|| PathBuf::from("runs/out")),
        threads: file.threads,
        source,
        clean: file.data.clean,
        test_fraction,
        stratified: file.data.stratified.unwrap_or(true),
        hidden_dims,
        train,
        kinds,
        epsilons,
        train_epsilon,
        attack_params,
        defense,
        selector,
        random_trials,
        timing_repeats,
        timing_max_samples,
    })
}
