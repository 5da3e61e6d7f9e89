//! Run configuration: a single TOML tree validated as a whole, with dotted
//! `--set path=value` overrides applied before deserialization. Unknown keys
//! are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flowdiff_core::backbone::DenoiserConfig;
use flowdiff_core::samplers::{PlanKind, SamplerPlan, SigmaRule};
use flowdiff_core::schedules::ScheduleParams;
use flowdiff_core::training::{OptimizerKind, TrainConfig};

use crate::CliError;

/// Environment variable supplying the default dataset root.
pub const DATA_ROOT_ENV: &str = "FLOWDIFF_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Parent directory for run directories.
    pub out_root: PathBuf,
    pub schedule: ScheduleParams,
    pub backbone: DenoiserConfig,
    pub training: TrainingSection,
    pub sampler: SamplerSection,
    pub data: DataSection,
    pub evaluation: EvalSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_root: PathBuf::from("runs"),
            schedule: ScheduleParams::default(),
            backbone: DenoiserConfig::default(),
            training: TrainingSection::default(),
            sampler: SamplerSection::default(),
            data: DataSection::default(),
            evaluation: EvalSection::default(),
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: usize,
    pub ema_decay: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 32,
            learning_rate: 2e-4,
            optimizer: OptimizerKind::Adam,
            checkpoint_every: 0,
            ema_decay: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRuleName {
    Zero,
    DdpmEquivalent,
    Eta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: PlanKind,
    pub stride: usize,
    pub sigma: SigmaRuleName,
    pub eta: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: PlanKind::Ddim,
            stride: 20,
            sigma: SigmaRuleName::Zero,
            eta: 0.0,
        }
    }
}

impl SamplerSection {
    pub fn build(&self, horizon: usize) -> Result<SamplerPlan, CliError> {
        let plan = match self.kind {
            PlanKind::DdpmFull => SamplerPlan::ddpm_full(horizon)?,
            PlanKind::Ddim => {
                let rule = match self.sigma {
                    SigmaRuleName::Zero => SigmaRule::DeterministicZero,
                    SigmaRuleName::DdpmEquivalent => SigmaRule::DdpmEquivalent,
                    SigmaRuleName::Eta => SigmaRule::Eta(self.eta),
                };
                SamplerPlan::ddim_strided(horizon, self.stride, rule)?
            }
        };
        Ok(plan)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Neutral-format dataset directory (falls back to $FLOWDIFF_DATA_ROOT).
    pub root: Option<PathBuf>,
    /// Normalizer for the parametric condition channels.
    pub re_max: f64,
}

impl DataSection {
    pub fn resolve_root(&self) -> Result<PathBuf, CliError> {
        if let Some(r) = &self.root {
            return Ok(r.clone());
        }
        if let Ok(v) = std::env::var(DATA_ROOT_ENV) {
            if !v.is_empty() {
                return Ok(PathBuf::from(v));
            }
        }
        Err(CliError::config(format!(
            "no data.root configured and {DATA_ROOT_ENV} is unset"
        )))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ensemble_size: usize,
    /// Also dump predicted mean/spread fields per case in the sample format.
    pub dump_fields: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ensemble_size: 8,
            dump_fields: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub height: usize,
    pub width: usize,
    pub replicates: usize,
    pub noise_scale: f64,
    pub obstacle_scale: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            replicates: 20,
            noise_scale: 0.08,
            obstacle_scale: 0.45,
        }
    }
}

impl RunConfig {
    /// Load from TOML, apply `--set` overrides, validate the whole tree.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut tree: toml::Value = text
            .parse()
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        for spec in overrides {
            apply_override(&mut tree, spec)?;
        }
        let config: RunConfig = tree
            .try_into()
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.backbone.validate()?;
        self.schedule.build()?;
        self.to_train_config().validate()?;
        self.sampler.build(self.schedule.num_steps)?;
        if self.evaluation.ensemble_size < 1 {
            return Err(CliError::config("evaluation.ensemble_size must be >= 1"));
        }
        if !(self.data.re_max.is_finite() && self.data.re_max > 0.0) {
            return Err(CliError::config(format!(
                "data.re_max must be > 0, got {}",
                self.data.re_max
            )));
        }
        Ok(())
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.training.iterations,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            optimizer: self.training.optimizer,
            seed: self.seed,
            schedule: self.schedule.clone(),
            backbone: self.backbone.clone(),
            dataset_root: self.data.root.clone(),
            checkpoint_every: self.training.checkpoint_every,
            ema_decay: self.training.ema_decay,
        }
    }

    /// Canonical serialization of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Short hash of the resolved config for run-directory naming.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Create `out_root/<command>-<hash>-<timestamp>/` and drop the resolved
    /// config inside for exact reproduction.
    pub fn make_run_dir(&self, command: &str) -> Result<PathBuf, CliError> {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let dir = self
            .out_root
            .join(format!("{command}-{}-{ts}", self.hash()));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        std::fs::write(dir.join("resolved.toml"), self.to_toml())
            .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }
}

fn apply_override(tree: &mut toml::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set needs path=value, got {spec:?}")))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::config(format!("bad override path {path:?}")));
    }
    // parse the value as TOML; fall back to a string literal
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut node = tree;
    for seg in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("{path}: {seg} is not a table")))?;
        node = table
            .entry(seg.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::config(format!("{path}: parent is not a table")))?;
    table.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}
