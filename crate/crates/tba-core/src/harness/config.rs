//! Experiment configuration: TOML-backed, hashable, validated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::solver::SolverConfig;

/// Where the benchmark data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Seeded Gaussian clusters, split 80/20 into train and test.
    Blobs {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    /// Pre-extracted feature CSVs with a `label` column.
    Csv { train: PathBuf, test: PathBuf },
}

fn default_classes() -> usize {
    4
}
fn default_dim() -> usize {
    16
}
fn default_per_class() -> usize {
    200
}
fn default_separation() -> f64 {
    6.0
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            classes: default_classes(),
            dim: default_dim(),
            per_class: default_per_class(),
            separation: default_separation(),
        }
    }
}

impl DatasetSpec {
    /// Short human-readable identifier stamped into reports.
    pub fn id(&self) -> String {
        match self {
            DatasetSpec::Blobs {
                classes,
                dim,
                per_class,
                separation,
            } => format!("blobs-k{classes}-d{dim}-n{per_class}-sep{separation}"),
            DatasetSpec::Csv { train, .. } => train
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }
}

/// Victim architecture and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Hidden layer widths of the feature extractor.
    pub hidden: Vec<usize>,
    /// Width of the features feeding the final layer.
    pub feature_dim: usize,
    /// Word length of the quantized final layer.
    pub q_bits: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![],
            feature_dim: 32,
            q_bits: 8,
            epochs: 8,
            learning_rate: 0.1,
            batch_size: 64,
        }
    }
}

/// Attack objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Weight of the malicious and benign hinge terms.
    pub lambda1: f64,
    /// Weight of the bit-distance term.
    pub lambda2: f64,
    /// Hinge margin slack. Margins well above the victim's typical logit
    /// gap keep the misclassification pressure alive long enough for
    /// one-bit candidate pairs to surface during the solve.
    pub margin_k: f64,
    /// Auxiliary samples drawn from the training split.
    pub aux_size: usize,
    /// 1 runs the single-target attack; larger values switch to the
    /// multi-target attack with that many goals per trial.
    pub goals_per_trial: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 30.0,
            margin_k: 30.0,
            aux_size: 128,
            goals_per_trial: 1,
        }
    }
}

/// Full description of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    /// Where reports, traces and checkpoints are written. Not part of
    /// the config hash. `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub architecture: ArchConfig,
    pub attack: AttackConfig,
    pub solver: SolverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // A finer step than the solver's own default: the window in which
        // a one-bit candidate is visible before the released tensor
        // absorbs the flip spans roughly a/(1-a) iterations, where
        // a = (1 - 2*eta*lambda2)^inner_rounds. At eta = 0.002 that
        // window exceeds one iteration, so the per-iteration candidate
        // snapshot cannot miss it.
        let solver = SolverConfig {
            step_size: 0.002,
            ..SolverConfig::default()
        };
        Self {
            seed: 42,
            trials: 10,
            out_dir: None,
            dataset: DatasetSpec::default(),
            architecture: ArchConfig::default(),
            attack: AttackConfig::default(),
            solver,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a TOML file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config to TOML: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        match &self.dataset {
            DatasetSpec::Blobs {
                classes,
                dim,
                per_class,
                separation,
            } => {
                if *classes < 2 {
                    return Err(Error::Config("blobs need at least 2 classes".into()));
                }
                if *dim == 0 {
                    return Err(Error::Config("blob dimension must be positive".into()));
                }
                if *per_class < 5 {
                    return Err(Error::Config(
                        "blobs need at least 5 samples per class for an 80/20 split".into(),
                    ));
                }
                if !(separation.is_finite() && *separation > 0.0) {
                    return Err(Error::Config("blob separation must be positive".into()));
                }
            }
            DatasetSpec::Csv { .. } => {}
        }
        let a = &self.architecture;
        if a.feature_dim == 0 || a.epochs == 0 || a.batch_size == 0 {
            return Err(Error::Config(
                "feature_dim, epochs and batch_size must be positive".into(),
            ));
        }
        if a.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(a.learning_rate.is_finite() && a.learning_rate > 0.0) {
            return Err(Error::Config("training learning rate must be positive".into()));
        }
        if !(2..=16).contains(&a.q_bits) {
            return Err(Error::Config(format!(
                "q_bits must be in 2..=16, got {}",
                a.q_bits
            )));
        }
        let at = &self.attack;
        for (name, v) in [
            ("lambda1", at.lambda1),
            ("lambda2", at.lambda2),
            ("margin_k", at.margin_k),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if at.aux_size == 0 {
            return Err(Error::Config("aux_size must be at least 1".into()));
        }
        if at.goals_per_trial == 0 {
            return Err(Error::Config("goals_per_trial must be at least 1".into()));
        }
        self.solver.validate()
    }

    /// SHA-256 over the canonical JSON form of every semantic field.
    /// The output directory is excluded; everything else participates.
    pub fn config_hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.out_dir = None;
        let json = serde_json::to_string(&semantic).expect("config serializes to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
