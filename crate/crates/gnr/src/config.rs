//! Run configuration: a flat "key = value" file, command-line overrides,
//! and a GNR_SEED environment override for the seed.
//!
//! Values layer in order: built-in defaults, then the config file, then the
//! GNR_SEED environment variable, then explicit "--key value" overrides.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::search::Normalization;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected \"key = value\"")]
    BadLine { path: String, line: usize },
    #[error("unknown configuration key {key:?}")]
    UnknownKey { key: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every knob of a run. Defaults reproduce the reference training regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Model.
    pub depth: usize,
    pub hidden: usize,
    pub word_dim: usize,
    pub dropout_recurrent: f64,
    pub dropout_fc: f64,
    pub noise_sigma: f64,
    // Optimizer.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    // Search.
    pub beam_width: usize,
    pub normalization: Normalization,
    // Augmentation.
    pub augment_count: usize,
    pub kb: Option<PathBuf>,
    // Paths.
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    // Stopping rule.
    pub max_epochs: usize,
    pub patience: usize,
    // Seeding.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            hidden: 200,
            word_dim: 300,
            dropout_recurrent: 0.3,
            dropout_fc: 0.4,
            noise_sigma: 1e-6,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            beam_width: 32,
            normalization: Normalization::Global,
            augment_count: 10_000,
            kb: None,
            train: None,
            dev: None,
            vectors: None,
            checkpoint_dir: PathBuf::from("run"),
            max_epochs: 50,
            patience: 5,
            seed: 42,
        }
    }
}

fn bad_value(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad_value(key, value, e))
}

impl RunConfig {
    /// Set one key from its text value. Unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "depth" => self.depth = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "word_dim" => self.word_dim = parse_num(key, value)?,
            "dropout_recurrent" => self.dropout_recurrent = parse_num(key, value)?,
            "dropout_fc" => self.dropout_fc = parse_num(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "beam_width" => self.beam_width = parse_num(key, value)?,
            "normalization" => {
                self.normalization = value.parse().map_err(|e| bad_value(key, value, e))?
            }
            "augment_count" => self.augment_count = parse_num(key, value)?,
            "kb" => self.kb = Some(PathBuf::from(value)),
            "train" => self.train = Some(PathBuf::from(value)),
            "dev" => self.dev = Some(PathBuf::from(value)),
            "vectors" => self.vectors = Some(PathBuf::from(value)),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Check cross-field invariants after all sources have been applied.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("hidden", self.hidden),
            ("word_dim", self.word_dim),
            ("batch_size", self.batch_size),
            ("beam_width", self.beam_width),
            ("max_epochs", self.max_epochs),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(bad_value(key, "0", "must be at least 1"));
            }
        }
        for (key, v) in [
            ("dropout_recurrent", self.dropout_recurrent),
            ("dropout_fc", self.dropout_fc),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad_value(key, &v.to_string(), "must lie in [0, 1)"));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(bad_value(
                "noise_sigma",
                &self.noise_sigma.to_string(),
                "must be non-negative",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(bad_value(
                "learning_rate",
                &self.learning_rate.to_string(),
                "must be positive",
            ));
        }
        Ok(())
    }

    /// Serialize every field as "key = value" lines (omitting unset paths)
    /// in a fixed order, so an effective config can be reloaded exactly.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("depth", self.depth.to_string());
        line("hidden", self.hidden.to_string());
        line("word_dim", self.word_dim.to_string());
        line("dropout_recurrent", self.dropout_recurrent.to_string());
        line("dropout_fc", self.dropout_fc.to_string());
        line("noise_sigma", self.noise_sigma.to_string());
        line("learning_rate", self.learning_rate.to_string());
        line("beta1", self.beta1.to_string());
        line("beta2", self.beta2.to_string());
        line("epsilon", self.epsilon.to_string());
        line("batch_size", self.batch_size.to_string());
        line("beam_width", self.beam_width.to_string());
        line("normalization", self.normalization.to_string());
        line("augment_count", self.augment_count.to_string());
        for (key, path) in [
            ("kb", &self.kb),
            ("train", &self.train),
            ("dev", &self.dev),
            ("vectors", &self.vectors),
        ] {
            if let Some(p) = path {
                line(key, p.display().to_string());
            }
        }
        line("checkpoint_dir", self.checkpoint_dir.display().to_string());
        line("max_epochs", self.max_epochs.to_string());
        line("patience", self.patience.to_string());
        line("seed", self.seed.to_string());
        out
    }
}

/// Parse "key = value" lines. Blank lines and '#' comments are skipped.
fn apply_file(config: &mut RunConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::BadLine {
                path: path.display().to_string(),
                line: idx + 1,
            });
        };
        config.apply(key.trim(), value.trim())?;
    }
    Ok(())
}

/// Layer defaults, an optional file, an explicit seed (normally the GNR_SEED
/// environment variable), and command-line overrides, in that order.
pub fn load_with(
    file: Option<&Path>,
    env_seed: Option<&str>,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = file {
        apply_file(&mut config, path)?;
    }
    if let Some(seed) = env_seed {
        config.apply("seed", seed)?;
    }
    for (key, value) in overrides {
        config.apply(key, value)?;
    }
    config.validate()?;
    Ok(config)
}

/// [`load_with`], reading the seed override from the real GNR_SEED variable.
pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let env_seed = std::env::var("GNR_SEED").ok();
    load_with(file, env_seed.as_deref(), overrides)
}
