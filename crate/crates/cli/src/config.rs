//! Run configuration: flat `key = value` files, flag overrides and defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use malaria_core::train::TrainConfig;
use malaria_core::zoo::Architecture;

use crate::CliError;

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Default,
    File,
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Default => "default",
            Origin::File => "file",
            Origin::Flag => "flag",
        })
    }
}

/// Every knob of a run. Defaults:
///
/// | key | default |
/// |-----|---------|
/// | `model.arch` | `custom_cnn` |
/// | `model.scale` | `0.25` |
/// | `model.input_size` | `64` |
/// | `model.freeze_base` | `auto` (frozen for densenet121 and vgg19) |
/// | `train.learning_rate` | `0.001` |
/// | `train.batch_size` | `32` |
/// | `train.epochs` | `10` |
/// | `train.adam_beta1` / `adam_beta2` / `adam_eps` | `0.9` / `0.999` / `1e-8` |
/// | `train.seed` | `42` |
/// | `train.deterministic` | `true` |
/// | `data.root` | unset, falls back to `$MALARIA_DATA_DIR` |
/// | `data.synthetic` | `0` (use the corpus); `N > 0` generates N synthetic images |
/// | `data.split_seed` | `42` |
/// | `data.subset` | `1.0` (fraction of the corpus to use) |
/// | `output.dir` | `runs/latest` |
/// | `compare.architectures` | all six |
/// | `compare.parallel` | `false` |
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Architecture,
    pub scale: f64,
    pub input_size: usize,
    pub freeze_base: Option<bool>,
    pub train: TrainConfig,
    pub data_root: Option<PathBuf>,
    pub synthetic: usize,
    pub split_seed: u64,
    pub subset: f64,
    pub output_dir: PathBuf,
    pub compare_architectures: Vec<Architecture>,
    pub compare_parallel: bool,
    origins: BTreeMap<&'static str, Origin>,
}

pub const KEYS: [&str; 19] = [
    "model.arch",
    "model.scale",
    "model.input_size",
    "model.freeze_base",
    "train.learning_rate",
    "train.batch_size",
    "train.epochs",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.seed",
    "train.deterministic",
    "data.root",
    "data.synthetic",
    "data.split_seed",
    "data.subset",
    "output.dir",
    "compare.architectures",
    "compare.parallel",
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Architecture::CustomCnn,
            scale: 0.25,
            input_size: 64,
            freeze_base: None,
            train: TrainConfig::default(),
            data_root: None,
            synthetic: 0,
            split_seed: 42,
            subset: 1.0,
            output_dir: PathBuf::from("runs/latest"),
            compare_architectures: Architecture::ALL.to_vec(),
            compare_parallel: false,
            origins: KEYS.iter().map(|&k| (k, Origin::Default)).collect(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: expected {what}, got {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

impl RunConfig {
    /// Parses a config file's text; errors carry 1-based line numbers.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(None, format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::config(Some(i + 1), format!("expected `key = value`, got {line:?}"))
            })?;
            self.set(key.trim(), value.trim(), Origin::File)
                .map_err(|m| CliError::config(Some(i + 1), m))?;
        }
        Ok(())
    }

    /// Sets one key; the message names the key on failure.
    pub fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), String> {
        let canonical = KEYS
            .iter()
            .copied()
            .find(|&k| k == key)
            .ok_or_else(|| format!("unknown key {key:?}"))?;
        match canonical {
            "model.arch" => {
                self.arch = value
                    .parse()
                    .map_err(|e: malaria_core::Error| e.to_string())?
            }
            "model.scale" => {
                let s: f64 = parse(key, value, "a positive number")?;
                if !(s > 0.0 && s.is_finite()) {
                    return Err(format!("{key}: must be positive, got {value}"));
                }
                self.scale = s;
            }
            "model.input_size" => {
                let n: usize = parse(key, value, "a positive integer")?;
                if n == 0 {
                    return Err(format!("{key}: must be positive"));
                }
                self.input_size = n;
            }
            "model.freeze_base" => {
                self.freeze_base = match value {
                    "auto" => None,
                    v => Some(parse_bool(key, v)?),
                }
            }
            "train.learning_rate" => self.train.learning_rate = parse(key, value, "a number")?,
            "train.batch_size" => self.train.batch_size = parse(key, value, "a positive integer")?,
            "train.epochs" => self.train.epochs = parse(key, value, "a non-negative integer")?,
            "train.adam_beta1" => self.train.adam_beta1 = parse(key, value, "a number")?,
            "train.adam_beta2" => self.train.adam_beta2 = parse(key, value, "a number")?,
            "train.adam_eps" => self.train.adam_eps = parse(key, value, "a number")?,
            "train.seed" => self.train.seed = parse(key, value, "an unsigned integer")?,
            "train.deterministic" => self.train.deterministic = parse_bool(key, value)?,
            "data.root" => {
                self.data_root = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "data.synthetic" => self.synthetic = parse(key, value, "a non-negative integer")?,
            "data.split_seed" => self.split_seed = parse(key, value, "an unsigned integer")?,
            "data.subset" => {
                let f: f64 = parse(key, value, "a fraction")?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(format!("{key}: must lie in (0, 1], got {value}"));
                }
                self.subset = f;
            }
            "output.dir" => self.output_dir = PathBuf::from(value),
            "compare.architectures" => {
                let archs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<Architecture>().map_err(|e| e.to_string()))
                    .collect::<Result<Vec<_>, _>>()?;
                if archs.is_empty() {
                    return Err(format!("{key}: needs at least one architecture"));
                }
                self.compare_architectures = archs;
            }
            "compare.parallel" => self.compare_parallel = parse_bool(key, value)?,
            _ => unreachable!("every key in KEYS is handled"),
        }
        self.origins.insert(canonical, origin);
        Ok(())
    }

    pub fn origin(&self, key: &str) -> Origin {
        self.origins.get(key).copied().unwrap_or(Origin::Default)
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train
            .validate()
            .map_err(|e| CliError::config(None, e.to_string()))?;
        if self.synthetic > 0 && (!self.synthetic.is_multiple_of(2) || self.synthetic < 10) {
            return Err(CliError::config(
                None,
                format!(
                    "data.synthetic must be an even number of at least 10, got {}",
                    self.synthetic
                ),
            ));
        }
        if self.synthetic > 0 && self.input_size < 16 {
            return Err(CliError::config(
                None,
                "synthetic images need model.input_size >= 16",
            ));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_size, self.input_size, 3]
    }

    /// The resolved value of `key` as it would be written in a config file.
    pub fn value(&self, key: &str) -> String {
        match key {
            "model.arch" => self.arch.id().to_string(),
            "model.scale" => self.scale.to_string(),
            "model.input_size" => self.input_size.to_string(),
            "model.freeze_base" => self
                .freeze_base
                .map_or("auto".to_string(), |b| b.to_string()),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.adam_beta1" => self.train.adam_beta1.to_string(),
            "train.adam_beta2" => self.train.adam_beta2.to_string(),
            "train.adam_eps" => self.train.adam_eps.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.deterministic" => self.train.deterministic.to_string(),
            "data.root" => self
                .data_root
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
            "data.synthetic" => self.synthetic.to_string(),
            "data.split_seed" => self.split_seed.to_string(),
            "data.subset" => self.subset.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            "compare.architectures" => self
                .compare_architectures
                .iter()
                .map(|a| a.id())
                .collect::<Vec<_>>()
                .join(","),
            "compare.parallel" => self.compare_parallel.to_string(),
            _ => String::new(),
        }
    }

    /// Every key with its resolved value and origin, in a fixed order.
    pub fn resolved(&self) -> Vec<(&'static str, String, Origin)> {
        KEYS.iter()
            .map(|&k| (k, self.value(k), self.origin(k)))
            .collect()
    }
}
