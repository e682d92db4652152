//! TOML configuration. Relative paths resolve against the directory holding
//! the config file (or the working directory when there is no file).

use std::fs;
use std::path::{Path, PathBuf};

use diag_core::cohort::SyntheticConfig;
use diag_core::embed::TsneParams;
use diag_core::fusion::{BaselineConfig, WeightLearningConfig};
use diag_core::models::{BoostGrid, BoostParams, ImageGrid, ImageParams, TextGrid, TextParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_FILE: &str = "diag-assistant.toml";
pub const DEFAULT_BIND: &str = "127.0.0.1:8750";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data_dir: PathBuf,
    pub artifact_dir: PathBuf,
    pub state_dir: PathBuf,
    pub bind: String,
    pub synthetic: SyntheticConfig,
    pub training: TrainingConfig,
    pub tsne: TsneParams,
    pub explain: ExplainSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            artifact_dir: "artifacts".into(),
            state_dir: "state".into(),
            bind: DEFAULT_BIND.into(),
            synthetic: SyntheticConfig::default(),
            training: TrainingConfig::default(),
            tsne: TsneParams::default(),
            explain: ExplainSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub indicator: BoostParams,
    pub text: TextParams,
    pub image: ImageParams,
    pub weights: WeightLearningConfig,
    pub baseline: BaselineConfig,
    /// Optional per-modality grid search on the training split; when a grid
    /// is given its best point replaces the corresponding params above.
    pub grid: Option<GridSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    #[serde(default = "default_folds")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    pub indicator: Option<BoostGrid>,
    pub text: Option<TextGrid>,
    pub image: Option<ImageGrid>,
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSettings {
    pub shapley_samples: usize,
    /// Background rows drawn from the training split.
    pub background_rows: usize,
    pub seed: u64,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            shapley_samples: 2000,
            background_rows: 100,
            seed: 0,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` and resolves its relative directories against the
    /// file's parent.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        Ok(cfg.rooted_at(base))
    }

    /// Uses `dir/diag-assistant.toml` when present, defaults otherwise.
    pub fn discover(dir: &Path) -> Result<Self, ConfigError> {
        let path = dir.join(CONFIG_FILE);
        if path.is_file() {
            Self::load(&path)
        } else {
            Ok(Self::default().rooted_at(dir))
        }
    }

    pub fn rooted_at(mut self, base: &Path) -> Self {
        for p in [
            &mut self.data_dir,
            &mut self.artifact_dir,
            &mut self.state_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.bind.parse::<std::net::SocketAddr>().is_err() {
            return Err(ConfigError::Invalid(format!(
                "bind {:?} is not host:port",
                self.bind
            )));
        }
        if self.explain.background_rows == 0 {
            return Err(ConfigError::Invalid(
                "explain.background_rows must be positive".into(),
            ));
        }
        if self.explain.shapley_samples < diag_core::explain::MIN_SAMPLES {
            return Err(ConfigError::Invalid(format!(
                "explain.shapley_samples must be at least {}",
                diag_core::explain::MIN_SAMPLES
            )));
        }
        if let Some(g) = &self.training.grid {
            if g.k < 2 {
                return Err(ConfigError::Invalid(
                    "training.grid.k must be at least 2".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("", "t").unwrap(), Config::default());
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = Config::from_toml(
            "bind = \"0.0.0.0:9000\"\n[synthetic]\nn_patients = 90\n[training.image]\nmax_epochs = 3\n",
            "t",
        )
        .unwrap();
        assert_eq!(cfg.synthetic.n_patients, 90);
        assert_eq!(cfg.synthetic.seed, 42);
        assert_eq!(cfg.training.image.max_epochs, 3);
        assert_eq!(
            cfg.training.image.learning_rate,
            ImageParams::default().learning_rate
        );
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            Config::from_toml("prot = 3", "t"),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(
            Config::from_toml("bind = \"nope\"", "t"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::from_toml("[explain]\nshapley_samples = 5", "t"),
            Err(ConfigError::Invalid(_))
        ));
        for nested in [
            "[synthetic]\nn_patient = 90",
            "[training.text]\nepochs = 3",
            "[training.image.shape]\nconv3 = 4",
            "[tsne]\nperplexit = 5.0",
            "[training.weights]\nsteps = 1",
        ] {
            assert!(
                matches!(
                    Config::from_toml(nested, "t"),
                    Err(ConfigError::Parse { .. })
                ),
                "{nested}"
            );
        }
    }

    #[test]
    fn grid_tables_parse() {
        let cfg = Config::from_toml(
            "[training.grid]\nk = 3\n[training.grid.image]\nlearning_rate = [0.01, 0.001]\n[training.grid.image.base]\nmax_epochs = 2\n",
            "t",
        )
        .unwrap();
        let g = cfg.training.grid.unwrap();
        assert_eq!(g.k, 3);
        assert_eq!(g.image.unwrap().base.max_epochs, 2);
        assert!(Config::from_toml(
            "[training.grid.image]\nlearning_rate = [0.1]\nbase = {}\nrate = 1",
            "t"
        )
        .is_err());
    }

    #[test]
    fn relative_dirs_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.toml");
        fs::write(&path, "data_dir = \"d\"\nstate_dir = \"/abs/state\"\n").unwrap();
        let cfg = Config::load(&path).unwrap();
        assert_eq!(cfg.data_dir, dir.path().join("d"));
        assert_eq!(cfg.artifact_dir, dir.path().join("artifacts"));
        assert_eq!(cfg.state_dir, PathBuf::from("/abs/state"));
    }
}
