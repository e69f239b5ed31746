//! Run configuration: defaults, TOML files and command-line overrides, merged
//! in that order. The resolved value is written back out as the run manifest
//! and can be fed to `--config` again to replay the run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use birotate::data::{self, Dataset, Normalization, Split};
use birotate::nn::{Architecture, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <Self as clap::ValueEnum>::from_str(s, true)
    }
}

/// Separable Gaussian classification data; the test split is drawn after
/// the training split from the same stream, so both share one labelling map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub features: usize,
    pub classes: usize,
    pub margin: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_count: 200,
            test_count: 200,
            features: 10,
            classes: 3,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationConfig {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Use only the first `n` training / test samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    /// Per-channel constants; the dataset's standard values when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationConfig>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            dir: None,
            train_limit: None,
            test_limit: None,
            normalization: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `mlp:D0-...-Dk`, `cnn-small` or `resnet-toy`; chosen from the dataset
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
}

/// Informational fields the manifest carries; ignored when read back.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Provenance {
    pub tool_version: String,
    pub created_unix: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub dataset: Option<DatasetKind>,
    pub data_dir: Option<PathBuf>,
    pub architecture: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("{}: {}", origin.display(), e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
        Self::from_toml(&text, path)
    }

    /// Defaults, then the optional file, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.variant {
            self.train.variant = v;
        }
        if let Some(v) = o.dataset {
            if v != self.data.dataset {
                self.data.normalization = None;
            }
            self.data.dataset = v;
        }
        if let Some(v) = &o.data_dir {
            self.data.dir = Some(v.clone());
        }
        if let Some(v) = &o.architecture {
            self.model.architecture = Some(v.clone());
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.lr {
            self.train.lr = v;
        }
        if o.train_limit.is_some() {
            self.data.train_limit = o.train_limit;
        }
        if o.test_limit.is_some() {
            self.data.test_limit = o.test_limit;
        }
        self.provenance = None;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let s = &self.data.synthetic;
        if self.data.dataset == DatasetKind::Synthetic && (s.features == 0 || s.classes < 2 || s.train_count == 0) {
            return Err(CliError::Usage("synthetic data needs features ≥ 1, classes ≥ 2 and train_count ≥ 1".into()));
        }
        Ok(())
    }

    /// Fills every field left to a dataset-dependent default, so the
    /// manifest states exactly what ran.
    pub fn complete(&mut self) {
        let d = &mut self.data;
        if d.normalization.is_none() {
            d.normalization = match d.dataset {
                DatasetKind::Mnist => Some(Normalization::mnist()),
                DatasetKind::Cifar10 => Some(Normalization::cifar10()),
                DatasetKind::Synthetic => None,
            }
            .map(|n| NormalizationConfig { mean: n.mean, std: n.std });
        }
        if self.model.architecture.is_none() {
            let s = &d.synthetic;
            self.model.architecture = Some(match d.dataset {
                DatasetKind::Mnist => "mlp:784-256-256-10".to_string(),
                DatasetKind::Cifar10 => "cnn-small".to_string(),
                DatasetKind::Synthetic => format!("mlp:{}-128-128-{}", s.features, s.classes),
            });
        }
    }

    /// The directory holding the dataset files, checked for existence.
    fn data_dir(&self) -> Result<&Path, CliError> {
        let dir = self.data.dir.as_deref().ok_or_else(|| {
            CliError::Usage(format!(
                "--data-dir is required for --dataset {} (or set data.dir in the config file)",
                self.data.dataset
            ))
        })?;
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("--data-dir {}: no such directory", dir.display())));
        }
        Ok(dir)
    }

    /// Training and test splits after normalization and limits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset), CliError> {
        let norm = self
            .data
            .normalization
            .as_ref()
            .map(|n| Normalization { mean: n.mean.clone(), std: n.std.clone() });
        let (train, test) = match self.data.dataset {
            DatasetKind::Mnist => {
                let dir = self.data_dir()?;
                let norm = norm.unwrap_or_else(Normalization::mnist);
                (data::load_mnist(dir, Split::Train, &norm)?, data::load_mnist(dir, Split::Test, &norm)?)
            }
            DatasetKind::Cifar10 => {
                let dir = self.data_dir()?;
                let norm = norm.unwrap_or_else(Normalization::cifar10);
                (data::load_cifar10(dir, Split::Train, &norm)?, data::load_cifar10(dir, Split::Test, &norm)?)
            }
            DatasetKind::Synthetic => {
                let s = &self.data.synthetic;
                let mut all = data::synthetic_classification(s.train_count + s.test_count, s.features, s.classes, s.margin, self.train.seed)?;
                if let Some(n) = norm {
                    n.apply(&mut all)?;
                }
                split(all, s.train_count)
            }
        };
        let limit = |ds: Dataset, n: Option<usize>| match n {
            Some(n) => ds.take(n),
            None => ds,
        };
        Ok((limit(train, self.data.train_limit), limit(test, self.data.test_limit)))
    }

    pub fn architecture(&self, train: &Dataset) -> Result<Architecture, CliError> {
        let name = self
            .model
            .architecture
            .as_deref()
            .ok_or_else(|| CliError::Usage("no architecture configured".into()))?;
        Architecture::parse(name, train.shape, train.classes).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }
}

fn split(all: Dataset, at: usize) -> (Dataset, Dataset) {
    let n = all.shape.len();
    let at = at.min(all.len());
    let test = Dataset {
        images: all.images[at * n..].to_vec(),
        labels: all.labels[at..].to_vec(),
        shape: all.shape,
        classes: all.classes,
        split: Split::Test,
    };
    (all.take(at), test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[train]\nepochs = 4\nlr = 0.2\n[data]\ndataset = \"synthetic\"\n").unwrap();
        let o = Overrides {
            lr: Some(0.05),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(Some(&path), &o).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.lr, 0.05);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.data.dataset, DatasetKind::Synthetic);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = RunConfig::from_toml("[train]\nepoch = 3\n", Path::new("x.toml")).unwrap_err();
        assert!(matches!(err, CliError::Usage(ref m) if m.contains("epoch")), "{err}");
        assert!(RunConfig::from_toml("[trian]\n", Path::new("x.toml")).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.1 + 0.2;
        cfg.data.dataset = DatasetKind::Synthetic;
        cfg.complete();
        cfg.provenance = Some(Provenance {
            tool_version: "0.1.0".into(),
            created_unix: 5,
        });
        let back = RunConfig::from_toml(&cfg.to_toml(), Path::new("m")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_data_dir_names_the_flag() {
        let cfg = RunConfig::default();
        let err = cfg.load_data().unwrap_err();
        assert!(matches!(err, CliError::Usage(ref m) if m.contains("--data-dir")));
    }

    #[test]
    fn synthetic_splits_share_a_labelling() {
        let mut cfg = RunConfig::default();
        cfg.data.dataset = DatasetKind::Synthetic;
        cfg.complete();
        let (train, test) = cfg.load_data().unwrap();
        assert_eq!((train.len(), test.len()), (200, 200));
        assert_eq!(cfg.architecture(&train).unwrap().name, "mlp:10-128-128-3");
    }
}
