//! Experiment configuration: one TOML document per experiment, fully
//! validated before any compute runs. Unknown keys are rejected and
//! semantic failures name the offending field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binarize::ActivationKind;
use crate::network::{LayerSpec, NetworkError, NetworkSpec, PrecisionAssignment};
use crate::search::SearchConfig;
use crate::seed::derive;
use crate::train::{load_idx, synth_bundle, DataBundle, IdxSource, SynthStyle, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {detail}")]
    Invalid { field: String, detail: String },
}

impl ConfigError {
    pub(crate) fn invalid(field: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Self::Invalid {
            field: field.into(),
            detail: detail.to_string(),
        }
    }
}

fn default_kernel() -> [usize; 2] {
    [3, 3]
}

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_activation() -> ActivationKind {
    ActivationKind::BinReLU
}

fn default_val_fraction() -> f64 {
    0.1
}

/// One conv layer as written in the config; channel counts compose from the
/// previous layer, so only the output side is spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub c_out: usize,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 2],
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "default_true")]
    pub batchnorm: bool,
    /// Falls back to the network-level activation.
    #[serde(default)]
    pub activation: Option<ActivationKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    pub stem: LayerConfig,
    pub hidden: Vec<LayerConfig>,
}

impl NetworkConfig {
    pub fn build(&self) -> Result<NetworkSpec, NetworkError> {
        let layer = |cfg: &LayerConfig, index: usize, c_in: usize| {
            LayerSpec::conv(
                index,
                c_in,
                cfg.c_out,
                (cfg.kernel[0], cfg.kernel[1]),
                cfg.stride,
                cfg.padding,
                cfg.batchnorm,
                cfg.activation.unwrap_or(self.activation),
            )
        };
        let stem = layer(&self.stem, 0, self.input_shape[0]);
        let mut c_in = self.stem.c_out;
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for (i, cfg) in self.hidden.iter().enumerate() {
            hidden.push(layer(cfg, i + 1, c_in));
            c_in = cfg.c_out;
        }
        NetworkSpec::build(self.input_shape, self.num_classes, stem, hidden)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSourceKind {
    Synthetic,
    Idx,
}

/// Data section: either synthetic rendering parameters or IDX file paths.
/// Kept flat (with a `source` discriminator) so unknown keys stay rejected
/// and error messages can name exact fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSourceKind,

    // synthetic
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    /// Per-class image counts for train/val/test.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default)]
    pub style: SynthStyle,

    // idx
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.source {
            DataSourceKind::Synthetic => {
                for (name, missing) in [
                    ("data.num_classes", self.num_classes.is_none()),
                    ("data.per_class", self.per_class.is_none()),
                    ("data.shape", self.shape.is_none()),
                ] {
                    if missing {
                        return Err(ConfigError::invalid(
                            name,
                            "required when source = \"synthetic\"",
                        ));
                    }
                }
            }
            DataSourceKind::Idx => {
                for (name, missing) in [
                    ("data.train_images", self.train_images.is_none()),
                    ("data.train_labels", self.train_labels.is_none()),
                ] {
                    if missing {
                        return Err(ConfigError::invalid(
                            name,
                            "required when source = \"idx\"",
                        ));
                    }
                }
                if !(0.0..1.0).contains(&self.val_fraction) {
                    return Err(ConfigError::invalid(
                        "data.val_fraction",
                        format!("must be in [0, 1), got {}", self.val_fraction),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Materializes the bundle; `seed` should already be the data substream.
    pub fn load(&self, seed: u64) -> Result<DataBundle, TrainError> {
        match self.source {
            DataSourceKind::Synthetic => synth_bundle(
                self.num_classes.expect("validated"),
                self.per_class.expect("validated"),
                self.shape.expect("validated"),
                seed,
                &self.style,
            ),
            DataSourceKind::Idx => load_idx(
                &IdxSource {
                    train_images: self.train_images.clone().expect("validated"),
                    train_labels: self.train_labels.clone().expect("validated"),
                    test_images: self.test_images.clone(),
                    test_labels: self.test_labels.clone(),
                    val_fraction: self.val_fraction,
                },
                seed,
            ),
        }
    }
}

/// The whole experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Hidden layers to binarize for train/eval/flops runs.
    #[serde(default)]
    pub assignment: Vec<usize>,
    pub network: NetworkConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchConfig>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Full semantic validation; runs before any compute.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let net = self
            .network
            .build()
            .map_err(|e| ConfigError::invalid("network", e))?;
        PrecisionAssignment::from_indices(self.assignment.iter().copied(), &net)
            .map_err(|e| ConfigError::invalid("assignment", e))?;
        self.data.validate()?;
        if self.data.source == DataSourceKind::Synthetic {
            if let Some(classes) = self.data.num_classes {
                if classes != self.network.num_classes {
                    return Err(ConfigError::invalid(
                        "data.num_classes",
                        format!(
                            "{} classes but network.num_classes is {}",
                            classes, self.network.num_classes
                        ),
                    ));
                }
            }
            if let Some(shape) = self.data.shape {
                if shape != self.network.input_shape {
                    return Err(ConfigError::invalid(
                        "data.shape",
                        format!(
                            "{:?} but network.input_shape is {:?}",
                            shape, self.network.input_shape
                        ),
                    ));
                }
            }
        }
        self.train.validate().map_err(|e| match e {
            TrainError::BadConfig { field, detail } => {
                ConfigError::invalid(format!("train.{field}"), detail)
            }
            other => ConfigError::invalid("train", other),
        })?;
        if let Some(search) = &self.search {
            search.validate().map_err(|e| match e {
                crate::search::SearchError::BadConfig { field, detail } => {
                    ConfigError::invalid(format!("search.{field}"), detail)
                }
                other => ConfigError::invalid("search", other),
            })?;
        }
        Ok(())
    }

    pub fn build_network(&self) -> Result<NetworkSpec, ConfigError> {
        self.network
            .build()
            .map_err(|e| ConfigError::invalid("network", e))
    }

    pub fn build_assignment(&self, net: &NetworkSpec) -> Result<PrecisionAssignment, ConfigError> {
        PrecisionAssignment::from_indices(self.assignment.iter().copied(), net)
            .map_err(|e| ConfigError::invalid("assignment", e))
    }

    /// Data substream seed; all commands load data through this.
    pub fn data_seed(&self) -> u64 {
        derive(self.seed, "data")
    }

    /// Train substream: the `[train]` section with its seed pinned to the
    /// experiment seed.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive(self.seed, "train"),
            ..self.train.clone()
        }
    }

    /// Search substreams: section seeds pinned to the experiment seed.
    pub fn effective_search(&self) -> Option<SearchConfig> {
        self.search.as_ref().map(|s| SearchConfig {
            seed: derive(self.seed, "search"),
            proxy: TrainConfig {
                seed: derive(self.seed, "search.proxy"),
                ..s.proxy.clone()
            },
            final_cfg: TrainConfig {
                seed: derive(self.seed, "search.final"),
                ..s.final_cfg.clone()
            },
            ..s.clone()
        })
    }

    /// Hash of the effective config: canonical field order, so reordering
    /// keys in the document does not change it, while any value change does.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
