//! Run configuration files.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gaussian_classes, load_cifar10, pattern_images, Dataset, Split, CIFAR_MEAN, CIFAR_STD};
use crate::error::{Error, Result};
use crate::lookup::{ScaleMode, SteRule};
use crate::lut::{TableMode, DEFAULT_GRANULARITY};
use crate::nn::{ArchSpec, LookupSettings};
use crate::tensor::Scalar;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// One of the names accepted by [`ArchSpec::by_name`].
    pub arch: String,
}

/// Lookup-layer strategy toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub n_f: usize,
    pub n_w: usize,
    pub table: TableMode,
    pub exponential_scales: bool,
    pub grad_rescale: bool,
    pub ste: SteRule,
    pub index_domain_residual: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::from_settings(&LookupSettings::default())
    }
}

impl StrategyConfig {
    pub fn from_settings(s: &LookupSettings) -> Self {
        Self {
            n_f: s.n_f,
            n_w: s.n_w,
            table: s.table,
            exponential_scales: s.scale_mode == ScaleMode::Exponential,
            grad_rescale: s.rescale,
            ste: s.ste,
            index_domain_residual: s.index_domain_residual,
        }
    }

    pub fn settings(&self) -> LookupSettings {
        LookupSettings {
            n_f: self.n_f,
            n_w: self.n_w,
            table: self.table,
            scale_mode: if self.exponential_scales { ScaleMode::Exponential } else { ScaleMode::Direct },
            ste: self.ste,
            rescale: self.grad_rescale,
            index_domain_residual: self.index_domain_residual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Cifar10Binary,
    SyntheticGaussianClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory of the binary CIFAR-10 distribution.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Per-channel normalization; CIFAR statistics when absent.
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    #[serde(default)]
    pub std: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Cluster separation or pattern noise of synthetic sets.
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_classes() -> usize {
    10
}

fn default_true() -> bool {
    true
}

fn default_spread() -> f64 {
    2.0
}

/// Disjoint train and test sets.
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

impl DataConfig {
    /// Loads or generates the data for inputs of shape `input`. Synthetic
    /// sets are drawn from `seed`.
    pub fn load<T: Scalar>(&self, input: [usize; 3], seed: u64) -> Result<Splits<T>> {
        let mut splits = match self.source {
            DataSource::Cifar10Binary => {
                let dir = self
                    .path
                    .as_deref()
                    .ok_or_else(|| Error::Config("data.path is required for cifar10-binary".into()))?;
                Splits {
                    train: load_cifar10::<T>(dir, Split::Train)?.take(self.train_size),
                    test: load_cifar10::<T>(dir, Split::Test)?.take(self.test_size),
                }
            }
            DataSource::SyntheticGaussianClasses => {
                let total = self.train_size + self.test_size;
                let per_class = total.div_ceil(self.classes.max(1));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let all: Dataset<T> = if input[1] == 1 && input[2] == 1 {
                    gaussian_classes(self.classes, per_class, input[0], self.spread, &mut rng)?
                } else {
                    pattern_images(self.classes, per_class, input, self.spread, &mut rng)?
                };
                let train: Vec<usize> = (0..self.train_size).collect();
                let test: Vec<usize> = (self.train_size..total).collect();
                Splits { train: all.select(&train), test: all.select(&test) }
            }
        };
        if self.normalize {
            let c = input[0];
            let (mean, std) = match (&self.mean, &self.std, self.source) {
                (Some(m), Some(s), _) => (m.clone(), s.clone()),
                (None, None, DataSource::Cifar10Binary) => (CIFAR_MEAN.to_vec(), CIFAR_STD.to_vec()),
                (None, None, DataSource::SyntheticGaussianClasses) => return Ok(splits),
                _ => return Err(Error::Config("data.mean and data.std must be given together".into())),
            };
            if mean.len() != c {
                return Err(Error::Config(format!("normalization has {} channels, input has {c}", mean.len())));
            }
            splits.train.normalize(&mean, &std)?;
            splits.test.normalize(&mean, &std)?;
        }
        Ok(splits)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.settings().validate()?;
        self.arch()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        ArchSpec::by_name(&self.model.arch, self.data.classes, &self.strategy.settings())
    }

    /// The same run with the strategy of an ablation variant.
    pub fn with_variant(&self, v: Variant) -> Self {
        let mut c = self.clone();
        c.strategy = StrategyConfig { ste: self.strategy.ste, index_domain_residual: self.strategy.index_domain_residual, ..v.strategy() };
        c
    }
}

/// Ablation variants of the lookup network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Frozen tables.
    Model1,
    /// Independent table entries, random initialization.
    Model2,
    /// Independent table entries, ramp initialization.
    Model3,
    /// Granularity 17.
    Model4,
    /// Granularity 65.
    Model5,
    /// Direct scales, no gradient re-scaling.
    Model6,
    /// Exponential scales, no gradient re-scaling.
    Model7,
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Model1,
        Variant::Model2,
        Variant::Model3,
        Variant::Model4,
        Variant::Model5,
        Variant::Model6,
        Variant::Model7,
        Variant::Ours,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Model1 => "model-1",
            Variant::Model2 => "model-2",
            Variant::Model3 => "model-3",
            Variant::Model4 => "model-4",
            Variant::Model5 => "model-5",
            Variant::Model6 => "model-6",
            Variant::Model7 => "model-7",
            Variant::Ours => "ours",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    pub fn strategy(self) -> StrategyConfig {
        let base = StrategyConfig::default();
        let g = DEFAULT_GRANULARITY;
        let (table, n, exp, rescale) = match self {
            Variant::Model1 => (TableMode::Fixed, g, true, false),
            Variant::Model2 => (TableMode::IndependentRandom, g, true, true),
            Variant::Model3 => (TableMode::IndependentStep, g, true, true),
            Variant::Model4 => (TableMode::Cumulative, 17, true, true),
            Variant::Model5 => (TableMode::Cumulative, 65, true, true),
            Variant::Model6 => (TableMode::Cumulative, g, false, false),
            Variant::Model7 => (TableMode::Cumulative, g, true, false),
            Variant::Ours => (TableMode::Cumulative, g, true, true),
        };
        StrategyConfig { n_f: n, n_w: n, table, exponential_scales: exp, grad_rescale: rescale, ..base }
    }
}
