//! Pipeline configuration: JSON file merged under command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use mint_core::aad::{AuditableDataKind, FeatureOptions};
use mint_core::audited::{TapConfig, DEFAULT_CHANNELS, DEFAULT_EMBEDDING_DIM};
use mint_core::classifier::{default_mint_train_config, MintArchitecture, DEFAULT_THRESHOLD};
use mint_core::data::{Preprocess, SyntheticDataConfig};
use mint_core::harness::ExperimentGrid;
use nnkit::{RandomStream, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Image directories used instead of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    /// Member images; the first path component names the class.
    pub members_dir: PathBuf,
    pub externals_dir: PathBuf,
    #[serde(default)]
    pub preprocess: Preprocess,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditedConfig {
    pub channels: [usize; 4],
    pub embedding_dim: usize,
    pub train: TrainConfig,
}

impl Default for AuditedConfig {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            train: TrainConfig::default(),
        }
    }
}

/// Registry classifiers built by `train-mint`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MintConfig {
    pub train_size: usize,
    pub kinds: Vec<AuditableDataKind>,
    pub architectures: Vec<MintArchitecture>,
    pub train: TrainConfig,
    pub threshold: f64,
}

impl Default for MintConfig {
    fn default() -> Self {
        Self {
            train_size: 1000,
            kinds: AuditableDataKind::TABLE_ORDER.to_vec(),
            architectures: vec![MintArchitecture::Vanilla, MintArchitecture::Cnn],
            train: default_mint_train_config(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub bind: String,
    pub max_concurrent: usize,
    pub max_upload_bytes: usize,
    pub retain_uploads: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            max_concurrent: 4,
            max_upload_bytes: 8 << 20,
            retain_uploads: None,
        }
    }
}

/// Every setting of the pipeline. All seeds derive from `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: SyntheticDataConfig,
    pub ingest: Option<IngestConfig>,
    pub audited: AuditedConfig,
    pub taps: TapConfig,
    pub features: FeatureOptions,
    pub mint: MintConfig,
    pub grid: ExperimentGrid,
    pub serve: ServeConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Writes the derived seeds into every section.
    pub fn resolve_seeds(&mut self) {
        let root = RandomStream::new(self.seed);
        self.data.seed = self.seed;
        self.audited.train.seed = root.derive_named("audited-train").key();
        self.mint.train.seed = root.derive_named("mint-train").key();
        self.grid.seed = root.derive_named("grid").key();
        self.grid.feature_options = self.features;
    }

    pub fn audited_init_seed(&self) -> u64 {
        RandomStream::new(self.seed).derive_named("audited-init").key()
    }

    pub fn control_model_seed(&self) -> u64 {
        RandomStream::new(self.seed).derive_named("control-model").key()
    }

    pub fn mint_split_seed(&self) -> u64 {
        RandomStream::new(self.seed).derive_named("mint-split").key()
    }

    pub fn preprocess(&self) -> Preprocess {
        match &self.ingest {
            Some(i) => i.preprocess,
            None => Preprocess {
                size: self.data.image_size,
                channels: self.data.channels,
            },
        }
    }
}
