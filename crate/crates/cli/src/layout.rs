//! Artifact paths under the `--out` directory.

use std::path::{Path, PathBuf};

use mint_core::audit::REGISTRY_FILE;
use mint_core::data::{DATASET_IMAGES, DATASET_MANIFEST};
use mint_core::harness::ReportFormat;

use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.data_dir().join(DATASET_MANIFEST)
    }

    pub fn dataset_images(&self) -> PathBuf {
        self.data_dir().join(DATASET_IMAGES)
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn model_checkpoint(&self) -> PathBuf {
        self.model_dir().join("audited.mintnn")
    }

    pub fn model_sidecar(&self) -> PathBuf {
        self.model_dir().join("audited.json")
    }

    pub fn model_metrics(&self) -> PathBuf {
        self.model_dir().join("metrics.json")
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn features_index(&self) -> PathBuf {
        self.features_dir().join(mint_core::cache::STORE_INDEX)
    }

    /// Features of a never-trained model over zero-offset data.
    pub fn control_dir(&self) -> PathBuf {
        self.features_dir().join("untrained-control")
    }

    pub fn mint_dir(&self) -> PathBuf {
        self.root.join("mint")
    }

    pub fn registry(&self) -> PathBuf {
        self.mint_dir().join(REGISTRY_FILE)
    }

    pub fn mint_metrics(&self) -> PathBuf {
        self.mint_dir().join("metrics.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, run_id: &str, format: ReportFormat) -> PathBuf {
        self.reports_dir().join(format!("{run_id}.{}", format.extension()))
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join(RESOLVED_CONFIG)
    }
}

/// Fails with exit status 2 naming `path` when it does not exist.
pub fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}
