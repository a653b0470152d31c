//! Audit registry and membership reports for single queried images.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aad::{AuditableDataKind, FeatureForm};
use crate::audited::{AuditedModel, TapConfig};
use crate::classifier::{MintArchitecture, MintClassifier};
use crate::data::{decode_image, hex, Partition, Preprocess};
use crate::{MintError, Result};

pub const REGISTRY_FILE: &str = "registry.json";
pub const REGISTRY_VERSION: u32 = 1;
pub const DISCLAIMER: &str = "Scores are statistical membership evidence produced by classifiers with limited \
accuracy. They are not proof that the image was or was not part of any model's training data.";

/// One audited model with its classifiers, as listed in `registry.json`.
/// Paths are relative to the registry file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryModelEntry {
    pub model_id: String,
    pub checkpoint: PathBuf,
    pub sidecar: PathBuf,
    pub taps: TapConfig,
    pub classifiers: Vec<RegistryClassifierEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryClassifierEntry {
    pub auditable_data: AuditableDataKind,
    pub architecture: MintArchitecture,
    pub checkpoint: PathBuf,
    pub sidecar: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub version: u32,
    pub models: Vec<RegistryModelEntry>,
}

#[derive(Clone, Debug)]
pub struct RegistryEntry {
    pub model_id: String,
    pub model: AuditedModel,
    pub taps: TapConfig,
    pub classifiers: Vec<MintClassifier>,
}

/// Validated, read-only set of audited models and trained classifiers.
#[derive(Clone, Debug)]
pub struct AuditRegistry {
    entries: Vec<RegistryEntry>,
}

/// Length or shape a classifier must expect for `kind` on `model`.
pub fn expected_feature_shape(model: &AuditedModel, kind: AuditableDataKind, form: FeatureForm) -> Result<Vec<usize>> {
    let channels = model.channels();
    match (form, kind) {
        (FeatureForm::Vector, AuditableDataKind::ConvLayer(k)) => Ok(vec![channels[k as usize - 1]]),
        (FeatureForm::Vector, AuditableDataKind::AllConvLayers) => Ok(vec![channels.iter().sum()]),
        (FeatureForm::Vector, AuditableDataKind::ModelOutcome) => Ok(vec![model.embedding_dim()]),
        (FeatureForm::Maps, AuditableDataKind::ConvLayer(_)) => Ok(model.tap_shape(kind.required_taps()[0])),
        (FeatureForm::Maps, _) => Err(MintError::FeatureKind(format!("{kind} has no map form"))),
    }
}

impl AuditRegistry {
    /// Cross-checks every classifier against its audited model.
    pub fn new(entries: Vec<RegistryEntry>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for e in &entries {
            if !ids.insert(e.model_id.as_str()) {
                return Err(MintError::Config(format!("duplicate model id {}", e.model_id)));
            }
            if e.model.has_class_head() {
                return Err(MintError::Config(format!(
                    "model {}: class head must be detached before auditing",
                    e.model_id
                )));
            }
            if e.classifiers.is_empty() {
                return Err(MintError::Config(format!("model {} has no classifiers", e.model_id)));
            }
            let mut seen = BTreeSet::new();
            for c in &e.classifiers {
                let what = format!("model {} classifier {} {}", e.model_id, c.architecture(), c.kind());
                if !seen.insert((c.architecture(), c.kind())) {
                    return Err(MintError::Config(format!("{what} is listed twice")));
                }
                if !c.is_trained() {
                    return Err(MintError::Config(format!("{what} is untrained")));
                }
                for tap in c.kind().required_taps() {
                    if !e.taps.contains(tap) {
                        return Err(MintError::Config(format!("{what} needs tap {tap}, which is not enabled")));
                    }
                }
                let expected = expected_feature_shape(&e.model, c.kind(), c.form())?;
                if c.expected_shape() != expected {
                    return Err(MintError::Config(format!(
                        "{what} expects {:?} but the model yields {expected:?}",
                        c.expected_shape()
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn model_count(&self) -> usize {
        self.entries.len()
    }

    /// Every (model, auditable data, architecture) configuration.
    pub fn configurations(&self) -> Vec<ConfigurationInfo> {
        self.entries
            .iter()
            .flat_map(|e| {
                e.classifiers.iter().map(|c| ConfigurationInfo {
                    model_id: e.model_id.clone(),
                    auditable_data: c.kind(),
                    architecture: c.architecture(),
                    input_spec: *e.model.preprocess(),
                })
            })
            .collect()
    }

    /// Loads `registry.json` and every artifact it names. Errors name the
    /// offending entry.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let artifact = |p: &Path, reason: String| MintError::Artifact {
            path: p.to_path_buf(),
            reason,
        };
        let text = fs::read(path).map_err(|e| artifact(path, e.to_string()))?;
        let manifest: RegistryManifest = serde_json::from_slice(&text).map_err(|e| artifact(path, e.to_string()))?;
        if manifest.version != REGISTRY_VERSION {
            return Err(artifact(path, format!("unsupported registry version {}", manifest.version)));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::with_capacity(manifest.models.len());
        for m in &manifest.models {
            let model = AuditedModel::load(base.join(&m.checkpoint), base.join(&m.sidecar))?;
            let model = model.detach_head()?;
            let classifiers = m
                .classifiers
                .iter()
                .map(|c| {
                    let clf = MintClassifier::load(base.join(&c.checkpoint), base.join(&c.sidecar))?;
                    if clf.kind() != c.auditable_data || clf.architecture() != c.architecture {
                        return Err(artifact(
                            &base.join(&c.sidecar),
                            format!(
                                "sidecar describes {} {}, registry lists {} {}",
                                clf.architecture(),
                                clf.kind(),
                                c.architecture,
                                c.auditable_data
                            ),
                        ));
                    }
                    Ok(clf)
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push(RegistryEntry {
                model_id: m.model_id.clone(),
                model,
                taps: m.taps.clone(),
                classifiers,
            });
        }
        Self::new(entries).map_err(|e| artifact(path, e.to_string()))
    }
}

pub fn save_registry_manifest(manifest: &RegistryManifest, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

/// One entry of `GET /api/models`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationInfo {
    pub model_id: String,
    pub auditable_data: AuditableDataKind,
    pub architecture: MintArchitecture,
    pub input_spec: Preprocess,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub model_id: String,
    pub auditable_data: AuditableDataKind,
    pub architecture: MintArchitecture,
    pub score: f64,
    pub decision: Partition,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedConfig {
    pub model_id: String,
    pub auditable_data: Option<AuditableDataKind>,
    pub architecture: Option<MintArchitecture>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    pub sample_id: String,
    pub per_config: Vec<ConfigScore>,
    /// Arithmetic mean of the per-config scores.
    pub aggregate_likelihood: f64,
    pub disclaimer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<FailedConfig>,
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("image could not be decoded: {0}")]
    Undecodable(String),
    #[error("no configuration produced a score: {}", summarize(.0))]
    NoScores(Vec<FailedConfig>),
}

fn summarize(failed: &[FailedConfig]) -> String {
    failed
        .iter()
        .map(|f| format!("{}: {}", f.model_id, f.reason))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Stable id for an uploaded image: a prefix of its SHA-256.
pub fn upload_id(bytes: &[u8]) -> String {
    format!("upload-{}", &hex(&Sha256::digest(bytes))[..16])
}

/// Scores an encoded image against every configuration of the registry (or
/// of `model_id` only). One forward pass per audited model.
pub fn audit_sample(
    registry: &AuditRegistry,
    image: &[u8],
    model_id: Option<&str>,
) -> std::result::Result<MembershipReport, AuditError> {
    let entries: Vec<&RegistryEntry> = match model_id {
        Some(id) => {
            let e = registry
                .entries
                .iter()
                .find(|e| e.model_id == id)
                .ok_or_else(|| AuditError::UnknownModel(id.to_string()))?;
            vec![e]
        }
        None => registry.entries.iter().collect(),
    };
    let sample_id = upload_id(image);
    let mut per_config = Vec::new();
    let mut failed = Vec::new();
    let mut decode_errors = 0;
    for entry in &entries {
        let fail_model = |reason: String| FailedConfig {
            model_id: entry.model_id.clone(),
            auditable_data: None,
            architecture: None,
            reason,
        };
        let tensor = match decode_image(image, entry.model.preprocess()) {
            Ok(t) => t,
            Err(e) => {
                decode_errors += 1;
                failed.push(fail_model(e.to_string()));
                continue;
            }
        };
        let record = match entry.model.infer_image(&sample_id, &tensor, &entry.taps) {
            Ok((_, r)) => r,
            Err(e) => {
                failed.push(fail_model(e.to_string()));
                continue;
            }
        };
        for c in &entry.classifiers {
            match c.features_for(&record).and_then(|f| c.predict(&f)) {
                Ok(s) => per_config.push(ConfigScore {
                    model_id: entry.model_id.clone(),
                    auditable_data: c.kind(),
                    architecture: c.architecture(),
                    score: s.score,
                    decision: s.decision,
                }),
                Err(e) => failed.push(FailedConfig {
                    model_id: entry.model_id.clone(),
                    auditable_data: Some(c.kind()),
                    architecture: Some(c.architecture()),
                    reason: e.to_string(),
                }),
            }
        }
    }
    if per_config.is_empty() {
        if decode_errors == entries.len() {
            return Err(AuditError::Undecodable(
                failed.first().map(|f| f.reason.clone()).unwrap_or_default(),
            ));
        }
        return Err(AuditError::NoScores(failed));
    }
    let aggregate_likelihood = per_config.iter().map(|c| c.score).sum::<f64>() / per_config.len() as f64;
    Ok(MembershipReport {
        sample_id,
        per_config,
        aggregate_likelihood,
        disclaimer: DISCLAIMER.into(),
        failed,
    })
}
