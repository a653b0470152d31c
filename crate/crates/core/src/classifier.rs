//! MINT classifiers: the Vanilla MLP over vectorized features and the CNN
//! over full activation maps.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nnkit::train::{fit, Objective};
use nnkit::{L1Scaling, LayerSpec, Network, Tensor, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aad::{extract_features, AadRecord, AuditableDataKind, FeatureForm, FeatureOptions, FeatureSet, Features};
use crate::data::{hex, Partition};
use crate::{MintError, Result};

pub const HIDDEN_UNITS: usize = 64;
pub const DROPOUT_RATE: f64 = 0.3;
pub const L1_COEFFICIENT: f64 = 0.1;
pub const CONV1_FILTERS: usize = 64;
pub const CONV2_FILTERS: usize = 128;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Smallest map side that survives two 2x2 pools.
pub const CNN_MIN_SIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MintArchitecture {
    Vanilla,
    Cnn,
}

impl MintArchitecture {
    pub fn as_str(self) -> &'static str {
        match self {
            MintArchitecture::Vanilla => "vanilla",
            MintArchitecture::Cnn => "cnn",
        }
    }

    pub fn form(self) -> FeatureForm {
        match self {
            MintArchitecture::Vanilla => FeatureForm::Vector,
            MintArchitecture::Cnn => FeatureForm::Maps,
        }
    }

    /// Whether this architecture can consume `kind` at all.
    pub fn supports(self, kind: AuditableDataKind) -> bool {
        match self {
            MintArchitecture::Vanilla => true,
            MintArchitecture::Cnn => matches!(kind, AuditableDataKind::ConvLayer(_)),
        }
    }
}

impl fmt::Display for MintArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MintArchitecture {
    type Err = MintError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" | "mlp" => Ok(MintArchitecture::Vanilla),
            "cnn" => Ok(MintArchitecture::Cnn),
            _ => Err(MintError::Config(format!("unknown MINT architecture {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaMintSpec {
    pub input_length: usize,
    pub hidden_units: usize,
    pub output_units: usize,
    pub dropout_rate: f64,
    pub l1_coefficient: f64,
}

impl VanillaMintSpec {
    pub fn new(input_length: usize) -> Self {
        Self {
            input_length,
            hidden_units: HIDDEN_UNITS,
            output_units: 1,
            dropout_rate: DROPOUT_RATE,
            l1_coefficient: L1_COEFFICIENT,
        }
    }

    /// `(F * 64 + 64) + (64 * 1 + 1)`.
    pub fn parameter_count(&self) -> usize {
        (self.input_length * self.hidden_units + self.hidden_units)
            + (self.hidden_units * self.output_units + self.output_units)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnMintSpec {
    /// `[C, H, W]`.
    pub input_map_shape: [usize; 3],
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub fc_hidden: usize,
    pub dropout_rate: f64,
    pub l1_coefficient: f64,
}

impl CnnMintSpec {
    pub fn new(input_map_shape: [usize; 3]) -> Self {
        Self {
            input_map_shape,
            conv1_filters: CONV1_FILTERS,
            conv2_filters: CONV2_FILTERS,
            fc_hidden: HIDDEN_UNITS,
            dropout_rate: DROPOUT_RATE,
            l1_coefficient: L1_COEFFICIENT,
        }
    }

    /// `128 * (H / 4) * (W / 4)`.
    pub fn flatten_length(&self) -> usize {
        let [_, h, w] = self.input_map_shape;
        self.conv2_filters * (h / 4) * (w / 4)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum MintSpec {
    Vanilla(VanillaMintSpec),
    Cnn(CnnMintSpec),
}

impl MintSpec {
    pub fn architecture(&self) -> MintArchitecture {
        match self {
            MintSpec::Vanilla(_) => MintArchitecture::Vanilla,
            MintSpec::Cnn(_) => MintArchitecture::Cnn,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            MintSpec::Vanilla(v) => vec![v.input_length],
            MintSpec::Cnn(c) => c.input_map_shape.to_vec(),
        }
    }

    pub fn l1_coefficient(&self) -> f64 {
        match self {
            MintSpec::Vanilla(v) => v.l1_coefficient,
            MintSpec::Cnn(c) => c.l1_coefficient,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        match *self {
            MintSpec::Vanilla(v) => vec![
                LayerSpec::Dense {
                    in_units: v.input_length,
                    out_units: v.hidden_units,
                },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: v.dropout_rate },
                LayerSpec::Dense {
                    in_units: v.hidden_units,
                    out_units: v.output_units,
                },
                LayerSpec::Sigmoid,
            ],
            MintSpec::Cnn(c) => vec![
                LayerSpec::Conv2d {
                    in_channels: c.input_map_shape[0],
                    out_channels: c.conv1_filters,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Conv2d {
                    in_channels: c.conv1_filters,
                    out_channels: c.conv2_filters,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_units: c.flatten_length(),
                    out_units: c.fc_hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: c.dropout_rate },
                LayerSpec::Dense {
                    in_units: c.fc_hidden,
                    out_units: 1,
                },
                LayerSpec::Sigmoid,
            ],
        }
    }
}

/// What a classifier was trained from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainFingerprint {
    pub seed: u64,
    pub data_digest: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipScore {
    pub score: f64,
    pub decision: Partition,
}

/// `Member` iff `score >= threshold`.
pub fn decide(score: f64, threshold: f64) -> Partition {
    if score >= threshold {
        Partition::Member
    } else {
        Partition::External
    }
}

#[derive(Clone, Debug)]
pub struct MintClassifier {
    spec: MintSpec,
    kind: AuditableDataKind,
    network: Network<f32>,
    threshold: f64,
    feature_options: FeatureOptions,
    fingerprint: Option<TrainFingerprint>,
}

pub fn build_vanilla(kind: AuditableDataKind, input_length: usize, seed: u64) -> Result<MintClassifier> {
    if input_length == 0 {
        return Err(MintError::Config("Vanilla MINT needs a feature length of at least 1".into()));
    }
    MintClassifier::from_spec(MintSpec::Vanilla(VanillaMintSpec::new(input_length)), kind, seed)
}

pub fn build_cnn(kind: AuditableDataKind, map_shape: &[usize], seed: u64) -> Result<MintClassifier> {
    let &[c, h, w] = map_shape else {
        return Err(MintError::Config(format!(
            "CNN MINT expects [C, H, W] maps, got {map_shape:?}"
        )));
    };
    if !MintArchitecture::Cnn.supports(kind) {
        return Err(MintError::FeatureKind(format!(
            "CNN MINT cannot consume {kind}; use the Vanilla model"
        )));
    }
    if c == 0 || h < CNN_MIN_SIDE || w < CNN_MIN_SIDE {
        return Err(MintError::Config(format!(
            "{c}x{h}x{w} maps are too small for two 2x2 pools (need at least {CNN_MIN_SIDE}x{CNN_MIN_SIDE}); use the Vanilla model for this tap"
        )));
    }
    MintClassifier::from_spec(MintSpec::Cnn(CnnMintSpec::new([c, h, w])), kind, seed)
}

/// Builds the classifier `architecture` uses for features of `shape`.
pub fn build_classifier(
    architecture: MintArchitecture,
    kind: AuditableDataKind,
    shape: &[usize],
    seed: u64,
) -> Result<MintClassifier> {
    match architecture {
        MintArchitecture::Vanilla => match shape {
            [f] => build_vanilla(kind, *f, seed),
            _ => Err(MintError::Config(format!("Vanilla MINT expects vectors, got shape {shape:?}"))),
        },
        MintArchitecture::Cnn => build_cnn(kind, shape, seed),
    }
}

/// Default MINT optimisation settings: SGD 0.01, batch 64, 20 epochs, L1 0.1
/// charged against the loss summed over the training set.
pub fn default_mint_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        epochs: 20,
        batch_size: 64,
        l1_coefficient: L1_COEFFICIENT,
        l1_scaling: L1Scaling::PerDataset,
        seed: 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MintTrainMetrics {
    pub samples: usize,
    pub members: usize,
    pub externals: usize,
    pub epochs: Vec<nnkit::train::EpochStats>,
    pub final_train_loss: f64,
    pub final_train_accuracy: f64,
}

/// Order-sensitive digest of ids, labels and feature bits.
pub fn feature_set_digest(set: &FeatureSet) -> String {
    let mut h = Sha256::new();
    h.update(set.kind().slug().as_bytes());
    for item in set.items() {
        h.update((item.sample_id.len() as u64).to_le_bytes());
        h.update(item.sample_id.as_bytes());
        h.update([item.membership.target() as u8]);
        for v in item.features.values() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

impl MintClassifier {
    fn from_spec(spec: MintSpec, kind: AuditableDataKind, seed: u64) -> Result<Self> {
        let network = Network::new(spec.layers(), &spec.input_shape(), seed)?;
        Ok(Self {
            spec,
            kind,
            network,
            threshold: DEFAULT_THRESHOLD,
            feature_options: FeatureOptions::default(),
            fingerprint: None,
        })
    }

    pub fn spec(&self) -> &MintSpec {
        &self.spec
    }

    pub fn architecture(&self) -> MintArchitecture {
        self.spec.architecture()
    }

    pub fn kind(&self) -> AuditableDataKind {
        self.kind
    }

    pub fn form(&self) -> FeatureForm {
        self.architecture().form()
    }

    pub fn expected_shape(&self) -> Vec<usize> {
        self.spec.input_shape()
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(MintError::Config(format!("threshold {threshold} outside (0, 1)")));
        }
        self.threshold = threshold;
        Ok(self)
    }

    /// Options the training features were derived with; queries must match.
    pub fn feature_options(&self) -> FeatureOptions {
        self.feature_options
    }

    pub fn with_feature_options(mut self, options: FeatureOptions) -> Self {
        self.feature_options = options;
        self
    }

    /// Derives this classifier's input from an activation record.
    pub fn features_for(&self, record: &AadRecord) -> Result<Features> {
        extract_features(record, self.kind, self.form(), self.feature_options)
    }

    pub fn fingerprint(&self) -> Option<&TrainFingerprint> {
        self.fingerprint.as_ref()
    }

    pub fn is_trained(&self) -> bool {
        self.fingerprint.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.network.parameter_count()
    }

    fn check_features(&self, features: &Features) -> Result<()> {
        if features.kind() != self.kind || features.form() != self.form() {
            return Err(MintError::FeatureKind(format!(
                "classifier expects {} {:?} features, got {} {:?}",
                self.kind,
                self.form(),
                features.kind(),
                features.form()
            )));
        }
        if features.shape() != self.expected_shape() {
            return Err(MintError::FeatureShape {
                expected: self.expected_shape(),
                actual: features.shape(),
            });
        }
        Ok(())
    }

    /// Eval-mode membership score.
    pub fn predict(&self, features: &Features) -> Result<MembershipScore> {
        if !self.is_trained() {
            return Err(MintError::Untrained);
        }
        self.check_features(features)?;
        let input = features.to_tensor()?;
        let (out, _) = self.network.forward(&input, None)?;
        let score = f64::from(out.data()[0]);
        Ok(MembershipScore {
            score,
            decision: decide(score, self.threshold),
        })
    }

    pub fn predict_set(&self, set: &FeatureSet) -> Result<Vec<MembershipScore>> {
        use rayon::prelude::*;
        set.items().par_iter().map(|i| self.predict(&i.features)).collect()
    }
}

/// Trains with BCE plus the L1 penalty on weights. The coefficient comes from
/// the classifier spec; `config` supplies everything else, including how the
/// penalty is scaled.
pub fn train_mint(
    mut classifier: MintClassifier,
    set: &FeatureSet,
    config: &TrainConfig,
) -> Result<(MintClassifier, MintTrainMetrics)> {
    if set.is_empty() {
        return Err(MintError::Empty("no training features".into()));
    }
    if set.kind() != classifier.kind || set.form() != classifier.form() {
        return Err(MintError::TrainingSet(format!(
            "classifier expects {} {:?} features, set holds {} {:?}",
            classifier.kind,
            classifier.form(),
            set.kind(),
            set.form()
        )));
    }
    if set.shape() != classifier.expected_shape().as_slice() {
        return Err(MintError::FeatureShape {
            expected: classifier.expected_shape(),
            actual: set.shape().to_vec(),
        });
    }
    let members = set.items().iter().filter(|i| i.membership == Partition::Member).count();
    let externals = set.len() - members;
    if members == 0 || externals == 0 {
        return Err(MintError::TrainingSet(format!(
            "single-class training set ({members} member, {externals} external)"
        )));
    }
    if members.abs_diff(externals) > 1 {
        return Err(MintError::TrainingSet(format!(
            "training set is unbalanced: {members} member vs {externals} external"
        )));
    }
    let inputs = set
        .items()
        .iter()
        .map(|i| i.features.to_tensor())
        .collect::<Result<Vec<Tensor<f32>>>>()?;
    let targets: Vec<usize> = set.items().iter().map(|i| i.membership.target()).collect();
    let config = TrainConfig {
        l1_coefficient: classifier.spec.l1_coefficient(),
        ..*config
    };
    let report = fit(
        &mut classifier.network,
        &inputs,
        &targets,
        Objective::BinaryCrossEntropy,
        &config,
    )?;
    classifier.fingerprint = Some(TrainFingerprint {
        seed: config.seed,
        data_digest: feature_set_digest(set),
    });
    let metrics = MintTrainMetrics {
        samples: set.len(),
        members,
        externals,
        epochs: report.epochs,
        final_train_loss: report.final_loss,
        final_train_accuracy: report.final_accuracy,
    };
    Ok((classifier, metrics))
}

/// Sidecar manifest written next to a MINT checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MintSidecar {
    pub spec: MintSpec,
    pub auditable_data: AuditableDataKind,
    pub feature_form: FeatureForm,
    pub expected_shape: Vec<usize>,
    pub threshold: f64,
    #[serde(default)]
    pub feature_options: FeatureOptions,
    pub train_fingerprint: Option<TrainFingerprint>,
    pub checkpoint_sha256: String,
}

impl MintClassifier {
    pub fn sidecar(&self, checkpoint: &[u8]) -> MintSidecar {
        MintSidecar {
            spec: self.spec,
            auditable_data: self.kind,
            feature_form: self.form(),
            expected_shape: self.expected_shape(),
            threshold: self.threshold,
            feature_options: self.feature_options,
            train_fingerprint: self.fingerprint.clone(),
            checkpoint_sha256: hex(&Sha256::digest(checkpoint)),
        }
    }

    pub fn save(&self, checkpoint: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<MintSidecar> {
        let bytes = nnkit::checkpoint::encode(&self.network);
        fs::write(checkpoint, &bytes)?;
        let meta = self.sidecar(&bytes);
        fs::write(sidecar, serde_json::to_vec_pretty(&meta)?)?;
        Ok(meta)
    }

    pub fn load(checkpoint: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<Self> {
        let (checkpoint, sidecar) = (checkpoint.as_ref(), sidecar.as_ref());
        let artifact = |path: &Path, reason: String| MintError::Artifact {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = fs::read(checkpoint).map_err(|e| artifact(checkpoint, e.to_string()))?;
        let meta: MintSidecar = serde_json::from_slice(
            &fs::read(sidecar).map_err(|e| artifact(sidecar, e.to_string()))?,
        )
        .map_err(|e| artifact(sidecar, e.to_string()))?;
        if hex(&Sha256::digest(&bytes)) != meta.checkpoint_sha256 {
            return Err(artifact(checkpoint, "checksum does not match the sidecar".into()));
        }
        let network = nnkit::checkpoint::decode(&bytes).map_err(|e| artifact(checkpoint, e.to_string()))?;
        if network.layers() != meta.spec.layers().as_slice() || network.input_shape() != meta.expected_shape.as_slice() {
            return Err(artifact(checkpoint, "layer stack does not match the sidecar spec".into()));
        }
        if meta.feature_form != meta.spec.architecture().form() {
            return Err(artifact(sidecar, "feature form does not match the architecture".into()));
        }
        let classifier = MintClassifier {
            spec: meta.spec,
            kind: meta.auditable_data,
            network,
            threshold: DEFAULT_THRESHOLD,
            feature_options: meta.feature_options,
            fingerprint: meta.train_fingerprint,
        };
        classifier
            .with_threshold(meta.threshold)
            .map_err(|e| artifact(sidecar, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_counts() {
        for (f, n) in [(120, 7809), (256, 16513), (1, 193)] {
            let c = build_vanilla(AuditableDataKind::AllConvLayers, f, 0).unwrap();
            assert_eq!(c.parameter_count(), n);
        }
        assert!(build_vanilla(AuditableDataKind::AllConvLayers, 0, 0).is_err());
    }

    #[test]
    fn cnn_flatten_lengths() {
        let k = AuditableDataKind::ConvLayer(1);
        let c = build_cnn(k, &[8, 16, 16], 0).unwrap();
        let MintSpec::Cnn(spec) = c.spec() else { panic!() };
        assert_eq!(spec.flatten_length(), 2048);
        let c = build_cnn(k, &[16, 8, 8], 0).unwrap();
        let MintSpec::Cnn(spec) = c.spec() else { panic!() };
        assert_eq!(spec.flatten_length(), 512);
        let err = build_cnn(AuditableDataKind::ConvLayer(4), &[64, 2, 2], 0).unwrap_err();
        assert!(err.to_string().contains("Vanilla"), "{err}");
        assert!(build_cnn(AuditableDataKind::ModelOutcome, &[8, 16, 16], 0).is_err());
    }

    #[test]
    fn threshold_rule_ties_to_member() {
        assert_eq!(decide(0.73, 0.5), Partition::Member);
        assert_eq!(decide(0.5, 0.5), Partition::Member);
        assert_eq!(decide(0.4999, 0.5), Partition::External);
    }

    #[test]
    fn untrained_predict_is_rejected() {
        let c = build_vanilla(AuditableDataKind::ConvLayer(1), 2, 0).unwrap();
        let f = Features::Vector(crate::aad::FeatureVector {
            values: vec![0.0, 1.0],
            kind: AuditableDataKind::ConvLayer(1),
        });
        assert!(matches!(c.predict(&f), Err(MintError::Untrained)));
    }
}
