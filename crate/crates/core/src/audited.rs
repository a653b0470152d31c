//! The model under audit: a four-block convolutional classifier whose
//! post-pool block outputs and embedding are exposed as tap points.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nnkit::train::{evaluate, fit, EpochStats, Objective};
use nnkit::{LayerSpec, Network, Tensor, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::aad::AadRecord;
use crate::data::{hex, Partition, Preprocess, Sample};
use crate::{MintError, Result};

pub const BLOCKS: usize = 4;
const LAYERS_PER_BLOCK: usize = 3;
/// Flatten + embedding dense layer.
const BACKBONE_LAYERS: usize = BLOCKS * LAYERS_PER_BLOCK + 2;
const EMBEDDING_LAYER: usize = BACKBONE_LAYERS - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TapName {
    #[serde(rename = "conv_block_1")]
    ConvBlock1,
    #[serde(rename = "conv_block_2")]
    ConvBlock2,
    #[serde(rename = "conv_block_3")]
    ConvBlock3,
    #[serde(rename = "conv_block_4")]
    ConvBlock4,
    #[serde(rename = "model_outcome")]
    ModelOutcome,
}

impl TapName {
    pub const CONV_BLOCKS: [TapName; BLOCKS] = [
        TapName::ConvBlock1,
        TapName::ConvBlock2,
        TapName::ConvBlock3,
        TapName::ConvBlock4,
    ];

    /// `k` in 1..=4.
    pub fn conv_block(k: usize) -> Option<TapName> {
        k.checked_sub(1).and_then(|i| Self::CONV_BLOCKS.get(i).copied())
    }

    /// 1-based block number for convolutional taps.
    pub fn block(self) -> Option<usize> {
        Self::CONV_BLOCKS.iter().position(|&t| t == self).map(|i| i + 1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TapName::ConvBlock1 => "conv_block_1",
            TapName::ConvBlock2 => "conv_block_2",
            TapName::ConvBlock3 => "conv_block_3",
            TapName::ConvBlock4 => "conv_block_4",
            TapName::ModelOutcome => "model_outcome",
        }
    }

    /// Index of the layer whose output this tap reads.
    fn layer_index(self) -> usize {
        match self.block() {
            Some(k) => k * LAYERS_PER_BLOCK - 1,
            None => EMBEDDING_LAYER,
        }
    }
}

impl fmt::Display for TapName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TapName {
    type Err = MintError;

    fn from_str(s: &str) -> Result<Self> {
        [TapName::ModelOutcome]
            .into_iter()
            .chain(TapName::CONV_BLOCKS)
            .find(|t| t.as_str() == s)
            .ok_or_else(|| MintError::UnknownTap(s.to_string()))
    }
}

/// The audited subset of the model: which tap points expose activations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TapName>", into = "Vec<TapName>")]
pub struct TapConfig {
    taps: BTreeSet<TapName>,
}

impl TapConfig {
    pub fn new(taps: impl IntoIterator<Item = TapName>) -> Result<Self> {
        let taps: BTreeSet<_> = taps.into_iter().collect();
        if taps.is_empty() {
            return Err(MintError::Config("tap config must name at least one tap".into()));
        }
        Ok(Self { taps })
    }

    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(names.iter().map(|n| n.as_ref().parse()).collect::<Result<Vec<_>>>()?)
    }

    /// All four blocks plus the outcome.
    pub fn all() -> Self {
        Self::new(TapName::CONV_BLOCKS.into_iter().chain([TapName::ModelOutcome])).expect("nonempty")
    }

    pub fn contains(&self, tap: TapName) -> bool {
        self.taps.contains(&tap)
    }

    pub fn iter(&self) -> impl Iterator<Item = TapName> + '_ {
        self.taps.iter().copied()
    }
}

impl Default for TapConfig {
    fn default() -> Self {
        Self::all()
    }
}

impl TryFrom<Vec<TapName>> for TapConfig {
    type Error = MintError;
    fn try_from(v: Vec<TapName>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TapConfig> for Vec<TapName> {
    fn from(c: TapConfig) -> Self {
        c.taps.into_iter().collect()
    }
}

/// The audited model's output embedding `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditedTrainMetrics {
    pub samples: usize,
    pub untrained_accuracy: f64,
    pub epochs: Vec<EpochStats>,
    pub final_train_accuracy: f64,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct AuditedModel {
    network: Network<f32>,
    architecture_id: String,
    channels: [usize; BLOCKS],
    embedding_dim: usize,
    n_classes: usize,
    preprocess: Preprocess,
    head_attached: bool,
    trained: bool,
}

pub const DEFAULT_CHANNELS: [usize; BLOCKS] = [8, 16, 32, 64];
pub const DEFAULT_EMBEDDING_DIM: usize = 32;

/// Four `Conv2d -> ReLU -> MaxPool2d` blocks, then `Flatten -> Dense(embedding)`
/// and a `Dense(n_classes)` head used only while training the model itself.
pub fn build_toy_audited_model(
    channels_per_block: [usize; BLOCKS],
    embedding_dim: usize,
    n_classes: usize,
    preprocess: Preprocess,
    seed: u64,
) -> Result<AuditedModel> {
    if channels_per_block.contains(&0) {
        return Err(MintError::Config(format!(
            "every block needs at least one channel, got {channels_per_block:?}"
        )));
    }
    if embedding_dim == 0 {
        return Err(MintError::Config("embedding_dim must be positive".into()));
    }
    if n_classes < 2 {
        return Err(MintError::Config("n_classes must be at least 2".into()));
    }
    let side = preprocess.size >> BLOCKS;
    if side == 0 {
        return Err(MintError::Config(format!(
            "input size {} is too small for {BLOCKS} pooling blocks",
            preprocess.size
        )));
    }
    let mut layers = Vec::with_capacity(BACKBONE_LAYERS + 1);
    let mut in_channels = preprocess.channels;
    for &out_channels in &channels_per_block {
        layers.push(LayerSpec::Conv2d {
            in_channels,
            out_channels,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool2d);
        in_channels = out_channels;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        in_units: in_channels * side * side,
        out_units: embedding_dim,
    });
    layers.push(LayerSpec::Dense {
        in_units: embedding_dim,
        out_units: n_classes,
    });
    let input_shape = [preprocess.channels, preprocess.size, preprocess.size];
    let network = Network::new(layers, &input_shape, seed)?;
    let [c1, c2, c3, c4] = channels_per_block;
    Ok(AuditedModel {
        network,
        architecture_id: format!(
            "toy-cnn4-{}x{}x{}-c{c1}-{c2}-{c3}-{c4}-e{embedding_dim}",
            preprocess.channels, preprocess.size, preprocess.size
        ),
        channels: channels_per_block,
        embedding_dim,
        n_classes,
        preprocess,
        head_attached: true,
        trained: false,
    })
}

impl AuditedModel {
    pub fn architecture_id(&self) -> &str {
        &self.architecture_id
    }

    pub fn channels(&self) -> [usize; BLOCKS] {
        self.channels
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn has_class_head(&self) -> bool {
        self.head_attached
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    /// Shape of the activation tensor a tap yields.
    pub fn tap_shape(&self, tap: TapName) -> Vec<usize> {
        self.network
            .layer_output_shape(tap.layer_index())
            .expect("tap layers exist")
            .to_vec()
    }

    pub fn tap_shapes(&self) -> BTreeMap<TapName, Vec<usize>> {
        TapConfig::all().iter().map(|t| (t, self.tap_shape(t))).collect()
    }

    /// Class-head output for one image (only while the head is attached).
    pub fn class_logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !self.head_attached {
            return Err(MintError::Config("class head has been detached".into()));
        }
        Ok(self.network.forward(image, None)?.0)
    }

    /// Drops the class head; the embedding becomes the network output.
    pub fn detach_head(mut self) -> Result<Self> {
        if self.head_attached {
            self.network = self.network.truncated(BACKBONE_LAYERS)?;
            self.head_attached = false;
        }
        Ok(self)
    }

    /// Eval-mode forward through the backbone, capturing the requested taps.
    pub fn infer_with_taps(&self, sample: &Sample, taps: &TapConfig) -> Result<(ModelOutcome, AadRecord)> {
        let (outcome, mut record) = self.infer_image(&sample.id, &sample.image, taps)?;
        record.membership = Some(sample.partition);
        record.source_dataset = sample.source_dataset.clone();
        Ok((outcome, record))
    }

    /// As [`AuditedModel::infer_with_taps`] for an image with no known partition.
    pub fn infer_image(
        &self,
        sample_id: &str,
        image: &Tensor<f32>,
        taps: &TapConfig,
    ) -> Result<(ModelOutcome, AadRecord)> {
        let cache = self.network.forward_prefix(image, BACKBONE_LAYERS, None)?;
        let outcome = ModelOutcome {
            embedding: cache
                .layer_output(EMBEDDING_LAYER)
                .expect("backbone computed")
                .data()
                .to_vec(),
        };
        let mut captured = BTreeMap::new();
        for tap in taps.iter().filter(|t| t.block().is_some()) {
            captured.insert(tap, cache.layer_output(tap.layer_index()).expect("tap computed").clone());
        }
        let record = AadRecord {
            sample_id: sample_id.to_string(),
            membership: None,
            taps: captured,
            outcome: taps.contains(TapName::ModelOutcome).then(|| outcome.clone()),
            source_dataset: String::new(),
            untrained_model: !self.trained,
        };
        Ok((outcome, record))
    }

    /// Embedding only.
    pub fn embed(&self, image: &Tensor<f32>) -> Result<ModelOutcome> {
        let cache = self.network.forward_prefix(image, BACKBONE_LAYERS, None)?;
        Ok(ModelOutcome {
            embedding: cache.output().data().to_vec(),
        })
    }
}

/// Trains the model end-to-end with softmax cross-entropy on member samples.
/// Any external sample in the set is rejected.
pub fn train_audited(
    mut model: AuditedModel,
    members: &[Sample],
    config: &TrainConfig,
) -> Result<(AuditedModel, AuditedTrainMetrics)> {
    if !model.head_attached {
        return Err(MintError::Config("cannot train an audited model without its class head".into()));
    }
    let mut inputs = Vec::with_capacity(members.len());
    let mut labels = Vec::with_capacity(members.len());
    for s in members {
        if s.partition != Partition::Member {
            return Err(MintError::Partition(format!(
                "sample {} is external and must never train the audited model",
                s.id
            )));
        }
        let label = s
            .class_label
            .ok_or_else(|| MintError::TrainingSet(format!("member {} has no class label", s.id)))?;
        if label >= model.n_classes {
            return Err(MintError::TrainingSet(format!(
                "class label {label} of {} exceeds {} classes",
                s.id, model.n_classes
            )));
        }
        inputs.push(s.image.clone());
        labels.push(label);
    }
    if inputs.is_empty() {
        return Err(MintError::Empty("no member samples to train on".into()));
    }
    let (_, untrained_accuracy) = evaluate(&model.network, &inputs, &labels, Objective::SoftmaxCrossEntropy)?;
    let report = fit(
        &mut model.network,
        &inputs,
        &labels,
        Objective::SoftmaxCrossEntropy,
        config,
    )?;
    model.trained = model.trained || config.epochs > 0;
    for e in &report.epochs {
        log::info!("audited epoch {}: loss {:.4} acc {:.4}", e.epoch, e.mean_loss, e.accuracy);
    }
    let metrics = AuditedTrainMetrics {
        samples: inputs.len(),
        untrained_accuracy,
        epochs: report.epochs,
        final_train_accuracy: report.final_accuracy,
        final_train_loss: report.final_loss,
    };
    Ok((model, metrics))
}

/// Sidecar written next to an audited-model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditedSidecar {
    pub architecture_id: String,
    pub channels: [usize; BLOCKS],
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub preprocess: Preprocess,
    pub head_attached: bool,
    pub trained: bool,
    /// Tap name -> index of the layer whose output it reads.
    pub tap_layers: BTreeMap<TapName, usize>,
    pub tap_shapes: BTreeMap<TapName, Vec<usize>>,
    pub checkpoint_sha256: String,
}

impl AuditedModel {
    pub fn sidecar(&self, checkpoint: &[u8]) -> AuditedSidecar {
        use sha2::{Digest, Sha256};
        AuditedSidecar {
            architecture_id: self.architecture_id.clone(),
            channels: self.channels,
            embedding_dim: self.embedding_dim,
            n_classes: self.n_classes,
            preprocess: self.preprocess,
            head_attached: self.head_attached,
            trained: self.trained,
            tap_layers: TapConfig::all().iter().map(|t| (t, t.layer_index())).collect(),
            tap_shapes: self.tap_shapes(),
            checkpoint_sha256: hex(&Sha256::digest(checkpoint)),
        }
    }

    /// Writes `<checkpoint>` (MINTNN01) and `<sidecar>` (JSON).
    pub fn save(&self, checkpoint: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<AuditedSidecar> {
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
        let meta: AuditedSidecar = serde_json::from_slice(
            &fs::read(sidecar).map_err(|e| artifact(sidecar, e.to_string()))?,
        )
        .map_err(|e| artifact(sidecar, e.to_string()))?;
        let network = nnkit::checkpoint::decode(&bytes).map_err(|e| artifact(checkpoint, e.to_string()))?;
        let reference = build_toy_audited_model(meta.channels, meta.embedding_dim, meta.n_classes, meta.preprocess, 0)?;
        let expected_layers = if meta.head_attached {
            reference.network.layers().to_vec()
        } else {
            reference.network.layers()[..BACKBONE_LAYERS].to_vec()
        };
        if network.layers() != expected_layers.as_slice() {
            return Err(artifact(checkpoint, "layer stack does not match the sidecar architecture".into()));
        }
        let model = AuditedModel {
            network,
            architecture_id: meta.architecture_id.clone(),
            channels: meta.channels,
            embedding_dim: meta.embedding_dim,
            n_classes: meta.n_classes,
            preprocess: meta.preprocess,
            head_attached: meta.head_attached,
            trained: meta.trained,
        };
        if model.tap_shapes() != meta.tap_shapes {
            return Err(artifact(sidecar, "tap shapes disagree with the checkpoint".into()));
        }
        Ok(model)
    }
}
