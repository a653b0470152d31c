//! Auxiliary auditable data and the two feature forms MINT classifiers
//! consume: max-per-map vectors and full activation maps.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use nnkit::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audited::{AuditedModel, ModelOutcome, TapConfig, TapName, BLOCKS};
use crate::data::{Partition, Sample};
use crate::{MintError, Result};

/// Activations captured for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AadRecord {
    pub sample_id: String,
    /// Partition tag copied from the sample; `None` for unlabelled queries.
    pub membership: Option<Partition>,
    pub taps: BTreeMap<TapName, Tensor<f32>>,
    pub outcome: Option<ModelOutcome>,
    pub source_dataset: String,
    /// Set when the activations came from a model that was never trained.
    pub untrained_model: bool,
}

/// Which auxiliary data a classifier is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AuditableDataKind {
    /// Tap of block `k`, 1-based.
    ConvLayer(u8),
    ModelOutcome,
    AllConvLayers,
}

impl AuditableDataKind {
    /// Row order of the vanilla accuracy table.
    pub const TABLE_ORDER: [AuditableDataKind; 6] = [
        AuditableDataKind::ConvLayer(1),
        AuditableDataKind::ConvLayer(2),
        AuditableDataKind::ConvLayer(3),
        AuditableDataKind::ConvLayer(4),
        AuditableDataKind::ModelOutcome,
        AuditableDataKind::AllConvLayers,
    ];

    pub fn conv_layer(k: usize) -> Result<Self> {
        if (1..=BLOCKS).contains(&k) {
            Ok(AuditableDataKind::ConvLayer(k as u8))
        } else {
            Err(MintError::FeatureKind(format!("conv layer {k} outside 1..={BLOCKS}")))
        }
    }

    /// Table row label, e.g. `Conv Layer #1`.
    pub fn label(self) -> String {
        match self {
            AuditableDataKind::ConvLayer(k) => format!("Conv Layer #{k}"),
            AuditableDataKind::ModelOutcome => "Model Outcome".into(),
            AuditableDataKind::AllConvLayers => "All Conv Layers".into(),
        }
    }

    /// Machine name, e.g. `conv_layer_1`.
    pub fn slug(self) -> String {
        match self {
            AuditableDataKind::ConvLayer(k) => format!("conv_layer_{k}"),
            AuditableDataKind::ModelOutcome => "model_outcome".into(),
            AuditableDataKind::AllConvLayers => "all_conv_layers".into(),
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::TABLE_ORDER.into_iter().find(|k| k.label() == label)
    }

    /// Taps a record must carry for this kind.
    pub fn required_taps(self) -> Vec<TapName> {
        match self {
            AuditableDataKind::ConvLayer(k) => vec![TapName::conv_block(k as usize).expect("validated block")],
            AuditableDataKind::ModelOutcome => vec![TapName::ModelOutcome],
            AuditableDataKind::AllConvLayers => TapName::CONV_BLOCKS.to_vec(),
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            AuditableDataKind::ConvLayer(k) => k,
            AuditableDataKind::ModelOutcome => 5,
            AuditableDataKind::AllConvLayers => 6,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1..=4 => Some(AuditableDataKind::ConvLayer(tag)),
            5 => Some(AuditableDataKind::ModelOutcome),
            6 => Some(AuditableDataKind::AllConvLayers),
            _ => None,
        }
    }
}

impl fmt::Display for AuditableDataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug())
    }
}

impl FromStr for AuditableDataKind {
    type Err = MintError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(k) = Self::TABLE_ORDER.into_iter().find(|k| k.slug() == s || k.label() == s) {
            return Ok(k);
        }
        match s {
            "conv1" | "conv2" | "conv3" | "conv4" => Self::conv_layer(s[4..].parse().expect("digit")),
            "outcome" => Ok(AuditableDataKind::ModelOutcome),
            "all" | "all-conv" => Ok(AuditableDataKind::AllConvLayers),
            _ => Err(MintError::FeatureKind(format!("unknown auditable data kind {s:?}"))),
        }
    }
}

impl TryFrom<String> for AuditableDataKind {
    type Error = MintError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AuditableDataKind> for String {
    fn from(k: AuditableDataKind) -> Self {
        k.slug()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureForm {
    Vector,
    Maps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub kind: AuditableDataKind,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A single tap's activation block, unmodified.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    pub maps: Tensor<f32>,
    pub kind: AuditableDataKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Vector(FeatureVector),
    Maps(FeatureMaps),
}

impl Features {
    pub fn kind(&self) -> AuditableDataKind {
        match self {
            Features::Vector(v) => v.kind,
            Features::Maps(m) => m.kind,
        }
    }

    pub fn form(&self) -> FeatureForm {
        match self {
            Features::Vector(_) => FeatureForm::Vector,
            Features::Maps(_) => FeatureForm::Maps,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Features::Vector(v) => vec![v.values.len()],
            Features::Maps(m) => m.maps.shape().to_vec(),
        }
    }

    /// Network input tensor (`[F]` or `[C, H, W]`).
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        match self {
            Features::Vector(v) => Ok(Tensor::vector(v.values.clone())?),
            Features::Maps(m) => Ok(m.maps.clone()),
        }
    }

    pub fn values(&self) -> &[f32] {
        match self {
            Features::Vector(v) => &v.values,
            Features::Maps(m) => m.maps.data(),
        }
    }
}

fn tap<'a>(record: &'a AadRecord, tap: TapName) -> Result<&'a Tensor<f32>> {
    record.taps.get(&tap).ok_or_else(|| MintError::MissingTap {
        sample_id: record.sample_id.clone(),
        tap: tap.to_string(),
    })
}

fn per_channel_max(t: &Tensor<f32>) -> Vec<f32> {
    let channels = t.shape()[0];
    let plane = t.len() / channels;
    t.data()
        .chunks_exact(plane)
        .map(|map| map.iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect()
}

/// Max-per-map vectorization: one value per activation map, channel order
/// preserved; `AllConvLayers` concatenates blocks 1 to 4; `ModelOutcome` is
/// the embedding verbatim.
pub fn vectorize_max(record: &AadRecord, kind: AuditableDataKind) -> Result<FeatureVector> {
    let values = match kind {
        AuditableDataKind::ConvLayer(_) => per_channel_max(tap(record, kind.required_taps()[0])?),
        AuditableDataKind::AllConvLayers => {
            let mut v = Vec::new();
            for t in TapName::CONV_BLOCKS {
                v.extend(per_channel_max(tap(record, t)?));
            }
            v
        }
        AuditableDataKind::ModelOutcome => record
            .outcome
            .as_ref()
            .ok_or_else(|| MintError::MissingTap {
                sample_id: record.sample_id.clone(),
                tap: TapName::ModelOutcome.to_string(),
            })?
            .embedding
            .clone(),
    };
    Ok(FeatureVector { values, kind })
}

/// The full activation maps of one convolutional tap.
pub fn full_maps(record: &AadRecord, kind: AuditableDataKind) -> Result<FeatureMaps> {
    match kind {
        AuditableDataKind::ConvLayer(_) => Ok(FeatureMaps {
            maps: tap(record, kind.required_taps()[0])?.clone(),
            kind,
        }),
        AuditableDataKind::AllConvLayers => Err(MintError::FeatureKind(
            "concatenation impractical for map-form features: tap resolutions differ".into(),
        )),
        AuditableDataKind::ModelOutcome => Err(MintError::FeatureKind(
            "no spatial activation maps for outcome".into(),
        )),
    }
}

/// Scales a vector to unit L2 norm (zero vectors are left alone).
pub fn l2_normalize(values: &mut [f32]) {
    let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Options applied when turning records into feature sets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOptions {
    /// L2-normalize the model-outcome embedding. Off by default.
    pub normalize_outcome: bool,
}

pub fn extract_features(
    record: &AadRecord,
    kind: AuditableDataKind,
    form: FeatureForm,
    options: FeatureOptions,
) -> Result<Features> {
    match form {
        FeatureForm::Vector => {
            let mut v = vectorize_max(record, kind)?;
            if options.normalize_outcome && kind == AuditableDataKind::ModelOutcome {
                l2_normalize(&mut v.values);
            }
            Ok(Features::Vector(v))
        }
        FeatureForm::Maps => Ok(Features::Maps(full_maps(record, kind)?)),
    }
}

// ---------------------------------------------------------------------------
// Labeled feature sets
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub sample_id: String,
    pub membership: Partition,
    pub source_dataset: String,
    pub features: Features,
}

/// Homogeneous collection: one kind, one form, one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    kind: AuditableDataKind,
    form: FeatureForm,
    shape: Vec<usize>,
    items: Vec<LabeledFeatures>,
}

impl FeatureSet {
    pub fn new(
        kind: AuditableDataKind,
        form: FeatureForm,
        shape: Vec<usize>,
        items: Vec<LabeledFeatures>,
    ) -> Result<Self> {
        for item in &items {
            if item.features.kind() != kind || item.features.form() != form {
                return Err(MintError::TrainingSet(format!(
                    "{} carries {} {:?} features in a {kind} {form:?} set",
                    item.sample_id,
                    item.features.kind(),
                    item.features.form()
                )));
            }
            if item.features.shape() != shape {
                return Err(MintError::FeatureShape {
                    expected: shape,
                    actual: item.features.shape(),
                });
            }
        }
        Ok(Self {
            kind,
            form,
            shape,
            items,
        })
    }

    /// Builds a set from partition-tagged records.
    pub fn from_records(
        records: &[AadRecord],
        kind: AuditableDataKind,
        form: FeatureForm,
        options: FeatureOptions,
    ) -> Result<Self> {
        let items = records
            .iter()
            .map(|r| {
                let membership = r.membership.ok_or_else(|| {
                    MintError::Partition(format!("record {} has no membership tag", r.sample_id))
                })?;
                Ok(LabeledFeatures {
                    sample_id: r.sample_id.clone(),
                    membership,
                    source_dataset: r.source_dataset.clone(),
                    features: extract_features(r, kind, form, options)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let shape = match items.first() {
            Some(i) => i.features.shape(),
            None => Vec::new(),
        };
        Self::new(kind, form, shape, items)
    }

    pub fn kind(&self) -> AuditableDataKind {
        self.kind
    }

    pub fn form(&self) -> FeatureForm {
        self.form
    }

    /// Per-item feature shape (empty for an empty set built from records).
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn items(&self) -> &[LabeledFeatures] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items whose ids are listed, in list order. Unknown ids are an error.
    pub fn select(&self, ids: &[String]) -> Result<FeatureSet> {
        let index: HashMap<&str, usize> = self
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.sample_id.as_str(), i))
            .collect();
        let items = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.items[i].clone())
                    .ok_or_else(|| MintError::TrainingSet(format!("sample {id} is not in the feature set")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureSet {
            kind: self.kind,
            form: self.form,
            shape: self.shape.clone(),
            items,
        })
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.ids_of(Partition::Member)
    }

    pub fn external_ids(&self) -> Vec<String> {
        self.ids_of(Partition::External)
    }

    fn ids_of(&self, p: Partition) -> Vec<String> {
        self.items
            .iter()
            .filter(|i| i.membership == p)
            .map(|i| i.sample_id.clone())
            .collect()
    }
}

/// Every feature set derived from one extraction, keyed by kind and form.
/// Combinations that could not be built keep their reason.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    options: FeatureOptions,
    sets: BTreeMap<(AuditableDataKind, FeatureForm), FeatureSet>,
    unavailable: BTreeMap<(AuditableDataKind, FeatureForm), String>,
}

impl FeatureStore {
    pub fn new(options: FeatureOptions) -> Self {
        Self {
            options,
            ..Self::default()
        }
    }

    /// Vector sets for every kind and map sets for every conv tap.
    pub fn from_records(records: &[AadRecord], options: FeatureOptions) -> Self {
        let mut store = Self::new(options);
        for kind in AuditableDataKind::TABLE_ORDER {
            for form in [FeatureForm::Vector, FeatureForm::Maps] {
                if form == FeatureForm::Maps && !matches!(kind, AuditableDataKind::ConvLayer(_)) {
                    continue;
                }
                match FeatureSet::from_records(records, kind, form, options) {
                    Ok(set) if set.is_empty() => store.mark_unavailable(kind, form, "no records".into()),
                    Ok(set) => store.insert(set),
                    Err(e) => store.mark_unavailable(kind, form, e.to_string()),
                }
            }
        }
        store
    }

    pub fn options(&self) -> FeatureOptions {
        self.options
    }

    pub fn insert(&mut self, set: FeatureSet) {
        let key = (set.kind(), set.form());
        self.unavailable.remove(&key);
        self.sets.insert(key, set);
    }

    pub fn mark_unavailable(&mut self, kind: AuditableDataKind, form: FeatureForm, reason: String) {
        self.sets.remove(&(kind, form));
        self.unavailable.insert((kind, form), reason);
    }

    pub fn get(&self, kind: AuditableDataKind, form: FeatureForm) -> Result<&FeatureSet> {
        self.sets.get(&(kind, form)).ok_or_else(|| {
            let form_name = match form {
                FeatureForm::Vector => "vector",
                FeatureForm::Maps => "map",
            };
            MintError::FeatureKind(match self.unavailable.get(&(kind, form)) {
                Some(reason) => format!("{kind} {form_name} features unavailable: {reason}"),
                None => format!("no {kind} {form_name} features were extracted"),
            })
        })
    }

    pub fn sets(&self) -> impl Iterator<Item = &FeatureSet> {
        self.sets.values()
    }

    pub fn unavailable(&self) -> &BTreeMap<(AuditableDataKind, FeatureForm), String> {
        &self.unavailable
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Per-sample map shape of each conv kind with map features.
    pub fn map_shapes(&self) -> BTreeMap<AuditableDataKind, Vec<usize>> {
        self.sets
            .iter()
            .filter(|((_, form), _)| *form == FeatureForm::Maps)
            .map(|((kind, _), set)| (*kind, set.shape().to_vec()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Batch extraction
// ---------------------------------------------------------------------------

/// A sample that could not be read or processed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedSample {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct Extraction {
    pub records: Vec<AadRecord>,
    pub skipped: Vec<SkippedSample>,
}

impl Extraction {
    /// Records plus skips: every input is accounted for.
    pub fn total(&self) -> usize {
        self.records.len() + self.skipped.len()
    }
}

const EXTRACT_CHUNK: usize = 256;

/// Runs [`AuditedModel::infer_with_taps`] over a sample stream. Output order
/// follows input order; failures are logged and listed in
/// [`Extraction::skipped`]. Progress is logged every `progress_every` records.
pub fn batch_extract<I>(
    model: &AuditedModel,
    samples: I,
    taps: &TapConfig,
    progress_every: usize,
) -> Extraction
where
    I: IntoIterator<Item = std::result::Result<Sample, SkippedSample>>,
{
    let mut out = Extraction::default();
    let mut pending: Vec<Sample> = Vec::with_capacity(EXTRACT_CHUNK);
    let mut next_report = progress_every.max(1);

    let mut flush = |pending: &mut Vec<Sample>, out: &mut Extraction| {
        let results: Vec<_> = pending
            .par_iter()
            .map(|s| model.infer_with_taps(s, taps).map(|(_, r)| r))
            .collect();
        for (s, r) in pending.drain(..).zip(results) {
            match r {
                Ok(rec) => out.records.push(rec),
                Err(e) => {
                    log::warn!("skipping sample {}: {e}", s.id);
                    out.skipped.push(SkippedSample {
                        sample_id: s.id,
                        reason: e.to_string(),
                    });
                }
            }
        }
        while progress_every > 0 && out.total() >= next_report {
            log::info!("extracted {} records ({} skipped)", out.records.len(), out.skipped.len());
            next_report += progress_every;
        }
    };

    for item in samples {
        match item {
            Ok(s) => {
                pending.push(s);
                if pending.len() == EXTRACT_CHUNK {
                    flush(&mut pending, &mut out);
                }
            }
            Err(skip) => {
                flush(&mut pending, &mut out);
                log::warn!("skipping unreadable sample {}: {}", skip.sample_id, skip.reason);
                out.skipped.push(skip);
            }
        }
    }
    flush(&mut pending, &mut out);
    out
}
