//! Member (D) and external (E) sample collections: synthetic generation,
//! image-folder ingestion, MINT train/test split planning, and the on-disk
//! dataset format.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nnkit::{RandomStream, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{MintError, Result};

/// Which side of the membership question a sample is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Part of the audited model's training set.
    Member,
    /// Never seen by the audited model.
    External,
}

impl Partition {
    /// Binary target used by MINT classifiers: members are the positive class.
    pub fn target(self) -> usize {
        match self {
            Partition::Member => 1,
            Partition::External => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Member => "member",
            Partition::External => "external",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `C x H x W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub partition: Partition,
    pub source_dataset: String,
    pub class_label: Option<usize>,
}

impl Sample {
    /// SHA-256 over the image shape and little-endian pixel values.
    pub fn digest(&self) -> String {
        tensor_digest(&self.image)
    }
}

pub fn tensor_digest(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The member set D and external set E, id-disjoint.
#[derive(Clone, Debug, Default)]
pub struct DatasetPartition {
    members: Vec<Sample>,
    externals: Vec<Sample>,
    /// Generation-time warnings (e.g. a configuration that cannot separate D from E).
    pub warnings: Vec<String>,
}

impl DatasetPartition {
    pub fn new(members: Vec<Sample>, externals: Vec<Sample>) -> Result<Self> {
        if let Some(s) = members.iter().find(|s| s.partition != Partition::Member) {
            return Err(MintError::Partition(format!("{} is tagged external but placed in D", s.id)));
        }
        if let Some(s) = externals.iter().find(|s| s.partition != Partition::External) {
            return Err(MintError::Partition(format!("{} is tagged member but placed in E", s.id)));
        }
        let mut seen = HashSet::with_capacity(members.len() + externals.len());
        for s in members.iter().chain(&externals) {
            if !seen.insert(s.id.as_str()) {
                return Err(MintError::Partition(format!("sample id {} appears more than once", s.id)));
            }
        }
        Ok(Self {
            members,
            externals,
            warnings: Vec::new(),
        })
    }

    pub fn members(&self) -> &[Sample] {
        &self.members
    }

    pub fn externals(&self) -> &[Sample] {
        &self.externals
    }

    /// Members followed by externals.
    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.members.iter().chain(&self.externals)
    }

    pub fn len(&self) -> usize {
        self.members.len() + self.externals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.members.iter().map(|s| s.id.clone()).collect()
    }

    pub fn external_ids(&self) -> Vec<String> {
        self.externals.iter().map(|s| s.id.clone()).collect()
    }

    /// Digest over every sample's id, tags, and pixel digest, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in self.iter() {
            h.update(s.id.as_bytes());
            h.update([0, s.partition.target() as u8]);
            h.update(s.source_dataset.as_bytes());
            h.update(s.class_label.map_or(u64::MAX, |c| c as u64).to_le_bytes());
            h.update(s.digest().as_bytes());
        }
        hex(&h.finalize())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Procedural stand-in for a face corpus: oriented gratings whose
/// orientation and frequency encode the class, plus a random blob and pixel
/// noise. External sources draw from the same family with a parameter
/// offset measured in units of the class spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDataConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub external_count: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Grating frequency of class 0, in cycles per image.
    pub base_frequency: f64,
    /// Frequency increment between consecutive classes.
    pub frequency_step: f64,
    /// Half-width of the uniform orientation jitter, radians.
    pub orientation_jitter: f64,
    /// Half-width of the uniform frequency jitter, cycles per image.
    pub frequency_jitter: f64,
    pub noise_std: f64,
    /// One external source per entry; each shifts orientation by
    /// `offset * pi / n_classes` and frequency by `offset * frequency_step`.
    pub external_offsets: Vec<f64>,
    pub seed: u64,
    /// Seed for the external side; defaults to `seed`.
    pub external_seed: Option<u64>,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            samples_per_class: 1000,
            external_count: 4000,
            image_size: 32,
            channels: 1,
            base_frequency: 2.0,
            frequency_step: 1.0,
            orientation_jitter: 0.25,
            frequency_jitter: 0.4,
            noise_std: 0.1,
            external_offsets: vec![0.5, -0.5],
            seed: 0,
            external_seed: None,
        }
    }
}

pub const MEMBER_SOURCE: &str = "synthetic-members";

pub fn external_source_name(index: usize) -> String {
    let letter = (b'a' + (index % 26) as u8) as char;
    format!("synthetic-external-{letter}")
}

struct GratingParams {
    orientation: f64,
    frequency: f64,
    phase: f64,
    blob_center: (f64, f64),
    blob_radius: f64,
    blob_amplitude: f64,
}

impl SyntheticDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(MintError::Config(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.samples_per_class < 100 {
            return Err(MintError::Config(format!(
                "samples_per_class must be >= 100, got {}",
                self.samples_per_class
            )));
        }
        if self.image_size < 4 {
            return Err(MintError::Config("image_size must be >= 4".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(MintError::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.external_count > 0 && self.external_offsets.is_empty() {
            return Err(MintError::Config("external_offsets needs at least one source".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(MintError::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    fn draw_params(&self, rng: &mut impl Rng, class: usize, offset: f64) -> GratingParams {
        let spacing = PI / self.n_classes as f64;
        let jitter = |rng: &mut dyn rand::RngCore, half: f64| {
            if half > 0.0 {
                rng.random_range(-half..half)
            } else {
                0.0
            }
        };
        GratingParams {
            orientation: class as f64 * spacing + offset * spacing + jitter(rng, self.orientation_jitter),
            frequency: self.base_frequency
                + (class as f64 + offset) * self.frequency_step
                + jitter(rng, self.frequency_jitter),
            phase: rng.random_range(0.0..2.0 * PI),
            blob_center: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
            blob_radius: rng.random_range(0.08..0.2),
            blob_amplitude: rng.random_range(-0.3..0.3),
        }
    }

    fn render(&self, rng: &mut impl Rng, p: &GratingParams) -> Tensor<f32> {
        let n = self.image_size;
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
        let (c, s) = (p.orientation.cos(), p.orientation.sin());
        let mut data = Vec::with_capacity(self.channels * n * n);
        for ch in 0..self.channels {
            let phase = p.phase + ch as f64 * PI / 3.0;
            for y in 0..n {
                for x in 0..n {
                    let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
                    let grating = (2.0 * PI * p.frequency * (u * c + v * s) + phase).cos();
                    let (du, dv) = (u - p.blob_center.0, v - p.blob_center.1);
                    let blob = (-(du * du + dv * dv) / (2.0 * p.blob_radius * p.blob_radius)).exp();
                    let mut value = 0.5 + 0.3 * grating + p.blob_amplitude * blob;
                    if self.noise_std > 0.0 {
                        value += noise.sample(rng);
                    }
                    data.push(value.clamp(0.0, 1.0) as f32);
                }
            }
        }
        Tensor::new(vec![self.channels, n, n], data).expect("image shape")
    }
}

/// Generates D (class-labelled members) and E (unlabelled externals from
/// the offset sources). Bit-deterministic for a given config: every sample
/// draws from its own stream keyed by partition and index.
pub fn generate_synthetic_dataset(config: &SyntheticDataConfig) -> Result<DatasetPartition> {
    config.validate()?;
    let member_root = RandomStream::new(config.seed).derive_named("member");
    let external_seed = config.external_seed.unwrap_or(config.seed);
    let external_root = RandomStream::new(external_seed).derive_named("external");

    let n_members = config.n_classes * config.samples_per_class;
    let members = (0..n_members)
        .map(|i| {
            let class = i % config.n_classes;
            let mut rng = member_root.derive(i as u64).rng();
            let p = config.draw_params(&mut rng, class, 0.0);
            Sample {
                id: format!("d-c{class}-{i:06}"),
                image: config.render(&mut rng, &p),
                partition: Partition::Member,
                source_dataset: MEMBER_SOURCE.into(),
                class_label: Some(class),
            }
        })
        .collect();
    let externals = (0..config.external_count)
        .map(|i| {
            let source = i % config.external_offsets.len();
            let mut rng = external_root.derive(i as u64).rng();
            let class = rng.random_range(0..config.n_classes);
            let p = config.draw_params(&mut rng, class, config.external_offsets[source]);
            Sample {
                id: format!("e-{}-{i:06}", (b'a' + (source % 26) as u8) as char),
                image: config.render(&mut rng, &p),
                partition: Partition::External,
                source_dataset: external_source_name(source),
                class_label: None,
            }
        })
        .collect();

    let mut partition = DatasetPartition::new(members, externals)?;
    if config.external_offsets.iter().all(|&o| o == 0.0) && external_seed == config.seed {
        let msg = "external offset is 0 and D/E share a seed: D and E are identically distributed, \
                   so any membership signal must come from the audited model's training alone"
            .to_string();
        log::warn!("{msg}");
        partition.warnings.push(msg);
    }
    Ok(partition)
}

// ---------------------------------------------------------------------------
// Image ingestion
// ---------------------------------------------------------------------------

/// Target geometry for decoded images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocess {
    pub size: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self { size: 32, channels: 1 }
    }
}

/// Decodes a PNG/PGM byte buffer into a `C x size x size` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8], spec: &Preprocess) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes).map_err(|e| MintError::Image(e.to_string()))?;
    Ok(preprocess_image(img, spec))
}

pub fn preprocess_image(img: image::DynamicImage, spec: &Preprocess) -> Tensor<f32> {
    use image::imageops::FilterType;
    let n = spec.size as u32;
    let img = if img.width() != n || img.height() != n {
        img.resize_exact(n, n, FilterType::Triangle)
    } else {
        img
    };
    let data: Vec<f32> = if spec.channels == 1 {
        img.to_luma8().into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect()
    } else {
        // RGB interleaved -> planar
        let rgb = img.to_rgb8().into_raw();
        let plane = (n * n) as usize;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = f32::from(px[c]) / 255.0;
            }
        }
        out
    };
    Tensor::new(vec![spec.channels, spec.size, spec.size], data).expect("preprocessed shape")
}

/// Encodes a `1 x H x W` or `3 x H x W` tensor in `[0, 1]` as PNG, rounding to 8 bits.
pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
        return Err(MintError::Image(format!("cannot encode a tensor of shape {shape:?} as PNG")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let data = image.data();
    let dynamic = if c == 1 {
        let buf = image::GrayImage::from_raw(w as u32, h as u32, data.iter().map(|&v| q(v)).collect())
            .expect("buffer size matches");
        image::DynamicImage::ImageLuma8(buf)
    } else {
        let raw = (0..plane).flat_map(|i| (0..3).map(move |ch| q(data[ch * plane + i]))).collect();
        image::DynamicImage::ImageRgb8(image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches"))
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| MintError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub samples: Vec<Sample>,
    /// `(relative path, reason)` for files that could not be decoded.
    pub skipped: Vec<(String, String)>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm"];

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_images(root, &path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Reads every PNG/PGM under `dir` (recursively, sorted by path). Ids are
/// the relative paths; unreadable files are logged and reported in
/// [`Ingested::skipped`].
pub fn ingest_image_dir(
    dir: impl AsRef<Path>,
    partition: Partition,
    spec: &Preprocess,
    source_dataset: &str,
) -> Result<Ingested> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    collect_images(dir, dir, &mut paths)?;
    paths.sort();
    if paths.is_empty() {
        return Err(MintError::Empty(format!("no PNG/PGM images under {}", dir.display())));
    }
    let mut out = Ingested::default();
    for path in paths {
        let rel = path
            .strip_prefix(dir)
            .unwrap_or(&path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        match fs::read(&path).map_err(|e| MintError::Image(e.to_string())).and_then(|b| decode_image(&b, spec)) {
            Ok(image) => out.samples.push(Sample {
                id: rel,
                image,
                partition,
                source_dataset: source_dataset.to_string(),
                class_label: None,
            }),
            Err(e) => {
                log::warn!("skipping {rel}: {e}");
                out.skipped.push((rel, e.to_string()));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Split planning
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_member: usize,
    pub train_external: usize,
    pub test_member: usize,
    pub test_external: usize,
}

/// Disjoint, balanced MINT train/test id sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mint_train: Vec<String>,
    pub mint_test: Vec<String>,
    pub counts: SplitCounts,
}

/// Member half of a balanced total (members take the odd sample).
fn halves(total: usize) -> (usize, usize) {
    (total.div_ceil(2), total / 2)
}

/// Plans a split over explicit id pools. Member ids must be samples that
/// trained the audited model.
pub fn plan_split_ids(
    member_ids: &[String],
    external_ids: &[String],
    n_mint_train: usize,
    n_mint_test: usize,
    seed: u64,
) -> Result<SplitPlan> {
    let (train_m, train_e) = halves(n_mint_train);
    let (test_m, test_e) = halves(n_mint_test);
    let (need_m, need_e) = (train_m + test_m, train_e + test_e);
    if need_m > member_ids.len() || need_e > external_ids.len() {
        return Err(MintError::InsufficientSamples {
            need_member: need_m,
            need_external: need_e,
            have_member: member_ids.len(),
            have_external: external_ids.len(),
        });
    }
    let root = RandomStream::new(seed).derive_named("split");
    let pick = |ids: &[String], tag: &str| {
        let mut v = ids.to_vec();
        v.sort();
        v.shuffle(&mut root.derive_named(tag).rng());
        v
    };
    let members = pick(member_ids, "member");
    let externals = pick(external_ids, "external");

    let mut mint_train: Vec<String> = members[..train_m].to_vec();
    mint_train.extend_from_slice(&externals[..train_e]);
    let mut mint_test: Vec<String> = members[train_m..train_m + test_m].to_vec();
    mint_test.extend_from_slice(&externals[train_e..train_e + test_e]);
    Ok(SplitPlan {
        mint_train,
        mint_test,
        counts: SplitCounts {
            train_member: train_m,
            train_external: train_e,
            test_member: test_m,
            test_external: test_e,
        },
    })
}

pub fn plan_split(
    partition: &DatasetPartition,
    n_mint_train: usize,
    n_mint_test: usize,
    seed: u64,
) -> Result<SplitPlan> {
    plan_split_ids(
        &partition.member_ids(),
        &partition.external_ids(),
        n_mint_train,
        n_mint_test,
        seed,
    )
}

// ---------------------------------------------------------------------------
// On-disk dataset: manifest JSON + packed pixels
// ---------------------------------------------------------------------------

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const DATASET_IMAGES: &str = "images.bin";
const IMAGES_MAGIC: &[u8; 8] = b"MINTDS01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub partition: Partition,
    pub class_label: Option<usize>,
    pub source_dataset: String,
    pub shape: Vec<usize>,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_digest: String,
    pub member_count: usize,
    pub external_count: usize,
    pub config: Option<SyntheticDataConfig>,
    pub samples: Vec<ManifestEntry>,
}

pub fn save_dataset(
    partition: &DatasetPartition,
    config: Option<&SyntheticDataConfig>,
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        dataset_digest: partition.digest(),
        member_count: partition.members().len(),
        external_count: partition.externals().len(),
        config: config.cloned(),
        samples: partition
            .iter()
            .map(|s| ManifestEntry {
                id: s.id.clone(),
                partition: s.partition,
                class_label: s.class_label,
                source_dataset: s.source_dataset.clone(),
                shape: s.image.shape().to_vec(),
                digest: s.digest(),
            })
            .collect(),
    };
    fs::write(dir.join(DATASET_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;

    let mut bytes = Vec::with_capacity(16 + partition.iter().map(|s| 4 * s.image.len()).sum::<usize>());
    bytes.extend_from_slice(IMAGES_MAGIC);
    bytes.extend_from_slice(&(partition.len() as u64).to_le_bytes());
    for s in partition.iter() {
        for v in s.image.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(dir.join(DATASET_IMAGES))?.write_all(&bytes)?;
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetPartition, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(DATASET_MANIFEST);
    let images_path = dir.join(DATASET_IMAGES);
    let artifact = |path: &Path, reason: String| MintError::Artifact {
        path: path.to_path_buf(),
        reason,
    };
    let manifest: DatasetManifest = serde_json::from_slice(
        &fs::read(&manifest_path).map_err(|e| artifact(&manifest_path, e.to_string()))?,
    )?;
    let mut bytes = Vec::new();
    fs::File::open(&images_path)
        .map_err(|e| artifact(&images_path, e.to_string()))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != IMAGES_MAGIC {
        return Err(artifact(&images_path, "bad magic".into()));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if count != manifest.samples.len() {
        return Err(artifact(
            &images_path,
            format!("{count} images but manifest lists {}", manifest.samples.len()),
        ));
    }
    let mut offset = 16;
    let (mut members, mut externals) = (Vec::new(), Vec::new());
    for e in &manifest.samples {
        let n: usize = e.shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(artifact(&images_path, format!("truncated at offset {offset}")));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset = end;
        let sample = Sample {
            id: e.id.clone(),
            image: Tensor::new(e.shape.clone(), data)?,
            partition: e.partition,
            source_dataset: e.source_dataset.clone(),
            class_label: e.class_label,
        };
        if sample.digest() != e.digest {
            return Err(artifact(&images_path, format!("digest mismatch for {}", e.id)));
        }
        match e.partition {
            Partition::Member => members.push(sample),
            Partition::External => externals.push(sample),
        }
    }
    let partition = DatasetPartition::new(members, externals)?;
    if partition.digest() != manifest.dataset_digest {
        return Err(artifact(&manifest_path, "dataset digest mismatch".into()));
    }
    Ok((partition, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SyntheticDataConfig {
        SyntheticDataConfig {
            samples_per_class: 100,
            external_count: 200,
            ..SyntheticDataConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let p = generate_synthetic_dataset(&small_config()).unwrap();
        assert_eq!(p.members().len(), 400);
        assert_eq!(p.externals().len(), 200);
        assert!(p.members().iter().all(|s| s.class_label.is_some()));
        assert!(p.externals().iter().all(|s| s.class_label.is_none()));
        let sources: HashSet<_> = p.externals().iter().map(|s| s.source_dataset.as_str()).collect();
        assert_eq!(sources.len(), 2);
        for s in p.iter() {
            assert_eq!(s.image.shape(), &[1, 32, 32]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_dataset(&small_config()).unwrap();
        let b = generate_synthetic_dataset(&small_config()).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = generate_synthetic_dataset(&SyntheticDataConfig { seed: 1, ..small_config() }).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn degenerate_config_warns() {
        let cfg = SyntheticDataConfig {
            external_offsets: vec![0.0, 0.0],
            ..small_config()
        };
        let p = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(p.warnings.len(), 1);
        assert!(generate_synthetic_dataset(&small_config()).unwrap().warnings.is_empty());
    }

    #[test]
    fn rejects_tiny_configs() {
        let cfg = SyntheticDataConfig { n_classes: 1, ..small_config() };
        assert!(generate_synthetic_dataset(&cfg).is_err());
        let cfg = SyntheticDataConfig { samples_per_class: 99, ..small_config() };
        assert!(generate_synthetic_dataset(&cfg).is_err());
    }

    #[test]
    fn partition_rejects_shared_ids_and_wrong_tags() {
        let p = generate_synthetic_dataset(&small_config()).unwrap();
        let mut ext = p.externals().to_vec();
        ext[0].id = p.members()[0].id.clone();
        assert!(DatasetPartition::new(p.members().to_vec(), ext).is_err());
        let mut ext = p.externals().to_vec();
        ext.push(p.members()[0].clone());
        assert!(DatasetPartition::new(p.members().to_vec(), ext).is_err());
    }

    #[test]
    fn split_is_balanced_and_disjoint() {
        let members: Vec<String> = (0..4000).map(|i| format!("m{i}")).collect();
        let externals: Vec<String> = (0..4000).map(|i| format!("e{i}")).collect();
        let plan = plan_split_ids(&members, &externals, 1000, 1000, 3).unwrap();
        assert_eq!(plan.counts, SplitCounts {
            train_member: 500,
            train_external: 500,
            test_member: 500,
            test_external: 500
        });
        let train: HashSet<_> = plan.mint_train.iter().collect();
        assert!(plan.mint_test.iter().all(|id| !train.contains(id)));

        let again = plan_split_ids(&members, &externals, 1000, 1000, 3).unwrap();
        assert_eq!(plan, again);
        let other = plan_split_ids(&members, &externals, 1000, 1000, 4).unwrap();
        assert_ne!(plan.mint_train, other.mint_train);
        assert_eq!(plan.counts, other.counts);
    }

    #[test]
    fn split_reports_shortfall() {
        let members: Vec<String> = (0..10).map(|i| format!("m{i}")).collect();
        let err = plan_split_ids(&members, &members, 20, 2, 0).unwrap_err();
        assert!(matches!(err, MintError::InsufficientSamples { need_member: 11, have_member: 10, .. }));
    }

    #[test]
    fn dataset_round_trips_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let p = generate_synthetic_dataset(&cfg).unwrap();
        let manifest = save_dataset(&p, Some(&cfg), dir.path()).unwrap();
        let (back, m2) = load_dataset(dir.path()).unwrap();
        assert_eq!(back.digest(), p.digest());
        assert_eq!(manifest, m2);
    }
}
