//! Binary feature cache ("MINTFC01").
//!
//! ```text
//! magic      8 bytes  "MINTFC01"
//! version    u32      1
//! kind       u8       1-4 conv layer, 5 model outcome, 6 all conv layers
//! form       u8       0 vector, 1 maps
//! count      u64      number of records
//! ndim       u32      then ndim x u64 per-record feature shape
//! record     u32 id length, id bytes, u8 membership (0 member, 1 external),
//!            u32 source length, source bytes, prod(shape) x f32
//! ```
//!
//! All integers are little-endian. Decoding is all-or-nothing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aad::{
    AuditableDataKind, FeatureForm, FeatureMaps, FeatureOptions, FeatureSet, FeatureStore, FeatureVector, Features,
    LabeledFeatures,
};
use crate::data::Partition;
use crate::{MintError, Result};

pub const MAGIC: &[u8; 8] = b"MINTFC01";
pub const VERSION: u32 = 1;

fn form_tag(form: FeatureForm) -> u8 {
    match form {
        FeatureForm::Vector => 0,
        FeatureForm::Maps => 1,
    }
}

fn membership_tag(p: Partition) -> u8 {
    match p {
        Partition::Member => 0,
        Partition::External => 1,
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_features(set: &FeatureSet) -> Vec<u8> {
    let per_record: usize = set.shape().iter().product();
    let mut out = Vec::with_capacity(32 + set.len() * (per_record * 4 + 48));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(set.kind().tag());
    out.push(form_tag(set.form()));
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.extend_from_slice(&(set.shape().len() as u32).to_le_bytes());
    for &d in set.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for item in set.items() {
        put_str(&mut out, &item.sample_id);
        out.push(membership_tag(item.membership));
        put_str(&mut out, &item.source_dataset);
        for v in item.features.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> MintError {
        MintError::CacheFormat {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| MintError::CacheFormat {
            offset: start,
            reason: format!("{what} is not valid UTF-8"),
        })
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(MintError::CacheFormat {
            offset: 0,
            reason: "bad magic (expected MINTFC01)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(MintError::CacheFormat {
            offset: 8,
            reason: format!("unsupported version {version}"),
        });
    }
    let kind_offset = r.pos;
    let kind = AuditableDataKind::from_tag(r.u8("kind tag")?).ok_or_else(|| MintError::CacheFormat {
        offset: kind_offset,
        reason: "unknown kind tag".into(),
    })?;
    let form = match r.u8("form tag")? {
        0 => FeatureForm::Vector,
        1 => FeatureForm::Maps,
        t => {
            return Err(MintError::CacheFormat {
                offset: kind_offset + 1,
                reason: format!("unknown form tag {t}"),
            })
        }
    };
    if form == FeatureForm::Maps && !matches!(kind, AuditableDataKind::ConvLayer(_)) {
        return Err(MintError::CacheFormat {
            offset: kind_offset,
            reason: format!("{kind} has no map form"),
        });
    }
    let count = r.u64("record count")?;
    let ndim_offset = r.pos;
    let ndim = r.u32("shape rank")? as usize;
    let expected_rank = match form {
        FeatureForm::Vector => 1,
        FeatureForm::Maps => 3,
    };
    if ndim != expected_rank && !(count == 0 && ndim == 0) {
        return Err(MintError::CacheFormat {
            offset: ndim_offset,
            reason: format!("rank {ndim} does not fit {form:?} features"),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = r.u64("shape extent")?;
        if d == 0 {
            return Err(r.fail("zero shape extent"));
        }
        shape.push(usize::try_from(d).map_err(|_| r.fail("shape extent overflows"))?);
    }
    let per_record = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| r.fail("shape product overflows"))?;
    // Each record needs at least 9 framing bytes plus its payload.
    let min_record = per_record.saturating_mul(4).saturating_add(9);
    if (count as u128) * (min_record as u128) > (bytes.len() - r.pos) as u128 {
        return Err(r.fail(format!("record count {count} exceeds the payload size")));
    }

    let mut items = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let sample_id = r.string("sample id")?;
        let membership = match r.u8("membership")? {
            0 => Partition::Member,
            1 => Partition::External,
            t => {
                r.pos -= 1;
                return Err(r.fail(format!("membership byte {t} is neither 0 nor 1")));
            }
        };
        let source_dataset = r.string("source dataset")?;
        let raw = r.take(per_record * 4, "feature payload")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let features = match form {
            FeatureForm::Vector => Features::Vector(FeatureVector { values, kind }),
            FeatureForm::Maps => Features::Maps(FeatureMaps {
                maps: nnkit::Tensor::new(shape.clone(), values)?,
                kind,
            }),
        };
        items.push(LabeledFeatures {
            sample_id,
            membership,
            source_dataset,
            features,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    FeatureSet::new(kind, form, shape, items)
}

pub fn cache_features(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_features(set))?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MintError::Artifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_features(&bytes)
}

pub const STORE_INDEX: &str = "features.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreIndex {
    options: FeatureOptions,
    files: Vec<StoreFile>,
    unavailable: Vec<Unavailable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreFile {
    auditable_data: AuditableDataKind,
    form: FeatureForm,
    file: String,
    records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Unavailable {
    auditable_data: AuditableDataKind,
    form: FeatureForm,
    reason: String,
}

/// Writes one cache file per set plus a `features.json` index.
pub fn save_store(store: &FeatureStore, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for set in store.sets() {
        let file = cache_file_name(set.kind(), set.form());
        cache_features(set, dir.join(&file))?;
        files.push(StoreFile {
            auditable_data: set.kind(),
            form: set.form(),
            file,
            records: set.len(),
        });
    }
    let unavailable = store
        .unavailable()
        .iter()
        .map(|((kind, form), reason)| Unavailable {
            auditable_data: *kind,
            form: *form,
            reason: reason.clone(),
        })
        .collect();
    let index = StoreIndex {
        options: store.options(),
        files,
        unavailable,
    };
    fs::write(dir.join(STORE_INDEX), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn load_store(dir: impl AsRef<Path>) -> Result<FeatureStore> {
    let dir = dir.as_ref();
    let index_path = dir.join(STORE_INDEX);
    let artifact = |path: &Path, reason: String| MintError::Artifact {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(&index_path).map_err(|e| artifact(&index_path, e.to_string()))?;
    let index: StoreIndex = serde_json::from_slice(&bytes).map_err(|e| artifact(&index_path, e.to_string()))?;
    let mut store = FeatureStore::new(index.options);
    for f in index.files {
        let path = dir.join(&f.file);
        let set = load_features(&path).map_err(|e| artifact(&path, e.to_string()))?;
        if set.kind() != f.auditable_data || set.form() != f.form || set.len() != f.records {
            return Err(artifact(&path, "contents do not match the index".into()));
        }
        store.insert(set);
    }
    for u in index.unavailable {
        store.mark_unavailable(u.auditable_data, u.form, u.reason);
    }
    Ok(store)
}

/// Conventional file name for a cached set, e.g. `vector-all_conv_layers.mintfc`.
pub fn cache_file_name(kind: AuditableDataKind, form: FeatureForm) -> String {
    let form = match form {
        FeatureForm::Vector => "vector",
        FeatureForm::Maps => "maps",
    };
    format!("{form}-{}.mintfc", kind.slug())
}
