//! Parameter checkpoint format.
//!
//! ```text
//! magic        8 bytes   "MINTNN01"
//! manifest_len u64 LE
//! manifest     UTF-8 JSON (input shape, layer specs, parameter shapes)
//! payload      f32 LE, each layer's weight then bias, in manifest order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{LayerSpec, Network, NnError, Param, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"MINTNN01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub parameters: Vec<ParameterEntry>,
}

impl Manifest {
    pub fn of(net: &Network<f32>) -> Self {
        let mut parameters = Vec::new();
        for (layer, p) in net.params().iter().enumerate() {
            if let Some(p) = p {
                parameters.push(ParameterEntry {
                    layer,
                    name: "weight".into(),
                    shape: p.weight.shape().to_vec(),
                });
                parameters.push(ParameterEntry {
                    layer,
                    name: "bias".into(),
                    shape: p.bias.shape().to_vec(),
                });
            }
        }
        Self {
            input_shape: net.input_shape().to_vec(),
            layers: net.layers().to_vec(),
            parameters,
        }
    }
}

pub fn encode(net: &Network<f32>) -> Vec<u8> {
    let manifest = serde_json::to_vec(&Manifest::of(net)).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + manifest.len() + 4 * net.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for p in net.params().iter().flatten() {
        for v in p.weight.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Network<f32>> {
    let bad = |msg: String| NnError::Checkpoint(msg);
    if bytes.len() < 16 {
        return Err(bad(format!("file too short ({} bytes) for header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic at offset 0; expected \"MINTNN01\"".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest_end = 16usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(format!("manifest length {len} at offset 8 exceeds file size {}", bytes.len())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])
        .map_err(|e| bad(format!("manifest at offset 16 is not valid JSON: {e}")))?;

    let mut offset = manifest_end;
    let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(bad(format!(
                "payload truncated at offset {offset}: need {} bytes, {} remain",
                4 * n,
                bytes.len() - offset
            )));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset = end;
        Tensor::new(shape.to_vec(), data)
    };

    let mut params: Vec<Option<Param<f32>>> = vec![None; manifest.layers.len()];
    let mut entries = manifest.parameters.iter();
    for (i, spec) in manifest.layers.iter().enumerate() {
        if spec.weight_shape().is_none() {
            continue;
        }
        let (Some(w), Some(b)) = (entries.next(), entries.next()) else {
            return Err(bad(format!("manifest is missing parameters for layer {i}")));
        };
        if w.layer != i || b.layer != i || w.name != "weight" || b.name != "bias" {
            return Err(bad(format!("manifest parameter order broken at layer {i}")));
        }
        params[i] = Some(Param {
            weight: read(&w.shape)?,
            bias: read(&b.shape)?,
        });
    }
    if entries.next().is_some() {
        return Err(bad("manifest lists parameters for non-parametric layers".into()));
    }
    if offset != bytes.len() {
        return Err(bad(format!(
            "{} trailing bytes after payload at offset {offset}",
            bytes.len() - offset
        )));
    }
    Network::from_parts(manifest.layers, &manifest.input_shape, params)
}

pub fn save(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode(net))?;
    file.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_net() -> Network<f32> {
        Network::new(
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalMaxPerMap,
                LayerSpec::Dense {
                    in_units: 2,
                    out_units: 1,
                },
                LayerSpec::Sigmoid,
            ],
            &[1, 4, 4],
            9,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = sample_net();
        let bytes = encode(&net);
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.layers(), net.layers());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn truncation_and_magic_are_detected() {
        let bytes = encode(&sample_net());
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("truncated at offset"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("magic"));
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).unwrap_err().to_string().contains("trailing"));
    }
}
