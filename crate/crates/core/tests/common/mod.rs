#![allow(dead_code)]

use std::collections::BTreeMap;

use mint_core::aad::AadRecord;
use mint_core::audited::{ModelOutcome, TapName};
use mint_core::data::Partition;
use nnkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small tap shapes that still admit a CNN on blocks 1 to 3.
pub const SMALL_TAPS: [[usize; 3]; 4] = [[2, 4, 4], [3, 4, 4], [4, 4, 4], [5, 2, 2]];
pub const SMALL_EMBEDDING: usize = 6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
}

/// Record with uniform `[0, 1)` activations on every tap and a `[0, 0.1)`
/// embedding.
pub fn noise_record(rng: &mut impl Rng, id: String, membership: Partition) -> AadRecord {
    let mut taps = BTreeMap::new();
    for (tap, shape) in TapName::CONV_BLOCKS.into_iter().zip(SMALL_TAPS) {
        let n = shape.iter().product();
        taps.insert(
            tap,
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f32>()).collect()).unwrap(),
        );
    }
    AadRecord {
        sample_id: id,
        membership: Some(membership),
        taps,
        outcome: Some(ModelOutcome {
            embedding: (0..SMALL_EMBEDDING).map(|_| 0.1 * rng.random::<f32>()).collect(),
        }),
        source_dataset: match membership {
            Partition::Member => "members".into(),
            Partition::External => "externals".into(),
        },
        untrained_model: false,
    }
}

/// Noise records whose first channel of every tap (and first outcome
/// coordinate) is the membership sign, +1 or -1.
pub fn leaked_records(per_side: usize, seed: u64) -> Vec<AadRecord> {
    let mut rng = rng(seed);
    let mut out = Vec::with_capacity(2 * per_side);
    for i in 0..2 * per_side {
        let membership = if i % 2 == 0 { Partition::Member } else { Partition::External };
        let bit = if membership == Partition::Member { 1.0 } else { -1.0 };
        let mut r = noise_record(&mut rng, format!("r{i:05}"), membership);
        for t in r.taps.values_mut() {
            let plane = t.len() / t.shape()[0];
            t.data_mut()[..plane].iter_mut().for_each(|v| *v = bit);
        }
        r.outcome.as_mut().unwrap().embedding[0] = bit;
        out.push(r);
    }
    out
}

/// Noise records with no relation to membership.
pub fn null_records(per_side: usize, seed: u64) -> Vec<AadRecord> {
    let mut rng = rng(seed);
    (0..2 * per_side)
        .map(|i| {
            let membership = if i % 2 == 0 { Partition::Member } else { Partition::External };
            noise_record(&mut rng, format!("n{i:05}"), membership)
        })
        .collect()
}
