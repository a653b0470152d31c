//! Mini-batch SGD training loop.
//!
//! Per-sample gradients inside a batch are computed in fixed chunks (which
//! may run in parallel) and reduced in chunk order, so the result does not
//! depend on the number of worker threads.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::loss::{bce, softmax_cross_entropy};
use crate::{sgd_step, Gradients, Mode, Network, NnError, RandomStream, Real, Result, Tensor, TrainConfig};

const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Single sigmoid output, targets in {0, 1}.
    BinaryCrossEntropy,
    /// Raw logits, targets are class indices.
    SoftmaxCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over batches of (mean data loss + L1 penalty).
    pub mean_loss: f64,
    /// Running train-mode accuracy over the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Eval-mode loss (data + L1) over the full training set after training.
    pub final_loss: f64,
    /// Eval-mode accuracy over the full training set after training.
    pub final_accuracy: f64,
}

struct SampleResult<T> {
    loss: f64,
    correct: bool,
    grads: Gradients<T>,
}

fn per_sample<T: Real>(
    net: &Network<T>,
    input: &Tensor<T>,
    target: usize,
    objective: Objective,
    stream: Option<RandomStream>,
) -> Result<SampleResult<T>> {
    let (output, cache) = net.forward(input, stream)?;
    let (loss, upstream, correct) = output_loss(&output, target, objective)?;
    let grads = net.backward(&cache, &upstream, T::zero())?;
    Ok(SampleResult {
        loss,
        correct,
        grads,
    })
}

fn output_loss<T: Real>(
    output: &Tensor<T>,
    target: usize,
    objective: Objective,
) -> Result<(f64, Tensor<T>, bool)> {
    match objective {
        Objective::BinaryCrossEntropy => {
            let p = output.data()[0];
            let label = T::from_usize(target).unwrap_or_else(T::nan);
            let (loss, dp) = bce(p, label)?;
            let correct = (p >= T::from_f64_lossy(0.5)) == (target == 1);
            Ok((loss.to_f64().unwrap_or(f64::NAN), Tensor::new(output.shape().to_vec(), vec![dp])?, correct))
        }
        Objective::SoftmaxCrossEntropy => {
            let (loss, grad) = softmax_cross_entropy(output, target)?;
            Ok((loss.to_f64().unwrap_or(f64::NAN), grad, argmax(output.data()) == target))
        }
    }
}

pub(crate) fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Trains `net` in place. The network is left in eval mode.
pub fn fit<T: Real>(
    net: &mut Network<T>,
    inputs: &[Tensor<T>],
    targets: &[usize],
    objective: Objective,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if inputs.len() != targets.len() {
        return Err(NnError::TargetCount {
            inputs: inputs.len(),
            targets: targets.len(),
        });
    }
    let root = RandomStream::new(config.seed);
    let l1_coefficient = config.effective_l1(inputs.len());
    let l1 = T::from_f64_lossy(l1_coefficient);
    let lr_config = *config;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    net.set_mode(Mode::Train);
    let result: Result<()> = (|| {
        for epoch in 0..config.epochs {
            let mut rng = root.derive_named("shuffle").derive(epoch as u64).rng();
            order.sort_unstable();
            order.shuffle(&mut rng);
            let dropout = root.derive_named("dropout").derive(epoch as u64);

            let (mut loss_sum, mut batches, mut correct) = (0.0f64, 0usize, 0usize);
            for (b, batch) in order.chunks(config.batch_size).enumerate() {
                let base = b * config.batch_size;
                let net_ref = &*net;
                let partials: Vec<Result<(Gradients<T>, f64, usize)>> = batch
                    .par_chunks(CHUNK)
                    .enumerate()
                    .map(|(c, chunk)| {
                        let mut acc: Option<Gradients<T>> = None;
                        let (mut loss, mut hits) = (0.0f64, 0usize);
                        for (k, &idx) in chunk.iter().enumerate() {
                            let stream = dropout.derive((base + c * CHUNK + k) as u64);
                            let r = per_sample(net_ref, &inputs[idx], targets[idx], objective, Some(stream))?;
                            loss += r.loss;
                            hits += usize::from(r.correct);
                            match acc.as_mut() {
                                Some(a) => a.accumulate(&r.grads),
                                None => acc = Some(r.grads),
                            }
                        }
                        Ok((acc.expect("chunks are nonempty"), loss, hits))
                    })
                    .collect();

                let mut total: Option<Gradients<T>> = None;
                let mut batch_loss = 0.0f64;
                for part in partials {
                    let (g, loss, hits) = part?;
                    batch_loss += loss;
                    correct += hits;
                    match total.as_mut() {
                        Some(t) => t.accumulate(&g),
                        None => total = Some(g),
                    }
                }
                let mut grads = total.expect("batches are nonempty");
                grads.scale(T::one() / T::from_usize(batch.len()).expect("batch length"));
                let penalty = l1_coefficient * net.l1_norm().to_f64().unwrap_or(f64::NAN);
                grads.add_l1_subgradient(net, l1);
                sgd_step(net, &grads, &lr_config)?;
                loss_sum += batch_loss / batch.len() as f64 + penalty;
                batches += 1;
            }
            epochs.push(EpochStats {
                epoch,
                mean_loss: if batches == 0 { 0.0 } else { loss_sum / batches as f64 },
                accuracy: if inputs.is_empty() { 0.0 } else { correct as f64 / inputs.len() as f64 },
            });
        }
        Ok(())
    })();
    net.set_mode(Mode::Eval);
    result?;

    let (final_loss, final_accuracy) = evaluate(net, inputs, targets, objective)?;
    let final_loss = final_loss + l1_coefficient * net.l1_norm().to_f64().unwrap_or(f64::NAN);
    Ok(TrainReport {
        epochs,
        final_loss,
        final_accuracy,
    })
}

/// Mean data loss and accuracy in eval mode (no penalty term).
pub fn evaluate<T: Real>(
    net: &Network<T>,
    inputs: &[Tensor<T>],
    targets: &[usize],
    objective: Objective,
) -> Result<(f64, f64)> {
    if inputs.len() != targets.len() {
        return Err(NnError::TargetCount {
            inputs: inputs.len(),
            targets: targets.len(),
        });
    }
    if inputs.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut eval_net = net.clone();
    eval_net.set_mode(Mode::Eval);
    let results: Vec<Result<(f64, bool)>> = inputs
        .par_iter()
        .zip(targets)
        .map(|(x, &t)| {
            let (out, _) = eval_net.forward(x, None)?;
            let (loss, _, correct) = output_loss(&out, t, objective)?;
            Ok((loss, correct))
        })
        .collect();
    let (mut loss, mut hits) = (0.0, 0usize);
    for r in results {
        let (l, c) = r?;
        loss += l;
        hits += usize::from(c);
    }
    let n = inputs.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::LayerSpec;

    #[test]
    fn mismatched_targets_are_rejected() {
        let mut net = Network::<f32>::new(
            vec![LayerSpec::Dense { in_units: 1, out_units: 1 }, LayerSpec::Sigmoid],
            &[1],
            0,
        )
        .unwrap();
        let x = vec![Tensor::vector(vec![1.0]).unwrap()];
        let err = fit(&mut net, &x, &[], Objective::BinaryCrossEntropy, &TrainConfig::default());
        assert!(matches!(err, Err(NnError::TargetCount { .. })));
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0]), 1);
    }
}
