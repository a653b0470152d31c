//! Loss functions. Each returns the loss value and its gradient with
//! respect to the network output.

use crate::{NnError, Real, Result, Tensor};

/// Probabilities are clamped to `[EPSILON, 1 - EPSILON]` before taking logs.
pub const EPSILON: f64 = 1e-7;

/// Binary cross-entropy on a sigmoid probability plus an L1 penalty over
/// `weights`:
///
/// `-[y ln p + (1 - y) ln(1 - p)] + l1_coefficient * sum |w|`
///
/// Returns `(loss, d loss / d p)`; the gradient is taken at the clamped `p`.
pub fn bce_l1_loss<'a, T: Real>(
    prediction: T,
    label: T,
    weights: impl IntoIterator<Item = &'a Tensor<T>>,
    l1_coefficient: T,
) -> Result<(T, T)> {
    let (loss, grad) = bce(prediction, label)?;
    let penalty: T = weights.into_iter().map(Tensor::abs_sum).sum();
    Ok((loss + l1_coefficient * penalty, grad))
}

pub(crate) fn bce<T: Real>(prediction: T, label: T) -> Result<(T, T)> {
    let one = T::one();
    if label != T::zero() && label != one {
        return Err(NnError::InvalidLabel(label.to_f64().unwrap_or(f64::NAN)));
    }
    let eps = T::from_f64_lossy(EPSILON);
    let p = prediction.max(eps).min(one - eps);
    let loss = -(label * p.ln() + (one - label) * (one - p).ln());
    let grad = -label / p + (one - label) / (one - p);
    Ok((loss, grad))
}

/// Softmax cross-entropy over raw logits. Returns `(loss, d loss / d logits)`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(NnError::InvalidClass {
            label,
            classes: z.len(),
        });
    }
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() - (z[label] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| e / total - if i == label { T::one() } else { T::zero() })
        .collect();
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}
