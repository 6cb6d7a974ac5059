//! Categorical cross-entropy, plain and fused with softmax.

use crate::error::{Error, Result};
use crate::layers::softmax;
use crate::tensor::{Real, Tensor};

const PROB_FLOOR: f64 = 1e-12;

fn check_onehot<T: Real>(onehot: &Tensor<T>, like: &Tensor<T>) -> Result<(usize, usize)> {
    let (b, k) = match *like.shape() {
        [b, k] => (b, k),
        _ => {
            return Err(Error::shape(format!(
                "loss expects [batch, classes], got {:?}",
                like.shape()
            )))
        }
    };
    if onehot.shape() != like.shape() {
        return Err(Error::shape(format!(
            "labels {:?} do not match predictions {:?}",
            onehot.shape(),
            like.shape()
        )));
    }
    for (row_idx, row) in onehot.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Label(format!("row {row_idx} is not one-hot")));
        }
    }
    Ok((b, k))
}

/// `-(1/B) sum y log p` with `p` clamped to `[1e-12, 1]`, and its exact
/// derivative with respect to `probs`.
pub fn categorical_cross_entropy<T: Real>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    let (b, k) = check_onehot(onehot, probs)?;
    for (i, row) in probs.data().chunks(k).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Argument(format!("probability row {i} sums to {s}")));
        }
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.data().iter().zip(onehot.data()) {
        let raw = p.as_f64();
        let pc = raw.clamp(PROB_FLOOR, 1.0);
        let y = y.as_f64();
        loss -= y * pc.ln();
        // the clamp is flat outside [floor, 1]
        let d = if !(PROB_FLOOR..=1.0).contains(&raw) {
            0.0
        } else {
            -y / (b as f64 * pc)
        };
        grad.push(T::from_f64(d));
    }
    Ok((
        loss / b as f64,
        Tensor::from_parts(probs.shape().to_vec(), grad),
    ))
}

#[derive(Debug, Clone)]
pub struct FusedLoss<T: Real> {
    pub loss: f64,
    pub probs: Tensor<T>,
    /// `(p - y) / B`
    pub grad_logits: Tensor<T>,
}

/// Softmax followed by cross-entropy, evaluated in log-sum-exp form.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    onehot: &Tensor<T>,
) -> Result<FusedLoss<T>> {
    let (b, k) = check_onehot(onehot, logits)?;
    let mut loss = 0.0;
    for (row, y) in logits.data().chunks(k).zip(onehot.data().chunks(k)) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (&x, &t) in row.iter().zip(y) {
            loss -= t.as_f64() * (x - lse);
        }
    }
    let probs = softmax(logits);
    let inv_b = 1.0 / b as f64;
    let grad = probs
        .data()
        .iter()
        .zip(onehot.data())
        .map(|(&p, &y)| T::from_f64((p.as_f64() - y.as_f64()) * inv_b))
        .collect();
    Ok(FusedLoss {
        loss: loss * inv_b,
        grad_logits: Tensor::from_parts(logits.shape().to_vec(), grad),
        probs,
    })
}
