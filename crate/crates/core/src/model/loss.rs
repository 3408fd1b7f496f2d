use ndarray::{Array2, ArrayView1, ArrayView2};

use super::ModelError;
use crate::scalar::Real;

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Real>(logits: ArrayView1<T>) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_rows<T: Real>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (row, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        for (d, p) in dst.iter_mut().zip(softmax(row)) {
            *d = p;
        }
    }
    out
}

/// `−log softmax(logits)[label]`, computed as `logsumexp(z) − z[label]`.
pub fn cross_entropy<T: Real>(logits: ArrayView1<T>, label: usize) -> Result<T, ModelError> {
    if label >= logits.len() {
        return Err(ModelError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
    Ok(max + sum.ln() - logits[label])
}

/// Weighted mean cross-entropy over a batch and its gradient with respect to the logits.
///
/// With per-sample weights `w_i` the loss is `Σ w_i ℓ_i / Σ w_i`; without weights every
/// sample counts once.
pub fn batch_cross_entropy<T: Real>(
    logits: ArrayView2<T>,
    labels: &[usize],
    weights: Option<&[T]>,
) -> Result<(T, Array2<T>), ModelError> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(ModelError::BatchMismatch(format!("{} labels for {b} logit rows", labels.len())));
    }
    let ws: Vec<T> = match weights {
        Some(w) => labels
            .iter()
            .map(|&l| w.get(l).copied().ok_or(ModelError::LabelOutOfRange { label: l, classes: w.len() }))
            .collect::<Result<_, _>>()?,
        None => vec![T::one(); b],
    };
    let total_w: T = ws.iter().copied().sum();
    if !(total_w > T::zero()) {
        return Err(ModelError::BatchMismatch("sample weights sum to zero".into()));
    }
    let mut loss = T::zero();
    let mut grad = Array2::zeros((b, k));
    for (i, row) in logits.rows().into_iter().enumerate() {
        loss += ws[i] * cross_entropy(row, labels[i])?;
        let scale = ws[i] / total_w;
        for (j, p) in softmax(row).into_iter().enumerate() {
            let target = if j == labels[i] { T::one() } else { T::zero() };
            grad[[i, j]] = (p - target) * scale;
        }
    }
    Ok((loss / total_w, grad))
}
