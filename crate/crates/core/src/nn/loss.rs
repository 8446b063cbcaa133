use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax of `N x classes` logits (any trailing spatial size of 1).
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let classes = logits.shape().item();
    let mut p = Vec::with_capacity(logits.shape().len());
    for row in logits.data().chunks(classes.max(1)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let e: Vec<f64> = row.iter().map(|v| (v.f64() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        p.extend(e.iter().map(|v| v / z));
    }
    p
}

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let sh = logits.shape();
    let classes = sh.item();
    if labels.len() != sh.n {
        return Err(Error::dim("softmax_xent labels", sh.n, labels.len()));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Data(format!("label {l} of item {i} is outside [0, {classes})")));
    }
    let inv_n = 1.0 / sh.n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(sh.len());
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let e: Vec<f64> = row.iter().map(|v| (v.f64() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        loss += z.ln() + m - row[label].f64();
        for (c, v) in e.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.push(T::of((v / z - onehot) * inv_n));
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(sh, grad)?))
}

/// Fraction of rows whose first maximal logit is the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let classes = logits.shape().item();
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| crate::tensor::argmax(row) == Some(l))
        .count();
    hits as f64 / labels.len() as f64
}
