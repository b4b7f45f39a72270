use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Row-wise softmax computed in `f64` with max subtraction.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let [_, k] = logits.dims2()?;
    Ok(logits.data().chunks(k).map(|row| softmax(row)).collect())
}

pub fn softmax<T: Element>(row: &[T]) -> Vec<f64> {
    let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let [b, k] = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::dim(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let z: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - z[label];
        for (j, &v) in z.iter().enumerate() {
            let p = (v - log_sum).exp();
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64_lossy((p - onehot) / b as f64));
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, k], grad)?))
}
