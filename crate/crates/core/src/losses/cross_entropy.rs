use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// `-log softmax(logits)[label]` and its gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy(logits: ArrayView1<'_, f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    let n = logits.len();
    if label >= n {
        return Err(Error::LabelOutOfRange {
            label,
            num_labels: n,
        });
    }
    let (argmax, max) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &x)| if x > bm { (i, x) } else { (bi, bm) });
    let exps = logits.mapv(|x| (x - max).exp());
    // The argmax term is exactly 1; ln_1p over the rest keeps tiny losses accurate.
    let rest: f64 = exps.iter().enumerate().filter(|&(i, _)| i != argmax).map(|(_, e)| e).sum();
    let sum = 1.0 + rest;
    let loss = rest.ln_1p() - (logits[label] - max);
    let mut grad = exps / sum;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy over the rows of `logits`; the gradient is that of the mean.
pub fn cross_entropy_batch(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let b = logits.nrows();
    if labels.len() != b {
        return Err(Error::DimensionMismatch {
            what: "labels".into(),
            expected: b,
            actual: labels.len(),
        });
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, (row, &label)) in logits.axis_iter(Axis(0)).zip(labels).enumerate() {
        let (l, g) = cross_entropy(row, label)?;
        total += l;
        grad.row_mut(i).assign(&(g / b as f64));
    }
    Ok((total / b as f64, grad))
}
