use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn batch_dims(logits: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *logits.shape() {
        [c] => Ok((1, c)),
        [n, c] => Ok((n, c)),
        _ => Err(Error::dim(format!("{what}: logits must be [N, C], got {:?}", logits.shape()))),
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. `logits`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = batch_dims(logits, "softmax_xent")?;
    if labels.len() != n {
        return Err(Error::dim(format!("softmax_xent: {n} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Domain(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = vec![0.0; n * c];
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for ((row, g), &label) in logits.data().chunks_exact(c).zip(grad.chunks_exact_mut(c)).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        for (gv, v) in g.iter_mut().zip(row) {
            *gv = (v - lse).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean over the batch of the summed per-class binary cross-entropy with
/// logits; `targets` holds 0/1 values with the shape of `logits`.
pub fn sigmoid_bce(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let (n, _) = batch_dims(logits, "sigmoid_bce")?;
    if targets.shape() != logits.shape() {
        return Err(Error::dim(format!(
            "sigmoid_bce: targets {:?} vs logits {:?}",
            targets.shape(),
            logits.shape()
        )));
    }
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Domain("sigmoid_bce targets must be 0 or 1".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.data().iter().zip(targets.data()) {
        // log(1 + e^z) - t z, evaluated without overflow
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
        let s = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        grad.push((s - t) * inv_n);
    }
    Ok((loss * inv_n, Tensor::new(logits.shape().to_vec(), grad)?))
}
