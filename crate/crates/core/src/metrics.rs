//! Evaluation metrics for sampled motion: diversity, temporal smoothness,
//! reconstruction error, and identity consistency.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation pooled over samples, frames, and coordinates
/// (population convention). `samples` is `[N, T, d]`.
pub fn div_std(samples: &Tensor) -> Result<f64> {
    if samples.rank() != 3 || samples.shape()[0] == 0 {
        return Err(Error::shape(format!(
            "diversity needs a nonempty [samples, frames, dims] tensor, got {:?}",
            samples.shape()
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.data().iter().sum::<f64>() / n;
    let var = samples
        .data()
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    Ok(var.sqrt())
}

/// Mean squared second difference over frames and coordinates: how far the
/// sequence deviates from piecewise-linear motion. `seq` is `[T, d]`, T ≥ 3.
pub fn jerk(seq: &Tensor) -> Result<f64> {
    if seq.rank() != 2 {
        return Err(Error::shape(format!(
            "jerk needs a [frames, dims] sequence, got {:?}",
            seq.shape()
        )));
    }
    let (t, d) = (seq.shape()[0], seq.shape()[1]);
    if t < 3 {
        return Err(Error::invalid(format!(
            "jerk needs at least 3 frames, got {t}"
        )));
    }
    let mut acc = 0.0;
    for j in 1..t - 1 {
        let (prev, cur, next) = (seq.row(j - 1), seq.row(j), seq.row(j + 1));
        for k in 0..d {
            let dd = (next[k] - cur[k]) - (cur[k] - prev[k]);
            acc += dd * dd;
        }
    }
    Ok(acc / ((t - 2) * d) as f64)
}

/// Root mean squared elementwise difference.
pub fn recon_rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "rmse operands have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(mse.sqrt())
}

/// Mean pairwise cosine similarity across the rows of `f_ids` (`[N, d]`,
/// N ≥ 2). A zero row has no direction and is rejected.
pub fn identity_consistency(f_ids: &Tensor) -> Result<f64> {
    if f_ids.rank() != 2 {
        return Err(Error::shape(format!(
            "identity consistency needs [vectors, dims], got {:?}",
            f_ids.shape()
        )));
    }
    let n = f_ids.shape()[0];
    if n < 2 {
        return Err(Error::invalid(format!(
            "identity consistency needs at least 2 vectors, got {n}"
        )));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| f_ids.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(zero) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::invalid(format!(
            "identity vector {zero} is zero; cosine similarity is undefined"
        )));
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = f_ids.row(i).iter().zip(f_ids.row(j)).map(|(a, b)| a * b).sum();
            acc += dot / (norms[i] * norms[j]);
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}
