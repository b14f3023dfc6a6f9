//! Autoencoder motion normaliser.
//!
//! Raw motion sequences are noisy regression targets; the normaliser
//! compresses each frame into a lower-dimensional code `f_c`, and the flow
//! model learns to sample in that compressed space. Encoder and decoder act
//! strictly per frame, so they commute with any permutation of the time axis.
//! The prior likelihood treats each frame as a unit-variance Gaussian around
//! the prior network's mean.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::net::NetworkModel;
use crate::tensor::Tensor;

/// A `T×c` sequence of compressed motion codes with `c` strictly below the
/// motion dimension it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMotion {
    f_c: Tensor, // [T, c]
}

impl CompressedMotion {
    /// Wraps a compressed sequence; `motion_dim` is the dimension of the
    /// space it was compressed from and must strictly exceed `c`.
    pub fn new(f_c: Tensor, motion_dim: usize) -> Result<Self> {
        if f_c.rank() != 2 {
            return Err(Error::shape(format!(
                "compressed motion must be [frames, channels], got {:?}",
                f_c.shape()
            )));
        }
        let c = f_c.shape()[1];
        if c >= motion_dim {
            return Err(Error::invalid(format!(
                "compressed width {c} must be strictly below the motion dimension {motion_dim}"
            )));
        }
        f_c.ensure_finite("compressed motion")?;
        Ok(CompressedMotion { f_c })
    }

    pub fn frames(&self) -> usize {
        self.f_c.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.f_c.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.f_c
    }

    pub fn into_tensor(self) -> Tensor {
        self.f_c
    }
}

/// Compresses a `[T, d]` motion sequence frame by frame. The encoder must
/// genuinely compress: its output width must be below its input width.
pub fn encode(f_m: &Tensor, enc: &NetworkModel) -> Result<CompressedMotion> {
    if f_m.rank() != 2 {
        return Err(Error::shape(format!(
            "motion sequence must be [frames, dims], got {:?}",
            f_m.shape()
        )));
    }
    if f_m.shape()[1] != enc.input_dim() {
        return Err(Error::shape(format!(
            "encoder '{}' takes {} dims, sequence has {}",
            enc.name(),
            enc.input_dim(),
            f_m.shape()[1]
        )));
    }
    CompressedMotion::new(enc.forward(f_m)?, enc.input_dim())
}

/// Expands a compressed sequence back to motion space frame by frame.
pub fn decode(f_c: &CompressedMotion, dec: &NetworkModel) -> Result<Tensor> {
    if f_c.channels() != dec.input_dim() {
        return Err(Error::shape(format!(
            "decoder '{}' takes {} channels, sequence has {}",
            dec.name(),
            dec.input_dim(),
            f_c.channels()
        )));
    }
    dec.forward(f_c.tensor())
}

/// Mean squared reconstruction error over every frame and dimension.
pub fn ae_loss(recon: &Tensor, target: &Tensor) -> Result<f64> {
    if recon.shape() != target.shape() {
        return Err(Error::shape(format!(
            "reconstruction shape {:?} does not match target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let n = recon.len() as f64;
    Ok(recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Negative log-likelihood of `f_c` under per-frame unit-variance Gaussians
/// centred on `mu`: the sum over frames of
/// `(c/2)·ln(2π) + ½·‖f_c[j] − mu[j]‖²`.
pub fn prior_nll(f_c: &CompressedMotion, mu: &Tensor) -> Result<f64> {
    if mu.shape() != f_c.tensor().shape() {
        return Err(Error::shape(format!(
            "prior mean shape {:?} does not match codes {:?}",
            mu.shape(),
            f_c.tensor().shape()
        )));
    }
    let (frames, c) = (f_c.frames() as f64, f_c.channels() as f64);
    let sq: f64 = f_c
        .tensor()
        .data()
        .iter()
        .zip(mu.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(frames * (c / 2.0) * (2.0 * PI).ln() + 0.5 * sq)
}

/// Tape version of the squared-error reconstruction loss.
pub fn ae_loss_traced(tape: &mut Tape, recon: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(recon, target)?;
    Ok(tape.mean_sq(diff))
}

/// Tape version of the prior likelihood for training: `codes` and `mu` are
/// `[B, T, c]` (or `[T, c]`, treated as one sequence), and the result is the
/// mean over sequences of the per-sequence negative log-likelihood.
pub fn prior_nll_traced(tape: &mut Tape, codes: Var, mu: Var) -> Result<Var> {
    let shape = tape.value(codes).shape().to_vec();
    if shape != tape.value(mu).shape() {
        return Err(Error::shape(format!(
            "prior mean shape {:?} does not match codes {:?}",
            tape.value(mu).shape(),
            shape
        )));
    }
    let (b, frames, c) = match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => {
            return Err(Error::shape(format!(
                "prior likelihood expects [frames, c] or [batch, frames, c], got {shape:?}"
            )))
        }
    };
    let diff = tape.sub(codes, mu)?;
    let sq = tape.square(diff);
    let total = tape.sum_all(sq);
    let half_mean = tape.scale(total, 0.5 / b as f64);
    let constant = frames as f64 * (c as f64 / 2.0) * (2.0 * PI).ln();
    Ok(tape.add_scalar(half_mean, constant))
}
