//! Orthonormal motion-code bank and the identity/motion split.
//!
//! A visual feature `f` decomposes as `f = f_id + f_m`, where the motion part
//! `f_m` is a linear combination of learned code directions and the identity
//! part is whatever remains after subtracting it. Style fusion assembles the
//! per-layer conditioning stack, swapping the motion term for a lip term on
//! the designated layers.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::net::NetworkModel;
use crate::tensor::Tensor;

/// Orthonormality slack allowed for a bank accepted as-is; `orthonormalize`
/// tightens banks well below this.
pub const GRAM_TOL: f64 = 1e-6;

/// A set of `M` motion directions in `d`-dimensional latent space, kept
/// pairwise orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeBank {
    directions: Tensor, // [M, d]
}

impl CodeBank {
    /// Wraps an `M×d` direction matrix. Requires `M ≤ d` and finite values;
    /// orthonormality is established separately via [`CodeBank::orthonormalize`].
    pub fn new(directions: Tensor) -> Result<Self> {
        if directions.rank() != 2 {
            return Err(Error::shape(format!(
                "code bank must be a matrix, got shape {:?}",
                directions.shape()
            )));
        }
        let (m, d) = (directions.shape()[0], directions.shape()[1]);
        if m == 0 || m > d {
            return Err(Error::invalid(format!(
                "code bank needs 1 <= M <= d, got M={m}, d={d}"
            )));
        }
        directions.ensure_finite("code bank directions")?;
        Ok(CodeBank { directions })
    }

    pub fn codes(&self) -> usize {
        self.directions.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.directions.shape()[1]
    }

    pub fn directions(&self) -> &Tensor {
        &self.directions
    }

    pub fn direction(&self, k: usize) -> &[f64] {
        self.directions.row(k)
    }

    /// Modified Gram–Schmidt. Preserves the row space and returns a bank
    /// whose Gram matrix is the identity to ~1e-12; a row that is (nearly)
    /// a combination of its predecessors is reported by index.
    pub fn orthonormalize(&self) -> Result<CodeBank> {
        let (m, d) = (self.codes(), self.dim());
        let mut rows: Vec<Vec<f64>> = (0..m).map(|k| self.direction(k).to_vec()).collect();
        for i in 0..m {
            let orig_norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                for k in 0..d {
                    rows[i][k] -= dot * rows[j][k];
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-10 * orig_norm.max(1.0) {
                return Err(Error::RankDeficient { row: i });
            }
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
        CodeBank::new(Tensor::new(&[m, d], rows.concat())?)
    }

    /// Frobenius distance of the Gram matrix from the identity.
    pub fn gram_deviation(&self) -> f64 {
        let m = self.codes();
        let mut dev = 0.0;
        for i in 0..m {
            for j in 0..m {
                let dot: f64 = self
                    .direction(i)
                    .iter()
                    .zip(self.direction(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let target = if i == j { 1.0 } else { 0.0 };
                dev += (dot - target) * (dot - target);
            }
        }
        dev.sqrt()
    }

    /// Coefficients of the orthogonal projection of each feature row onto
    /// the bank's row space: `[.., d] ↦ [.., M]`. This is the exact
    /// ("oracle") counterpart of a learned magnitude extractor.
    pub fn coeffs(&self, f: &Tensor) -> Result<Tensor> {
        let (m, d) = (self.codes(), self.dim());
        if f.last_dim()? != d {
            return Err(Error::shape(format!(
                "feature last axis {:?} does not match bank dim {d}",
                f.shape()
            )));
        }
        let rows = f.leading_count()?;
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let fr = f.row(r);
            for k in 0..m {
                out[r * m + k] = fr.iter().zip(self.direction(k)).map(|(a, b)| a * b).sum();
            }
        }
        let mut shape = f.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        Tensor::new(&shape, out)
    }

    /// Linear combination of bank directions: `[.., M] ↦ [.., d]`.
    pub fn reconstruct(&self, magnitudes: &Tensor) -> Result<Tensor> {
        let (m, d) = (self.codes(), self.dim());
        if magnitudes.last_dim()? != m {
            return Err(Error::shape(format!(
                "magnitudes last axis {:?} does not match bank size {m}",
                magnitudes.shape()
            )));
        }
        let rows = magnitudes.leading_count()?;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let mr = magnitudes.row(r);
            let or = &mut out[r * d..(r + 1) * d];
            for (k, &c) in mr.iter().enumerate() {
                if c != 0.0 {
                    for (o, &dv) in or.iter_mut().zip(self.direction(k)) {
                        *o += c * dv;
                    }
                }
            }
        }
        let mut shape = magnitudes.shape().to_vec();
        *shape.last_mut().unwrap() = d;
        Tensor::new(&shape, out)
    }

    /// CSV rendering: one row per code, `d` comma-separated columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for k in 0..self.codes() {
            let row = self.direction(k);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Motion part of a visual feature: code coefficients plus the latent vector
/// they reconstruct.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeature {
    pub f_m: Tensor,        // [d]
    pub magnitudes: Tensor, // [M]
}

/// What remains of a visual feature once motion is removed.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityFeature {
    pub f_id: Tensor, // [d]
}

/// Runs the magnitude extractor on a single feature vector and reconstructs
/// the motion component from the bank.
pub fn extract_motion(
    f: &Tensor,
    bank: &CodeBank,
    extractor: &NetworkModel,
) -> Result<MotionFeature> {
    if f.rank() != 1 || f.len() != bank.dim() {
        return Err(Error::shape(format!(
            "visual feature must be a {}-vector, got shape {:?}",
            bank.dim(),
            f.shape()
        )));
    }
    if extractor.output_dim() != bank.codes() {
        return Err(Error::shape(format!(
            "extractor '{}' yields {} magnitudes, bank holds {} codes",
            extractor.name(),
            extractor.output_dim(),
            bank.codes()
        )));
    }
    let magnitudes = extractor.forward(f)?;
    let f_m = bank.reconstruct(&magnitudes)?;
    Ok(MotionFeature { f_m, magnitudes })
}

/// `f_id = f − f_m`, exactly.
pub fn subtract_identity(f: &Tensor, motion: &MotionFeature) -> Result<IdentityFeature> {
    Ok(IdentityFeature { f_id: f.sub(&motion.f_m)? })
}

/// Per-layer conditioning stack: every layer carries `f_id` plus either the
/// body-motion term or, on the lip layers, the lip term.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStack {
    layers: Vec<Tensor>,
    lip_layers: BTreeSet<usize>,
}

impl StyleStack {
    /// Number of layers in the stack.
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer `n`, 1-based.
    pub fn layer(&self, n: usize) -> Result<&Tensor> {
        if n == 0 || n > self.layers.len() {
            return Err(Error::invalid(format!(
                "layer index {n} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(&self.layers[n - 1])
    }

    pub fn is_lip_layer(&self, n: usize) -> bool {
        self.lip_layers.contains(&n)
    }
}

/// Builds the conditioning stack. `lip_layers` uses 1-based indices into
/// `1..=n_layers`; those layers get `f_id + f_lip`, the rest `f_id + f_m`.
pub fn fuse_style(
    f_id: &Tensor,
    f_m: &Tensor,
    f_lip: &Tensor,
    lip_layers: &BTreeSet<usize>,
    n_layers: usize,
) -> Result<StyleStack> {
    if n_layers == 0 {
        return Err(Error::invalid("style stack needs at least one layer"));
    }
    for &n in lip_layers {
        if n == 0 || n > n_layers {
            return Err(Error::invalid(format!(
                "lip layer index {n} outside 1..={n_layers}"
            )));
        }
    }
    let base = f_id.add(f_m)?;
    let lip = f_id.add(f_lip)?;
    let layers = (1..=n_layers)
        .map(|n| if lip_layers.contains(&n) { lip.clone() } else { base.clone() })
        .collect();
    Ok(StyleStack { layers, lip_layers: lip_layers.clone() })
}
