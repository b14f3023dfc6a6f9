//! Content-to-lip-feature mapper: parallel residual convolution branches with
//! distinct receptive fields, averaged and projected to motion-feature space.
//! Branches use unpadded convolutions; temporal interpolation restores the
//! frame count, so no padding constants ever enter the signal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{interp_coords, PadMode};
use crate::net::{NetBuilder, NetworkModel};
use crate::tensor::Tensor;

/// Per-scene content conditioning: token embeddings, their duration-upsampled
/// per-frame counterpart, and a per-frame energy track derived from it.
#[derive(Debug, Clone)]
pub struct ContentFeatures {
    e_t: Tensor,
    f_t_up: Tensor,
    energy: Tensor,
}

impl ContentFeatures {
    /// `e_t` is `[L, k]` token embeddings, `f_t_up` is `[T, k]` with L ≤ T.
    /// The energy track is computed here so it can never drift out of sync.
    pub fn new(e_t: Tensor, f_t_up: Tensor) -> Result<Self> {
        if e_t.rank() != 2 || f_t_up.rank() != 2 || e_t.shape()[1] != f_t_up.shape()[1] {
            return Err(Error::shape(format!(
                "content features need [L, k] tokens and [T, k] frames, got {:?} and {:?}",
                e_t.shape(),
                f_t_up.shape()
            )));
        }
        if e_t.shape()[0] == 0 || e_t.shape()[0] > f_t_up.shape()[0] {
            return Err(Error::invalid(format!(
                "token count must lie in [1, frames]: {} tokens, {} frames",
                e_t.shape()[0],
                f_t_up.shape()[0]
            )));
        }
        let energy = energy(&f_t_up)?;
        Ok(ContentFeatures { e_t, f_t_up, energy })
    }

    pub fn tokens(&self) -> usize {
        self.e_t.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.f_t_up.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.e_t.shape()[1]
    }

    pub fn e_t(&self) -> &Tensor {
        &self.e_t
    }

    pub fn f_t_up(&self) -> &Tensor {
        &self.f_t_up
    }

    pub fn energy(&self) -> &Tensor {
        &self.energy
    }

    /// Channel concatenation consumed by the mapper: token embeddings
    /// stretched to T frames, the upsampled feature, and energy — `[T, 2k+1]`.
    pub fn mapper_input(&self) -> Result<Tensor> {
        let t = self.frames();
        let k = self.embed_dim();
        let e_up = temporal_interpolate(&self.e_t, t)?;
        let mut data = Vec::with_capacity(t * (2 * k + 1));
        for j in 0..t {
            data.extend_from_slice(e_up.row(j));
            data.extend_from_slice(self.f_t_up.row(j));
            data.push(self.energy.row(j)[0]);
        }
        Tensor::new(&[t, 2 * k + 1], data)
    }
}

/// Width of the mapper input for embedding dimension `k`.
pub fn mapper_input_dim(embed_dim: usize) -> usize {
    2 * embed_dim + 1
}

/// Per-frame channel-averaged norm: ‖frame‖₂ / √k.
pub fn energy(f_t_up: &Tensor) -> Result<Tensor> {
    if f_t_up.rank() != 2 || f_t_up.shape()[1] == 0 {
        return Err(Error::shape(format!(
            "energy needs [frames, k] with k ≥ 1, got {:?}",
            f_t_up.shape()
        )));
    }
    let (t, k) = (f_t_up.shape()[0], f_t_up.shape()[1]);
    let scale = (k as f64).sqrt();
    let data = (0..t)
        .map(|j| {
            let row = f_t_up.row(j);
            row.iter().map(|v| v * v).sum::<f64>().sqrt() / scale
        })
        .collect();
    Tensor::new(&[t, 1], data)
}

/// Linear resampling of `[L, k]` rows onto `target_len` points, endpoints
/// mapped to endpoints. Equal lengths copy bitwise.
pub fn temporal_interpolate(seq: &Tensor, target_len: usize) -> Result<Tensor> {
    if seq.rank() != 2 || seq.shape()[0] == 0 {
        return Err(Error::shape(format!(
            "interpolation needs a nonempty [frames, k] sequence, got {:?}",
            seq.shape()
        )));
    }
    if target_len == 0 {
        return Err(Error::invalid("interpolation target length must be ≥ 1"));
    }
    let (l, k) = (seq.shape()[0], seq.shape()[1]);
    if l == target_len {
        return Ok(seq.clone());
    }
    let mut data = Vec::with_capacity(target_len * k);
    for i in 0..target_len {
        let (lo, hi, w) = interp_coords(l, target_len, i);
        let (a, b) = (seq.row(lo), seq.row(hi));
        for c in 0..k {
            data.push(a[c] + w * (b[c] - a[c]));
        }
    }
    Tensor::new(&[target_len, k], data)
}

/// Receptive-field layout of the fusion mapper.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MrfConfig {
    /// `(kernel, dilation)` per branch; all pairs distinct, at least two.
    pub branches: Vec<(usize, usize)>,
    /// Hidden channel count inside each branch.
    pub channels: usize,
}

impl Default for MrfConfig {
    fn default() -> Self {
        MrfConfig {
            branches: vec![(3, 1), (3, 2), (5, 1)],
            channels: 16,
        }
    }
}

impl MrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches.len() < 2 {
            return Err(Error::invalid(format!(
                "mapper needs at least 2 branches, got {}",
                self.branches.len()
            )));
        }
        for (i, &(k, d)) in self.branches.iter().enumerate() {
            if k < 2 || d == 0 {
                return Err(Error::invalid(format!(
                    "branch {i} has degenerate kernel {k} / dilation {d}"
                )));
            }
            if self.branches[..i].contains(&(k, d)) {
                return Err(Error::invalid(format!(
                    "branch {i} duplicates (kernel {k}, dilation {d})"
                )));
            }
        }
        if self.channels == 0 {
            return Err(Error::invalid("mapper channels must be ≥ 1"));
        }
        Ok(())
    }

    /// Frames a branch consumes before producing its first output.
    fn min_frames(kernel: usize, dilation: usize) -> usize {
        (kernel - 1) * dilation + 1
    }
}

/// The fused mapper: one conv net per branch plus the output projection.
/// Weights are drawn once from the seed and stay fixed — the mapper is part
/// of the data pipeline, not a trained component.
#[derive(Debug, Clone)]
pub struct MrfMapper {
    cfg: MrfConfig,
    branches: Vec<NetworkModel>,
    out: NetworkModel,
}

impl MrfMapper {
    /// `input_channels` is the width of [`ContentFeatures::mapper_input`];
    /// `out_dim` is the motion-feature dimension d.
    pub fn new(cfg: MrfConfig, input_channels: usize, out_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if input_channels == 0 || out_dim == 0 {
            return Err(Error::invalid(
                "mapper input and output dims must be ≥ 1".to_string(),
            ));
        }
        let mut branches = Vec::with_capacity(cfg.branches.len());
        for (i, &(k, d)) in cfg.branches.iter().enumerate() {
            branches.push(
                NetBuilder::new(&format!("mrf_b{i}"), input_channels)
                    .conv1d(cfg.channels, k, d, PadMode::Valid)
                    .leaky_relu(0.1)
                    .affine(input_channels)
                    .build(seed.wrapping_add(i as u64 + 1))?,
            );
        }
        let out = NetBuilder::new("mrf_out", input_channels)
            .affine(out_dim)
            .build(seed)?;
        Ok(MrfMapper { cfg, branches, out })
    }

    pub fn cfg(&self) -> &MrfConfig {
        &self.cfg
    }

    pub fn input_channels(&self) -> usize {
        self.out.input_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out.output_dim()
    }

    pub fn branch(&self, i: usize) -> &NetworkModel {
        &self.branches[i]
    }

    pub fn branch_mut(&mut self, i: usize) -> &mut NetworkModel {
        &mut self.branches[i]
    }

    pub fn out_net(&self) -> &NetworkModel {
        &self.out
    }
}

/// Runs the mapper on `[T, input_channels]` content and returns the `[T, d]`
/// lip feature: mean over residual branches, then the output projection.
pub fn mrf_forward(mapper: &MrfMapper, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || x.shape()[1] != mapper.input_channels() {
        return Err(Error::shape(format!(
            "mapper input must be [frames, {}], got {:?}",
            mapper.input_channels(),
            x.shape()
        )));
    }
    let t = x.shape()[0];
    let mut acc = Tensor::zeros(x.shape());
    for (i, net) in mapper.branches.iter().enumerate() {
        let (k, d) = mapper.cfg.branches[i];
        if t < MrfConfig::min_frames(k, d) {
            return Err(Error::invalid(format!(
                "branch {i} (kernel {k}, dilation {d}) needs at least {} frames, got {t}",
                MrfConfig::min_frames(k, d)
            )));
        }
        let shrunk = net.forward(x).map_err(|e| {
            Error::invalid(format!("branch {i} (kernel {k}, dilation {d}): {e}"))
        })?;
        let restored = temporal_interpolate(&shrunk, t)?;
        let residual = x.add(&restored)?;
        acc = acc.add(&residual)?;
    }
    let fused = acc.scale(1.0 / mapper.branches.len() as f64);
    mapper.out.forward(&fused)
}
