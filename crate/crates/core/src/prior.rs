//! Conditional prior over compressed motion: predicts the per-frame mean of a
//! motion-code sequence from the first frame's codes plus per-frame content
//! features, through a conv/attention stack.

use crate::error::{Error, Result};
use crate::graph::PadMode;
use crate::net::{NetBuilder, NetworkModel};
use crate::tensor::Tensor;

/// Conditioning for one sequence: where the motion starts and what drives it.
#[derive(Debug, Clone)]
pub struct PriorInput {
    first_motion: Tensor,
    content: Tensor,
}

impl PriorInput {
    /// `first_motion` is a `[c]` vector (the opening frame's codes), `content`
    /// is `[T, c]` per-frame features already mapped into code space.
    pub fn new(first_motion: Tensor, content: Tensor) -> Result<Self> {
        if first_motion.rank() != 1 {
            return Err(Error::shape(format!(
                "first_motion must be a vector, got {:?}",
                first_motion.shape()
            )));
        }
        if content.rank() != 2 || content.shape()[1] != first_motion.len() {
            return Err(Error::shape(format!(
                "content must be [frames, {}], got {:?}",
                first_motion.len(),
                content.shape()
            )));
        }
        if content.shape()[0] == 0 {
            return Err(Error::invalid("content needs at least one frame"));
        }
        Ok(PriorInput { first_motion, content })
    }

    pub fn channels(&self) -> usize {
        self.first_motion.len()
    }

    pub fn frames(&self) -> usize {
        self.content.shape()[0]
    }

    pub fn first_motion(&self) -> &Tensor {
        &self.first_motion
    }

    pub fn content(&self) -> &Tensor {
        &self.content
    }
}

/// Repeats a `[c]` row `frames` times into `[frames, c]`.
pub fn broadcast_rows(row: &Tensor, frames: usize) -> Result<Tensor> {
    if row.rank() != 1 {
        return Err(Error::shape(format!(
            "broadcast needs a vector, got {:?}",
            row.shape()
        )));
    }
    let mut data = Vec::with_capacity(frames * row.len());
    for _ in 0..frames {
        data.extend_from_slice(row.data());
    }
    Tensor::new(&[frames, row.len()], data)
}

/// The summed conditioning tensor the net consumes: first-frame codes
/// broadcast over time plus the content features.
pub fn prior_input_tensor(input: &PriorInput) -> Result<Tensor> {
    let base = broadcast_rows(&input.first_motion, input.frames())?;
    base.add(&input.content)
}

/// Builds the prior network: an affine lift to `width`, four residual blocks
/// of [depthwise conv (kernel 3, edge-replicated) → pointwise affine →
/// single-head self-attention] each followed by layer normalisation, and an
/// affine map back to `channels`.
pub fn build_prior_net(channels: usize, width: usize, seed: u64) -> Result<NetworkModel> {
    if channels == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "prior needs positive channels and width, got {channels} and {width}"
        )));
    }
    let mut b = NetBuilder::new("prior", channels).affine(width);
    for _ in 0..4 {
        b = b
            .residual(|r| {
                r.depthwise_conv1d(3, 1, PadMode::Replicate)
                    .affine(width)
                    .self_attention()
            })
            .layer_norm();
    }
    b.affine(channels).build(seed)
}

/// Runs the prior on one sequence; returns the `[T, c]` predicted mean.
pub fn prior_forward(net: &NetworkModel, input: &PriorInput) -> Result<Tensor> {
    if net.input_dim() != input.channels() || net.output_dim() != input.channels() {
        return Err(Error::shape(format!(
            "prior net maps {}→{} features but the input has {} channels",
            net.input_dim(),
            net.output_dim(),
            input.channels()
        )));
    }
    net.forward(&prior_input_tensor(input)?)
}
