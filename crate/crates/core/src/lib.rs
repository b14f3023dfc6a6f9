//! Flow-matching motion sampler over an orthonormal latent code bank.
//!
//! The crate builds up from a small autodiff tape ([`graph`]) and dense f64
//! tensors ([`tensor`]) to named network models ([`net`]), then layers the
//! domain on top: latent code banks and motion extraction ([`latent`]),
//! conditional flow matching ([`cfm`]), an autoencoder motion normaliser
//! ([`normaliser`]), a conformer-style prior ([`prior`]), a multi-receptive-
//! field content mapper ([`audio_mapper`]), synthetic scene generation
//! ([`synthetic`]), evaluation metrics ([`metrics`]), and training loops with
//! checkpointing ([`train`]).

pub mod audio_mapper;
pub mod cfm;
pub mod ckpt;
pub mod error;
pub mod graph;
pub mod latent;
pub mod metrics;
pub mod net;
pub mod normaliser;
pub mod prior;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
