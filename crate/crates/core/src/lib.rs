//! Class-specific tonal signature extraction from noisy spectrograms.
//!
//! The crate is organised as a pipeline of loosely coupled modules:
//!
//! - [`sonogen`]: radix-2 FFT, STFT rendering and a synthetic labelled corpus
//!   with pixel-accurate ground-truth tonal masks.
//! - [`nnkit`]: a small CPU neural-network core (conv, pool, dense,
//!   transposed conv) with exact backprop and the classifier / autoencoder
//!   builders.
//! - [`wgan`]: Wasserstein GAN augmentation with weight clipping.
//! - [`clusterer`]: farthest-point K-Means, elbow selection and
//!   representative-member lookup on classifier embeddings.
//! - [`scorecam`]: perturbation based class activation maps.
//! - [`maskforge`]: general masks, fusion, thresholding and extraction.
//! - [`evalkit`]: extraction metrics against ground truth and the threshold
//!   sweep experiment.
//! - [`pipeline`]: config, run ledger and the CLI stage implementations.

pub mod clusterer;
pub mod error;
pub mod evalkit;
pub mod maskforge;
pub mod nnkit;
pub mod pipeline;
pub mod scorecam;
pub mod sonogen;
pub mod spg;
pub mod wgan;

pub use error::{Error, Result};
