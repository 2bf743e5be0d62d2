//! Region-aware contrastive image-text pretraining at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: dense tensors with a reverse-mode tape and a
//!   finite-difference oracle.
//! - [`pe`]: positional-embedding grids (learnable, sinusoidal, none) and the
//!   cropped positional embedding pipeline (upsample, sample a region,
//!   resample it back).
//! - [`encoders`]: a tiny ViT image tower and transformer text tower that
//!   pool to unit-norm embeddings, plus the checkpoint format.
//! - [`losses`]: softmax and sigmoid-focal contrastive objectives in
//!   symmetric image-to-text + text-to-image form.
//! - [`scoring`]: open-vocabulary detection score fusion (RoI pooling,
//!   VLM scores, geometric-mean combination, objectness, normalized layer).
//! - [`synth`]: seeded synthetic image-caption pairs and region tasks.
//! - [`harness`]: run configs, training, retrieval/region evaluation,
//!   gradient-check runner and report exporters used by the CLI.

pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod pe;
pub mod scoring;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
