//! Time-aware bimodal self-supervised pretraining for multi-channel
//! physiological signals.
//!
//! Stage 1 trains one masked-autoencoder encoder per modality with an added
//! contrastive objective on the CLS token. Stage 2 stacks two modalities,
//! adds spatial/temporal/token positional embeddings, optionally modulates
//! every token with a feature-wise affine transform of the window's
//! standardized position in its session, and fuses the pair with gated
//! bidirectional cross-attention. Frozen embeddings are evaluated with
//! linear probes.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod crossmodal;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod signal;
pub mod store;
pub mod synth;
pub mod tape;
pub mod unimodal;

pub use error::{Error, Result};
