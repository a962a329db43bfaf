//! A laboratory for similarity-aware metric-learning losses.
//!
//! The crate provides the vanilla and similarity-weighted triplet losses, the
//! similarity cross-entropy loss (SimCE) and its multi-negative form
//! (m-SimCE), a softmax classification head, and the two combined objectives
//! built from them. Every loss returns a hand-derived gradient with respect to
//! the embedding batch.
//!
//! Around the losses sit the tools used to check and exercise them:
//!
//! * [`analysis`]: finite-difference gradients, Hessian traces, Monte-Carlo
//!   robustness probes and the dynamic-margin expansion.
//! * [`synth`]: von Mises-Fisher sampling, density and concentration
//!   estimation, and clustered synthetic datasets.
//! * [`training`]: a small embedding model trained by SGD with momentum,
//!   weight decay and a cosine learning-rate schedule.
//! * [`evaluation`]: rank-1 retrieval, hypersphere uniformity and
//!   inter/intra-class distance statistics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod batching;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod rng;
pub mod synth;
pub mod training;

pub use batching::{BatchSpec, PosPair, Triplet, TripletIndexSet};
pub use embedding::{EmbeddingBatch, SimKind, SimMatrix};
pub use error::{Error, Result};
pub use losses::{ClassifierHead, Combined, LossConfig, LossResult, Reduction};
pub use training::LossVariant;
