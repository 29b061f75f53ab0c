//! Federated dual-encoder learning simulator.
//!
//! Simulates a cross-client protocol in which each client fine-tunes a
//! low-rank adapter on its image encoder (supervised warmup followed by a
//! group-relative policy-gradient stage), while the server maintains a text
//! encoder trained on embeddings uploaded by clients. Rounds aggregate the
//! client adapters by data-weighted averaging and broadcast the result
//! together with refreshed class text embeddings.
//!
//! All stochastic behavior flows from a single experiment seed through named
//! ChaCha streams, so runs are reproducible regardless of thread scheduling.

// Float validations negate comparisons (`!(x > 0.0)`) on purpose so NaN
// fails them, and the numeric kernels index with loop counters where that
// reads closest to the math.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod gradcheck;
pub mod local_training;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
