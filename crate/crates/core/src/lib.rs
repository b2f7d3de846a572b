//! Training engine for contrastive two-tower candidate generation.
//!
//! The crate is `no_std` (it only needs `alloc`). It covers the whole
//! algorithmic side: click-log data model and a biased-exposure simulator,
//! the two towers with exact manual gradients, the four training objectives,
//! proposal distributions and FIFO negative queues, the optimisation loop,
//! a tabular oracle for the contrastive/IPW equivalence and exact top-k
//! retrieval with accuracy and fairness metrics.
//!
//! File formats, configuration parsing, threads and the CLI live in the
//! `dcg` companion crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod encoder;
mod error;
pub mod losses;
pub mod math;
pub mod oracle;
pub mod retrieval;
pub mod samplers;
pub mod trainer;

pub use error::{Error, Result};

/// Deterministic generator used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
