//! Std companion to `dcg-core`: TSV and JSON-lines formats, binary
//! checkpoints, flat configuration files, a threaded shard executor and the
//! end-to-end pipeline behind the `dcg` command.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod formats;
pub mod parallel;
pub mod pipeline;
