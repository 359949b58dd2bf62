//! Desk-scale toolkit for unlearning social bias from decoder-only language
//! models.
//!
//! The crate bundles everything needed to run contrastive-gradient unlearning
//! and task-vector negation experiments end to end on a small CPU-trainable
//! transformer: a reverse-mode autodiff tensor core ([`tensor`], [`tape`]),
//! the language model itself ([`model`], [`checkpoint`]), dataset formats and
//! a synthetic benchmark generator ([`data`]), training ([`train`]), the two
//! debiasing methods ([`pcgu`], [`taskvec`]) with a sharded execution runtime
//! ([`shard`]), and the evaluation suite ([`eval`]).

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod model;
pub mod pcgu;
pub mod reference;
pub mod shard;
pub mod tape;
pub mod taskvec;
pub mod tensor;
pub mod train;

mod error;

pub use error::{Error, Result};
