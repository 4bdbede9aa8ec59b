//! Group activity recognition from video-level labels, with optical-flow
//! guidance for actor attention, trained end to end on synthetic clips.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor_encoder;
pub mod backbone;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod relation;
pub mod synthdata;
pub mod training;
#[cfg(feature = "flow")]
pub mod flowproc;

pub use error::{Error, Result};
