//! VLAD-based instance retrieval over CNN feature maps.
//!
//! Stages: read feature maps ([`feature_io`]), learn a k-means vocabulary
//! ([`codebook`]), aggregate residuals ([`vlad`]), compress with PCA and
//! whitening ([`projection`]), rank by L2 distance ([`retrieval`]) and
//! score with AP/mAP ([`evaluation`]). [`pipeline`] wires the stages
//! together; [`visualization`] renders patch-level diagnostics.

pub mod binio;
pub mod codebook;
pub mod error;
pub mod evaluation;
pub mod feature_io;
pub mod pipeline;
pub mod projection;
pub mod retrieval;
pub mod stage_cache;
pub mod stages;
pub mod visualization;
pub mod vlad;

pub use error::{Error, Result};
