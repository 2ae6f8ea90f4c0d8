//! Collaborative filtering with contrastive alignment/uniformity objectives and
//! inverse-propensity debiasing of the alignment term.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: interaction sets, splits, and a synthetic exposure/relevance world.
//! - [`embedding`]: user/item tables, relation-space projections, checkpoints.
//! - [`losses`]: alignment, uniformity and the combined objectives with analytical gradients.
//! - [`propensity`]: learned, oracle and popularity propensity estimators.
//! - [`trainer`]: minibatching, Adam, and the training loop.
//! - [`eval`]: Recall@K / NDCG@K and popularity-group alignment diagnostics.

pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod losses;
pub mod propensity;
pub mod trainer;

pub use error::{Error, Result};
