//! Knowledge-grounded report generation at desk scale.
//!
//! The pipeline embeds images and fact sentences into a shared space,
//! retrieves and purifies supporting facts, scores generated reports with
//! disease-level and sentence-level rewards, and trains a small
//! autoregressive policy with a blended cross-entropy + policy-gradient
//! objective.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod labeler;
pub mod fsio;
pub mod metrics;
pub mod policy;
pub mod retrieval;
pub mod rewards;
pub mod seeding;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
