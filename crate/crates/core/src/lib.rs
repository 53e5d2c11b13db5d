//! Variance-gated test-time training for a visual-foresight policy.
//!
//! A small foresight policy predicts the image it expects to see a few steps
//! ahead and conditions its actions on the same representation. At test time
//! the attained image supervises a single query vector, but only on steps
//! whose sampled actions agree with each other (low variance relative to a
//! recent window). The crate ships the synthetic reach task, the policy with
//! analytic gradients, the adaptation loop, and an evaluation harness.

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod harness;
pub mod model;
pub mod seeding;
pub mod ttt;
