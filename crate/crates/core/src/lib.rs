//! turncredit: a desk-scale lab for training multi-turn search agents with
//! group-relative policy optimization and retrospective turn-level credit.
//!
//! The crate wires together seven pieces:
//!
//! - [`episode`]: the tagged turn protocol (`<think>`, `<search>`, `<answer>`,
//!   `<information>`), trajectories, format checking and answer extraction.
//! - [`env`]: a synthetic functional knowledge base, k-hop question
//!   generation, seeded retrieval with distractors, and episode stepping.
//! - [`policy`]: a log-linear softmax policy over the token vocabulary with
//!   analytic gradients, exact KL, rollouts and text checkpoints.
//! - [`credit`]: outcome rewards, group-normalized advantages, turn-level
//!   rewards and the hybrid per-token advantage blend.
//! - [`critic`]: interchangeable turn judges (privileged oracle, Monte-Carlo
//!   value estimates, remote LLM endpoint) plus score-tag parsing.
//! - [`trainer`]: grouped rollouts, the clipped surrogate objective with KL
//!   and entropy terms, the training loop, collapse detection, persistence.
//! - [`cli`] / [`compare`] / [`eval`]: command-line harness, paired
//!   convergence comparisons with plots, and EM/F1 evaluation.

pub mod cli;
pub mod compare;
pub mod credit;
pub mod critic;
pub mod env;
pub mod episode;
pub mod error;
pub mod eval;
pub mod plot;
pub mod policy;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
