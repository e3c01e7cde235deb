//! Influence-function data pruning for chain-of-thought fine-tuning, at desk scale.
//!
//! The crate trains a small MLP sequence model on a synthetic arithmetic
//! chain-of-thought corpus, finds validation queries whose greedy correctness
//! flips under fine-tuning, scores every training example's influence on those
//! queries through an EK-FAC curvature approximation, and prunes the training
//! set with intersected score/rank thresholds. Perplexity, embedding and random
//! selectors are provided as baselines, and brute-force oracles (finite
//! differences, an exact Gauss-Newton solve, leave-one-out retraining) check
//! every approximation along the way.
//!
//! Modules, bottom-up:
//!
//! - [`datagen`]: tokenizer, corpus generator with planted corruptions, JSONL I/O
//! - [`tinymodel`]: the model, analytic gradients, training and decoding
//! - [`evalharness`]: answer checking, flip sets, pass@k, checkpoint selection
//! - [`ekfac`]: Kronecker factors, eigenvalue-corrected basis, damped ihvp, exact oracle
//! - [`influence`]: query/train gradients, the influence matrix and its datastore
//! - [`scoring`]: oriented means, mean ranks, the aggressive score, histograms
//! - [`pruning`]: influence strategies and baseline selectors
//! - [`pipeline`]: cached end-to-end runs, the leave-one-out oracle and reports

pub mod container;
pub mod datagen;
pub mod ekfac;
pub mod error;
pub mod evalharness;
pub mod influence;
pub mod pipeline;
pub mod rng;
pub mod pruning;
pub mod scoring;
pub mod stats;
pub mod tinymodel;

pub use error::{Error, Result};
