//! Topic extraction from dense image feature vectors.
//!
//! Pipeline: a [`corpus::FeatureMatrix`] of per-image scores is thresholded
//! into a bag-of-words [`corpus::TokenizedCorpus`], an LDA model is fitted by
//! collapsed Gibbs sampling ([`sampler`], or [`parallel`] for multi-threaded
//! runs), and the recovered document-topic matrix is scored against ground
//! truth categories in [`eval`].

pub mod corpus;
pub mod error;
pub mod eval;
pub mod parallel;
pub mod sampler;
pub mod synth;

pub use error::{Error, Result};
