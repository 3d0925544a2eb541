//! Convolutional matrix factorization over review text with an
//! entropy-regularized loss, topic keyword extraction and coherence scoring.

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod embeddings;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod topics;
pub mod training;
