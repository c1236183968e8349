//! Command-line pipeline: synthetic corpus generation, feature extraction,
//! basis fitting, training, evaluation and plotting.

pub mod config;
pub mod corpus;
pub mod pgm;
pub mod pipeline;
