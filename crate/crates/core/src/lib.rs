pub mod cli;
pub mod config;
pub mod data;
pub mod decoding;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod rerank;
pub mod tensor;
pub mod train;
pub mod variational;
