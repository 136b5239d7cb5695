pub mod cli;
pub mod config;
pub mod corpus;
pub mod downstream;
pub mod exec;
pub mod lexicon;
pub mod metrics;
pub mod preamble;
pub mod rng;
pub mod scoring;
pub mod selection;
