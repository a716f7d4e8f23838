pub mod cli;
pub mod coherence;
pub mod config;
pub mod dynamics;
pub mod effective;
pub mod error;
pub mod model;
pub mod noise;
pub mod operators;
