pub mod active;
pub mod cli;
pub mod data;
pub mod eval;
pub mod inference;
pub mod loss;
pub mod model;
pub mod rng;
pub mod service;
pub mod train;
