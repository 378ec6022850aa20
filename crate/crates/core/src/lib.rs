pub mod config;
pub mod data;
pub mod image;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;
pub mod views;
