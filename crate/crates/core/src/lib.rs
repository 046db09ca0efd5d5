pub mod checkpoint;
pub mod config;
pub mod connector;
pub mod dataset;
pub mod encoders;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod pipeline;
pub mod rng;
pub mod schema;
pub mod state;
pub mod text;
pub mod training;
