pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod sampler;
pub mod trainer;
