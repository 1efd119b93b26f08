pub mod config;
pub mod data;
pub mod exec;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod seed;
pub mod tensor;
