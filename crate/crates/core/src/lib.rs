pub mod aggregation;
pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod mae;
pub mod numeric;
pub mod orchestrator;
pub mod partition;
pub mod report;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod wire;

pub use error::{Error, Result};
pub use numeric::ParamVector;
pub use rng::SeededRng;
