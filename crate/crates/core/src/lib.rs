//! Keypoint-guided multi-agent trajectory generation.

pub mod checkpoint;
pub mod geom;
pub mod grammar;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod refiner;
pub mod rewards;
pub mod scenario;
pub mod tdapo;
