pub mod artifacts;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod cv;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod mgf;
pub mod model;
pub mod optim;
pub mod record;
pub mod report;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{FeatureGraph, GraphConfig};
pub use record::{Dataset, PatientRecord};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
