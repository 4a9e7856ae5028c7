pub mod crossmap;
pub mod embedding;
pub mod error;
pub mod inference;
pub mod partial;
pub mod pipeline;
pub mod selection;
pub mod soft_sensor;
pub mod stats;
pub mod synthetic;
pub mod timeseries;

pub use error::{Error, ErrorKind, Result};
