pub mod audio;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod textproc;
pub mod training;

pub use error::{Error, Result};
