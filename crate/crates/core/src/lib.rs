pub mod cluster;
pub mod container;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod net;
pub mod pipeline;
pub mod speaker;

pub use error::{Error, Result};
