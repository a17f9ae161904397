pub mod cli;
pub mod data_io;
pub mod diffcore;
pub mod error;
pub mod evalsuite;
pub mod graph;
pub mod map_infer;
pub mod oracle;
pub mod sem;
pub mod training;

pub use error::{Error, Result};
