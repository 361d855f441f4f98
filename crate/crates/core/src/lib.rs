pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod search;
pub mod space;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
