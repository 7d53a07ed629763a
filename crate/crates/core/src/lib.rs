//! Truthfulness separator vectors for hallucination detection.

pub mod backend;
pub mod cli;
pub mod curate;
pub mod data;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod optim;
pub mod ot;
pub mod protocol;
pub mod train;
pub mod vmf;

pub use error::{Result, TsvError};
