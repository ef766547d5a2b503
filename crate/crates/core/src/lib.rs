pub mod cli;
pub mod csngf;
pub mod error;
pub mod eval;
pub mod ngf;
pub mod search;
pub mod volume;
pub mod xcorr;

pub use error::{Error, Result};
