pub mod autograd;
pub mod bsde;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod market;
pub mod net;
pub mod solver;

pub use error::{Error, Result};
