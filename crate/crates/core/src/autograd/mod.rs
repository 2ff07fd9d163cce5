//! Dense arrays with a small reverse-mode tape.

mod adam;
mod array;
mod tape;
pub mod gradcheck;

pub use adam::Adam;
pub use array::Array;
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
