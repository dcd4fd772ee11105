pub mod cli;
pub mod error;
pub mod inference;
pub mod layers;
pub mod numerics;
pub mod optim;
pub mod probe;
pub mod qinit;
pub mod quantizer;
pub mod trainer;

pub use error::{L4qError, Result};
