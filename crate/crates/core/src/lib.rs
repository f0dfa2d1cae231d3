pub mod discriminator;
pub mod eliminator;
pub mod error;
pub mod frontend;
pub mod generator;
pub mod cli;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use tape::{Gradients, Padding, Tape, Var};
pub use tensor::Tensor;
