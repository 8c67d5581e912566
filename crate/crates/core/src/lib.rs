pub mod error;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Tape, Tensor, Var};
pub mod config;
pub mod data;
pub mod encoders;
pub mod label_head;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tmct;
pub mod train;
pub mod verify;
