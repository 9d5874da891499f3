pub mod ahsw;
pub mod autograd;
pub mod backbones;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod synthdata;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};
