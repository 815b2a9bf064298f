pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod data;
pub mod ssm;

pub use error::{Error, Result};
