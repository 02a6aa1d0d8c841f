pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod inference;
pub mod mechanisms;
pub mod models;
pub mod syndata;
pub mod training;

pub use error::{Error, Result};
