pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradsuite;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod params;
pub mod protocol;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
