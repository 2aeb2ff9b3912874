pub mod audio;
pub mod checkpoint;
pub mod dualpath;
pub mod gradsuite;
mod error;
pub mod losses;
pub mod models;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
