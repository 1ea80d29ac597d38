pub mod cli;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod filternet;
pub mod geometry;
pub mod losses;
pub mod params;
pub mod raster;
pub mod static_field;
pub mod trainer;

pub use error::{Error, Result};
