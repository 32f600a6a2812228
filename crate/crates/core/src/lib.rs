pub mod bestbasis;
pub mod classify;
pub mod error;
pub mod eval;
pub mod features;
pub mod fractal;
pub mod imgprep;
pub mod raster;
pub mod synth;
pub mod wavelet;

pub use error::{Error, Result};
