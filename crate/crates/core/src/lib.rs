//! Zero-shot learning toolkit.

pub mod amssfe;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graphzsl;
pub mod io;
pub mod linalg;
pub mod matrix;
pub mod nn;
pub mod rectify;

pub use dataset::Dataset;
pub use error::{Result, ZslError};
pub use matrix::Matrix;
