pub mod autodiff;
pub mod brdf;
pub mod decompose;
pub mod edit;
pub mod error;
pub mod field;
pub mod image;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod scene;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
pub use scalar::Scalar;
