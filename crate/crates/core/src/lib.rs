pub mod autodiff;
pub mod blob;
pub mod camera;
pub mod datagen;
pub mod error;
pub mod gaussian;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod render;

pub use error::{Error, Result};
