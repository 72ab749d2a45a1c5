//! Light stage geometry, a synthetic one-light-at-a-time renderer, classical
//! relighting baselines, environment-map tooling and image metrics.

pub mod env;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod relight;
pub mod render;
pub mod sh;
pub mod scan;
pub mod stage;

pub use error::{Error, Result};
pub use image::Image;
pub use stage::{ActiveSet, AliasFreeWeights, LightStage, SelectMode};

pub type Vec3 = nalgebra::Vector3<f64>;
