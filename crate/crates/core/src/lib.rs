//! Super-resolution assisted gaze estimation.

pub mod data;
pub mod degrade;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod models;
pub mod report;
pub mod sr;
pub mod util;

pub use error::{Error, Result};
pub use geometry::{angular_error_deg, mean_angular_error, pitchyaw_to_vector, vector_to_pitchyaw, GazeAngles, GazeVector};
pub use image::{psnr_db, ImageU8};

pub type Angles = GazeAngles<f64>;
pub type Regressor = models::GazeRegressor<f32>;
