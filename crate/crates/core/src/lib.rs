pub mod body_language;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod fixtures;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod relation;
pub mod runner;

mod archive;

pub use error::{Error, Result};
pub use evalmetrics::{evaluate, iou, BBox, EvalReport};
