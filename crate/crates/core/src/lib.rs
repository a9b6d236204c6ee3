//! Multi-camera BEV segmentation: geometry, attention blocks, the assembled
//! network, a synthetic scene generator and the training loop.

pub mod attention;
pub mod class;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod heads;
pub mod model;
pub mod nn;
pub mod synthscene;
pub mod train;
pub mod vfi;
pub mod vtencoder;

pub use class::Class;
pub use error::{CoreError, Result};
