mod elementwise;
mod linalg;
mod norm;
mod sample;
mod shape;

pub use linalg::Conv2dSpec;
pub use norm::{BnStats, NormMode};
