//! Cloud transform layers: data-dependent rasterization of point features
//! onto 2D/3D grids, grid convolution, and bilinear de-rasterization, with the
//! multi-head blocks and task models built from them.

pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod gridnn;
pub mod losses;
pub mod models;
pub mod params;
pub mod raster;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Forward, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
