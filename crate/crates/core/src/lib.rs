//! Roto-translation equivariant convolutional pose regression.
//!
//! The crate is split along the pipeline:
//!
//! - [`geom`]: SE(2)/SE(3) algebra, quaternions and the planar camera model.
//! - [`tensor`]: dense arrays with a reverse-mode differentiation tape.
//! - [`gconv`]: lifting and group convolutions over the plane extended by C_N.
//! - [`model`]: backbones, regression heads, the uncertainty-weighted pose loss
//!   and the training loop.
//! - [`synth`]: planar-scene rendering, image warping and pose datasets.
//! - [`metrics`]: median errors and threshold accuracy.

pub mod error;
pub mod gconv;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
