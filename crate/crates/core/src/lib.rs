//! Numerical core for volumetric brainstem parcellation.
//!
//! Everything in this crate is a pure function of its inputs and works
//! without `std` (only `alloc` is required). File formats, timing and the
//! command-line front end live in the `stemnet` crate.
//!
//! Tensors use the `[batch, channel, depth, height, width]` layout
//! throughout. Spatial volumes store x fastest, so a volume with extents
//! `(x, y, z)` maps onto a tensor of shape `[.., z, y, x]`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod parallel;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod scalar;
pub mod simd;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use labels::{Structure, NUM_CLASSES};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use volume::{LabelVolume, Volume};
