//! Synthetic depth for missing-modality building footprint segmentation.
//!
//! A conditional GAN learns to translate RGB tiles into normalized height
//! (nDSM). An encoder-decoder segmentation network consumes RGB stacked with
//! depth, which lets a model trained with real depth run on RGB-only input
//! by substituting the generated channel.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gan;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod segnet;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
