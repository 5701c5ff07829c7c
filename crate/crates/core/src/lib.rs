//! Interactive binary segmentation inside a bounding box: a dilated
//! convolutional segmenter proposes a mask, then graph-cut label updates and
//! fine-tuning of the classifier head on the image itself refine it, with or
//! without user scribbles.

pub mod cli;
pub mod crf;
pub mod error;
pub mod eval;
pub mod geodesic;
pub mod grid;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod rle;
pub mod service;

pub use error::{Error, Result};
