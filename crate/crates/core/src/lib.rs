//! Reconstructive sparse code transfer.
//!
//! Images are described by multilayer sparse codes over learned patch
//! dictionaries; a bank of per-position logistic classifiers then maps the
//! code at each pixel to a predicted label patch, and overlapping patch
//! predictions are averaged into a dense label map.

pub mod bench;
pub mod dict;
pub mod encode;
pub mod error;
pub mod grid;
pub mod io;
pub mod ksvd;
pub mod linalg;
pub mod logistic;
pub mod network;
pub mod pipeline;
pub mod seed;
pub mod sparse;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};
