//! Frame-wise gesture recognition networks.
//!
//! The crate contains everything needed to build, train and score the five
//! video architectures studied for frame-wise gesture labelling: a
//! single-frame CNN, temporal feature pooling, factorized spatiotemporal
//! convolutions with 3-D pooling, bidirectional recurrence (standard or
//! peephole-LSTM cells), and temporal convolutions followed by a
//! bidirectional LSTM.
//!
//! * [`autodiff`] / [`tensor`]: a small tape-based reverse-mode engine.
//! * [`layers`], [`recurrent`]: building blocks.
//! * [`archspec`], [`model`]: architecture strings and executable models.
//! * [`trainer`]: initialization, Adam, learning-rate decay, early stopping.
//! * [`dataio`]: synthetic gesture data, augmentation, fragments, file format.
//! * [`metrics`]: Jaccard index, precision/recall, isolated error rate.
//! * [`inference`]: whole-sequence prediction (stitching, sliding windows).

pub mod archspec;
pub mod autodiff;
mod binio;
pub mod dataio;
pub mod error;
pub mod gradsuite;
pub mod inference;
pub mod kv;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
