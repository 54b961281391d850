//! Ensemble auto-annotation with a learned per-pixel quality filter for
//! semi-supervised semantic segmentation.

pub mod cli;
pub mod ensemble;
pub mod gradcheck;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod qualityfilter;
pub mod segmodel;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
