//! Weakly-supervised referring image segmentation.
//!
//! The crate implements a two-step framework. Step one learns text-to-image
//! response maps by classifying positive against negative referring
//! expressions, with bilateral cross-modal prompting and a masked-region
//! calibration loss. Step two selects the best response map per object,
//! thresholds it into a binary pseudo label, and trains a text-conditioned
//! segmentation network on those labels. Ground-truth masks and boxes are
//! never consumed by either training step; they exist only for evaluation.

pub mod autodiff;
pub mod calibration;
pub mod checkpoint;
pub mod data;
pub mod config;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod pipeline;
pub mod pseudo_labels;
pub mod response;
pub mod segmentor;
pub mod train;
pub mod viz;
pub mod vocab;

pub use config::RunConfig;
pub use error::{Error, Result};
