//! Building blocks for one-stage detection of lumbar discs and vertebrae from
//! sagittal MRI slice stacks.
//!
//! The crate covers everything around the network itself:
//!
//! * [`ingest`]: exam loading, geometry normalization, augmentation and the
//!   synthetic phantom generator.
//! * [`encoding`]: binary one-channel-per-class heatmaps and short-range
//!   offset targets.
//! * [`objectives`]: focal / L1 losses and the gradient-guided association
//!   of the offset loss with the heatmap loss.
//! * [`decode`]: Hough voting and top-k keypoint selection.
//! * [`metrics`]: matching, PCK, precision / recall / F1 and micro AP.

pub mod anatomy;
pub mod decode;
pub mod encoding;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod objectives;
pub mod outputs;

pub use anatomy::{Branch, ExamAnnotation, ExamRecord, KeypointAnnotation, Label, Point, Structure};
pub use error::{Error, Result};
pub use outputs::ModelOutputs;
