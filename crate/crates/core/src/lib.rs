//! Calibrated carotid intima-media thickness (CIMT) measurement.
//!
//! Probability maps of the intima-media band are binarized, measured
//! column by column, converted to micrometres with resize-aware pixel
//! sizes, and compared against expert LI/MA contours. The binarization
//! threshold can be calibrated on validation images against the CIMT
//! error itself.

pub mod band;
pub mod calibration;
pub mod calibrator;
pub mod contours;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod pgm;
pub mod phantom;
pub mod pipeline;
pub mod splits;
pub mod stats;

pub use error::{CimtError, Result};
