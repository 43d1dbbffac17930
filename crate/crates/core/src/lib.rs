//! Ultrasound fan-area detection and annotation removal.
//!
//! The fan region of a B-mode image is described by ten parameters
//! ([`geometry::FanParams`]) whose summed implicit field, passed through a
//! sigmoid, gives a per-pixel prior. [`em::fit`] estimates the parameters with
//! an EM loop whose M-step runs [`lbfgs::minimize`]. [`inpaint`] removes
//! bright annotations inside the detected fan, [`synth`] produces labelled
//! test images and [`eval`] scores detections.

pub mod cli;
pub mod em;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod inpaint;
pub mod intensity;
pub mod lbfgs;
pub mod par;
pub mod synth;

pub use error::{Error, Result};
