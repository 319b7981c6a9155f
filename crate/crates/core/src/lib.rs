//! Multichannel replay-speech detection toolkit.
//!
//! Detects replayed (re-recorded) speech from synchronized microphone-array
//! recordings with a learned adaptive beamformer feeding a convolutional-
//! recurrent classifier. Ships the experiment machinery around the detector:
//! a synthetic labeled corpus generator, cross-array mismatch matrices with a
//! channel-leakage guard, equal-error-rate evaluation with Student-t
//! confidence intervals, and budgeted fine-tuning sweeps toward unseen
//! arrays.

pub mod audio;
pub mod device;
pub mod dsp;
pub mod error;
pub mod manifest;
pub mod synth;

pub mod beamformer;
pub mod classifier;
pub mod nn;

pub use error::{Error, Result};
