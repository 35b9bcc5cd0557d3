//! Contactless acoustic fault detection for FDM extruders.
//!
//! Pipeline: WAV ingestion ([`audio_io`]) → 100–1200 Hz bandpass and
//! optional spectral subtraction ([`dsp`]) → 64×64 log-mel images
//! ([`spectrogram`]) → a small CNN ([`cnn`]) trained by [`trainer`] →
//! per-window fault probabilities with smoothing and hysteresis
//! ([`monitor`]). [`synth`] generates deterministic recordings of every
//! class so the whole chain runs without printer hardware.

pub mod audio_io;
pub mod cnn;
pub mod dsp;
pub mod features;
pub mod metrics;
pub mod monitor;
pub mod rng;
pub mod spectrogram;
pub mod synth;
pub mod trainer;

pub use audio_io::{AudioClip, ClassLabel, LabeledExample, Split};
