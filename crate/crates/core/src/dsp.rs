//! Band limiting and noise reduction ahead of feature extraction.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::audio_io::{AudioClip, SAMPLE_RATE};
use crate::spectrogram::{istft, stft, ComplexSpectra, StftConfig, SpectrogramError, HOP_LEN, N_BINS, WINDOW_LEN};

pub const BAND_LOW_HZ: f64 = 100.0;
pub const BAND_HIGH_HZ: f64 = 1200.0;

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_BETA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("expected {expected} Hz audio, got {actual} Hz")]
    WrongSampleRate { expected: u32, actual: u32 },
    #[error("noise clip too short: {len} samples, need at least {need}")]
    ClipTooShort { len: usize, need: usize },
    #[error("noise profile has {actual} bins, expected {expected}")]
    ProfileLengthMismatch { expected: usize, actual: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Spectrogram(#[from] SpectrogramError),
}

/// Normalized biquad (a0 = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiquadCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadCoeffs {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self { b0: b[0] / a[0], b1: b[1] / a[0], b2: b[2] / a[0], a1: a[1] / a[0], a2: a[2] / a[0] }
    }

    /// Second-order lowpass via the bilinear transform, prewarped at `f0`.
    pub fn lowpass(f0: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (cw, alpha) = (w0.cos(), w0.sin() / (2.0 * q));
        Self::normalized(
            [(1.0 - cw) / 2.0, 1.0 - cw, (1.0 - cw) / 2.0],
            [1.0 + alpha, -2.0 * cw, 1.0 - alpha],
        )
    }

    /// Second-order highpass via the bilinear transform, prewarped at `f0`.
    pub fn highpass(f0: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (cw, alpha) = (w0.cos(), w0.sin() / (2.0 * q));
        Self::normalized(
            [(1.0 + cw) / 2.0, -(1.0 + cw), (1.0 + cw) / 2.0],
            [1.0 + alpha, -2.0 * cw, 1.0 - alpha],
        )
    }

    /// Moduli of the roots of z² + a1·z + a2.
    pub fn pole_radii(&self) -> [f64; 2] {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc < 0.0 {
            let r = self.a2.sqrt();
            [r, r]
        } else {
            let s = disc.sqrt();
            [((-self.a1 + s) / 2.0).abs(), ((-self.a1 - s) / 2.0).abs()]
        }
    }

    pub fn is_stable(&self) -> bool {
        self.pole_radii().iter().all(|&r| r < 1.0)
    }

    /// |H(e^{jω})| at `freq` Hz.
    pub fn magnitude_at(&self, freq: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * freq / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b0 + z1 * self.b1 + z2 * self.b2;
        let den = 1.0 + z1 * self.a1 + z2 * self.a2;
        (num / den).norm()
    }
}

/// Q values of the two sections of a 4th-order Butterworth.
pub fn butterworth4_q() -> [f64; 2] {
    [1.0 / (2.0 * (PI / 8.0).cos()), 1.0 / (2.0 * (3.0 * PI / 8.0).cos())]
}

/// Biquad cascade with transposed direct-form II state per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCascade {
    stages: Vec<BiquadCoeffs>,
    state: Vec<[f64; 2]>,
}

impl FilterCascade {
    pub fn new(stages: Vec<BiquadCoeffs>) -> Self {
        let state = vec![[0.0; 2]; stages.len()];
        Self { stages, state }
    }

    pub fn stages(&self) -> &[BiquadCoeffs] {
        &self.stages
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = [0.0; 2]);
    }

    pub fn magnitude_at(&self, freq: f64, fs: f64) -> f64 {
        self.stages.iter().map(|s| s.magnitude_at(freq, fs)).product()
    }

    #[inline]
    pub fn process_sample(&mut self, x: f64) -> f64 {
        let mut y = x;
        for (c, s) in self.stages.iter().zip(self.state.iter_mut()) {
            let input = y;
            y = c.b0 * input + s[0];
            s[0] = c.b1 * input - c.a1 * y + s[1];
            s[1] = c.b2 * input - c.a2 * y;
        }
        y
    }

    /// Filters in place, carrying state across calls.
    pub fn process_in_place(&mut self, samples: &mut [f64]) {
        for x in samples {
            *x = self.process_sample(*x);
        }
    }
}

/// 4th-order Butterworth highpass at 100 Hz followed by a 4th-order
/// Butterworth lowpass at 1200 Hz, for 16 kHz audio.
pub fn design_bandpass() -> FilterCascade {
    let fs = SAMPLE_RATE as f64;
    let [q1, q2] = butterworth4_q();
    FilterCascade::new(vec![
        BiquadCoeffs::highpass(BAND_LOW_HZ, q1, fs),
        BiquadCoeffs::highpass(BAND_LOW_HZ, q2, fs),
        BiquadCoeffs::lowpass(BAND_HIGH_HZ, q1, fs),
        BiquadCoeffs::lowpass(BAND_HIGH_HZ, q2, fs),
    ])
}

pub fn apply_filter(cascade: &mut FilterCascade, clip: &AudioClip) -> Result<AudioClip, DspError> {
    if clip.sample_rate_hz() != SAMPLE_RATE {
        return Err(DspError::WrongSampleRate { expected: SAMPLE_RATE, actual: clip.sample_rate_hz() });
    }
    let mut out = clip.samples().to_vec();
    cascade.process_in_place(&mut out);
    AudioClip::new(out, SAMPLE_RATE).map_err(|e| DspError::InvalidParameter(e.to_string()))
}

/// Convenience: bandpass with a fresh cascade.
pub fn bandpass(clip: &AudioClip) -> Result<AudioClip, DspError> {
    apply_filter(&mut design_bandpass(), clip)
}

/// Mean STFT magnitude per bin of a noise-only recording.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseProfile {
    mean_magnitude: Vec<f64>,
}

impl NoiseProfile {
    pub fn new(mean_magnitude: Vec<f64>) -> Result<Self, DspError> {
        if mean_magnitude.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(DspError::InvalidParameter("profile entries must be finite and >= 0".into()));
        }
        Ok(Self { mean_magnitude })
    }

    pub fn zeros() -> Self {
        Self { mean_magnitude: vec![0.0; N_BINS] }
    }

    pub fn mean_magnitude(&self) -> &[f64] {
        &self.mean_magnitude
    }

    pub fn len(&self) -> usize {
        self.mean_magnitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_magnitude.is_empty()
    }
}

pub fn estimate_noise_profile(noise_clip: &AudioClip) -> Result<NoiseProfile, DspError> {
    if noise_clip.sample_rate_hz() != SAMPLE_RATE {
        return Err(DspError::WrongSampleRate {
            expected: SAMPLE_RATE,
            actual: noise_clip.sample_rate_hz(),
        });
    }
    if noise_clip.len() < WINDOW_LEN {
        return Err(DspError::ClipTooShort { len: noise_clip.len(), need: WINDOW_LEN });
    }
    let spectra = stft(noise_clip, StftConfig::default())?;
    let mut mean = vec![0.0; N_BINS];
    for frame in &spectra.frames {
        for (m, x) in mean.iter_mut().zip(frame) {
            *m += x.norm();
        }
    }
    let n = spectra.frames.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    NoiseProfile::new(mean)
}

/// Applies max(|Y| − alpha·N, beta·|Y|) per bin in place, keeping phase.
/// Callers validate the profile length and parameters.
pub fn subtract_spectra(spectra: &mut ComplexSpectra, profile: &NoiseProfile, alpha: f64, beta: f64) {
    for frame in &mut spectra.frames {
        for (y, &n) in frame.iter_mut().zip(profile.mean_magnitude()) {
            let mag = y.norm();
            if mag == 0.0 {
                continue;
            }
            let target = (mag - alpha * n).max(beta * mag);
            *y *= target / mag;
        }
    }
}

/// Magnitude spectral subtraction with a relative floor:
/// |X| = max(|Y| − alpha·N, beta·|Y|), keeping the phase of Y.
pub fn spectral_subtract(
    clip: &AudioClip,
    profile: &NoiseProfile,
    alpha: f64,
    beta: f64,
) -> Result<AudioClip, DspError> {
    if profile.len() != N_BINS {
        return Err(DspError::ProfileLengthMismatch { expected: N_BINS, actual: profile.len() });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(DspError::InvalidParameter(format!("alpha must be >= 0, got {alpha}")));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(DspError::InvalidParameter(format!("beta must be in [0, 1), got {beta}")));
    }
    // Pad half a window of zeros on each side so every input sample lies
    // under two frames; otherwise the single-frame edges get divided by a
    // near-zero squared-window sum once the spectrum has been modified.
    let pad = WINDOW_LEN / 2;
    let mut padded = vec![0.0; clip.len() + 2 * pad];
    padded[pad..pad + clip.len()].copy_from_slice(clip.samples());
    // Round the tail up to a whole hop so the last frame reaches the end.
    let rem = (padded.len() - WINDOW_LEN) % HOP_LEN;
    if rem != 0 {
        padded.resize(padded.len() + HOP_LEN - rem, 0.0);
    }
    let padded = AudioClip::new(padded, clip.sample_rate_hz())
        .map_err(|e| DspError::InvalidParameter(e.to_string()))?;
    let mut spectra = stft(&padded, StftConfig::default())?;
    subtract_spectra(&mut spectra, profile, alpha, beta);
    let out = istft(&spectra).into_samples();
    AudioClip::new(out[pad..pad + clip.len()].to_vec(), clip.sample_rate_hz())
        .map_err(|e| DspError::InvalidParameter(e.to_string()))
}
