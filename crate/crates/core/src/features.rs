//! The shared feature path: canonicalize → bandpass → log-mel → render.
//!
//! Training, evaluation, single-clip classification and the streaming
//! monitor all go through these functions so features match exactly.

use thiserror::Error;

use crate::audio_io::{self, AudioClip, AudioError, CLIP_LEN};
use crate::cnn::{ClassProbabilities, CnnError, Model};
use crate::dsp::{self, DspError, NoiseProfile};
use crate::spectrogram::{self, SpectrogramError, SpectrogramImage};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Spectrogram(#[from] SpectrogramError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
}

/// Optional spectral-subtraction stage applied after the bandpass.
#[derive(Debug, Clone)]
pub struct Denoise {
    pub profile: NoiseProfile,
    pub alpha: f64,
    pub beta: f64,
}

impl Denoise {
    /// Profile from a noise-only recording, bandpassed like the signal.
    pub fn from_noise_clip(noise: &AudioClip) -> Result<Self, FeatureError> {
        let std = audio_io::standardize(noise, noise_len(noise))?;
        let filtered = dsp::bandpass(&std)?;
        Ok(Self {
            profile: dsp::estimate_noise_profile(&filtered)?,
            alpha: dsp::DEFAULT_ALPHA,
            beta: dsp::DEFAULT_BETA,
        })
    }
}

fn noise_len(noise: &AudioClip) -> usize {
    let resampled = (noise.len() as u64 * audio_io::SAMPLE_RATE as u64)
        .div_ceil(noise.sample_rate_hz() as u64) as usize;
    resampled.max(spectrogram::WINDOW_LEN)
}

/// Image of an already bandpassed, canonical-length clip.
pub fn filtered_features(filtered: &AudioClip, colored: bool) -> Result<SpectrogramImage, FeatureError> {
    let values = spectrogram::mel_spectrogram(filtered)?;
    Ok(spectrogram::render(&values, colored))
}

/// Full feature path for a clip of any rate and length.
pub fn clip_features(
    clip: &AudioClip,
    colored: bool,
    denoise: Option<&Denoise>,
) -> Result<SpectrogramImage, FeatureError> {
    let std = audio_io::standardize(clip, CLIP_LEN)?;
    let mut filtered = dsp::bandpass(&std)?;
    if let Some(d) = denoise {
        filtered = dsp::spectral_subtract(&filtered, &d.profile, d.alpha, d.beta)?;
    }
    filtered_features(&filtered, colored)
}

pub fn classify_clip(model: &Model, clip: &AudioClip) -> Result<ClassProbabilities, FeatureError> {
    let colored = model.input_shape().channels == 3;
    let image = clip_features(clip, colored, None)?;
    Ok(model.predict(&image)?)
}
