//! Deterministic synthetic extruder recordings.
//!
//! Three recipes stand in for real captures:
//! - ambient: low-frequency-weighted room noise with a 60 Hz mains hum;
//! - extruder normal: a frequency-modulated harmonic stack (stepper tone)
//!   over ambient noise at 10 dB SNR;
//! - extruder fault: the same stack with random dropouts and broadband
//!   clicks, over ambient noise at 5 dB SNR.
//!
//! All randomness comes from one [`SplitMix64`] stream per clip, consumed in
//! a fixed order, so a `(class, seed)` pair always yields the same samples.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::audio_io::{self, AudioClip, AudioError, ClassLabel, CLIP_LEN, SAMPLE_RATE};
use crate::rng::{derive_seed, SplitMix64};

pub const PEAK_LEVEL: f64 = 0.8;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

const FS: f64 = SAMPLE_RATE as f64;
const F0_RANGE: (f64, f64) = (220.0, 280.0);
const N_HARMONICS: usize = 6;
const FM_RATE_HZ: f64 = 0.5;
const FM_DEPTH: f64 = 0.01;
const HUM_HZ: f64 = 60.0;
const HUM_LEVEL: f64 = 0.1;
const NORMAL_SNR_DB: f64 = 10.0;
const FAULT_SNR_DB: f64 = 5.0;
const DROPOUT_RATE: f64 = 3.0;
const DROPOUT_MS: (f64, f64) = (50.0, 150.0);
const CLICK_RATE: f64 = 10.0;
const CLICK_TAU_S: f64 = 0.005;
const CLICK_AMP: f64 = 0.6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("dataset needs at least 3 clips, got {0}")]
    CountTooSmall(usize),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthParams {
    pub class_label: ClassLabel,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(class_label: ClassLabel, seed: u64) -> Self {
        Self { class_label, seed }
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn normalize_peak(x: &mut [f64], level: f64) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = level / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// Unit-RMS one-pole-filtered Gaussian noise plus mains hum.
fn ambient(rng: &mut SplitMix64, len: usize) -> Vec<f64> {
    let hum_phase = rng.uniform(0.0, 2.0 * PI);
    let mut y = 0.0;
    let mut noise: Vec<f64> = (0..len)
        .map(|_| {
            y = 0.95 * y + 0.05 * rng.gaussian();
            y
        })
        .collect();
    let r = rms(&noise);
    if r > 0.0 {
        noise.iter_mut().for_each(|v| *v /= r);
    }
    for (n, v) in noise.iter_mut().enumerate() {
        *v += HUM_LEVEL * (2.0 * PI * HUM_HZ * n as f64 / FS + hum_phase).sin();
    }
    noise
}

/// Harmonic stack with 1/k amplitudes and slow vibrato, peak 1.
fn harmonic_stack(rng: &mut SplitMix64, len: usize) -> Vec<f64> {
    let f0 = rng.uniform(F0_RANGE.0, F0_RANGE.1);
    let fm_phase = rng.uniform(0.0, 2.0 * PI);
    let phases: Vec<f64> = (0..N_HARMONICS).map(|_| rng.uniform(0.0, 2.0 * PI)).collect();
    // Phase of f0·(1 + d·sin(2π·r·t + ψ)) integrated in closed form.
    let fm_amp = FM_DEPTH * f0 / FM_RATE_HZ;
    let mut x: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / FS;
            let base = 2.0 * PI * f0 * t - fm_amp * (2.0 * PI * FM_RATE_HZ * t + fm_phase).cos();
            phases
                .iter()
                .enumerate()
                .map(|(i, ph)| {
                    let k = (i + 1) as f64;
                    (k * base + ph).sin() / k
                })
                .sum()
        })
        .collect();
    normalize_peak(&mut x, 1.0);
    x
}

fn mix_noise(signal: &mut [f64], noise: &[f64], snr_db: f64) {
    let (ps, pn) = (rms(signal), rms(noise));
    if pn == 0.0 {
        return;
    }
    let g = ps / pn / 10f64.powf(snr_db / 20.0);
    for (s, n) in signal.iter_mut().zip(noise) {
        *s += g * n;
    }
}

/// Closes the gate for random intervals arriving as a Poisson process.
fn apply_dropouts(rng: &mut SplitMix64, x: &mut [f64]) {
    let dur = x.len() as f64 / FS;
    let mut t = 0.0;
    loop {
        t += rng.exponential(DROPOUT_RATE);
        if t >= dur {
            break;
        }
        let width = rng.uniform(DROPOUT_MS.0, DROPOUT_MS.1) / 1000.0;
        let start = (t * FS) as usize;
        let end = (((t + width) * FS) as usize).min(x.len());
        x[start..end].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Adds exponentially decaying white bursts at Poisson onsets.
fn add_clicks(rng: &mut SplitMix64, x: &mut [f64]) {
    let dur = x.len() as f64 / FS;
    let tail = (8.0 * CLICK_TAU_S * FS) as usize;
    let mut t = 0.0;
    loop {
        t += rng.exponential(CLICK_RATE);
        if t >= dur {
            break;
        }
        let start = (t * FS) as usize;
        for n in 0..tail.min(x.len() - start) {
            let env = (-(n as f64) / (CLICK_TAU_S * FS)).exp();
            x[start + n] += CLICK_AMP * env * rng.gaussian();
        }
    }
}

/// Synthesizes `len` samples of the given class, peak-normalized to 0.8.
pub fn synth_signal(class_label: ClassLabel, seed: u64, len: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut x = match class_label {
        ClassLabel::Ambient => ambient(&mut rng, len),
        ClassLabel::ExtruderNormal => {
            let mut s = harmonic_stack(&mut rng, len);
            let noise = ambient(&mut rng, len);
            mix_noise(&mut s, &noise, NORMAL_SNR_DB);
            s
        }
        ClassLabel::ExtruderFault => {
            let mut s = harmonic_stack(&mut rng, len);
            apply_dropouts(&mut rng, &mut s);
            add_clicks(&mut rng, &mut s);
            let noise = ambient(&mut rng, len);
            mix_noise(&mut s, &noise, FAULT_SNR_DB);
            s
        }
    };
    normalize_peak(&mut x, PEAK_LEVEL);
    x
}

/// One canonical-length (2.08 s, 16 kHz) clip.
pub fn synth_clip(params: SynthParams) -> AudioClip {
    AudioClip::new(synth_signal(params.class_label, params.seed, CLIP_LEN), SAMPLE_RATE)
        .expect("synthetic samples are finite")
}

/// Class of the `index`-th clip: round-robin, so any remainder goes to
/// ambient first, then extruder normal.
pub fn dataset_class(index: usize) -> ClassLabel {
    ClassLabel::ALL[index % 3]
}

/// Writes `count` clips and a JSONL manifest into `out_dir` and returns
/// the manifest path.
pub fn synth_dataset(count: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
    if count < 3 {
        return Err(SynthError::CountTooSmall(count));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let class = dataset_class(i);
        let clip = synth_clip(SynthParams::new(class, derive_seed(seed, i as u64)));
        let name = format!("clip_{i:04}_{}.wav", class.name());
        audio_io::write_wav(&clip, out_dir.join(&name))?;
        entries.push((name, class, None));
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    audio_io::write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex64;
    use rustfft::FftPlanner;

    fn power_spectrum(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        buf[..x.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    #[test]
    fn deterministic_per_class_and_seed() {
        for class in ClassLabel::ALL {
            let a = synth_clip(SynthParams::new(class, 17));
            let b = synth_clip(SynthParams::new(class, 17));
            assert_eq!(a, b);
            assert_ne!(a, synth_clip(SynthParams::new(class, 18)));
            assert_eq!(a.len(), CLIP_LEN);
            assert!((a.peak() - PEAK_LEVEL).abs() < 1e-12);
            assert!(a.samples().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }

    #[test]
    fn normal_peak_is_fundamental() {
        let bin_hz = SAMPLE_RATE as f64 / CLIP_LEN as f64;
        for seed in 0..8 {
            let clip = synth_clip(SynthParams::new(ClassLabel::ExtruderNormal, seed));
            let p = power_spectrum(clip.samples());
            let k = p.iter().enumerate().skip(1).max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let f = k as f64 * bin_hz;
            assert!(f >= 220.0 - bin_hz && f <= 280.0 + bin_hz, "seed {seed}: peak at {f} Hz");
        }
    }

    #[test]
    fn fault_has_broadband_energy() {
        let bin_hz = SAMPLE_RATE as f64 / CLIP_LEN as f64;
        let lo = (3000.0 / bin_hz).ceil() as usize;
        for seed in 0..8 {
            let normal = synth_clip(SynthParams::new(ClassLabel::ExtruderNormal, seed));
            let fault = synth_clip(SynthParams::new(ClassLabel::ExtruderFault, seed));
            let hn: f64 = power_spectrum(normal.samples())[lo..].iter().sum();
            let hf: f64 = power_spectrum(fault.samples())[lo..].iter().sum();
            assert!(hf >= 2.0 * hn, "seed {seed}: fault {hf} normal {hn}");
        }
    }

    #[test]
    fn dataset_class_balance() {
        let count = |n: usize| {
            let mut c = [0usize; 3];
            (0..n).for_each(|i| c[dataset_class(i).index()] += 1);
            c
        };
        assert_eq!(count(256), [86, 85, 85]);
        assert_eq!(count(3), [1, 1, 1]);
        assert_eq!(count(5), [2, 2, 1]);
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_dataset(6, 99, a.path()).unwrap();
        let mb = synth_dataset(6, 99, b.path()).unwrap();
        assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap());
        let entries = audio_io::load_manifest(&ma).unwrap();
        assert_eq!(entries.len(), 6);
        for e in &entries {
            let name = e.clip_path.file_name().unwrap();
            assert_eq!(fs::read(&e.clip_path).unwrap(), fs::read(b.path().join(name)).unwrap());
            let clip = audio_io::read_wav(&e.clip_path).unwrap();
            assert_eq!(clip.len(), CLIP_LEN);
        }
        assert!(matches!(synth_dataset(2, 1, a.path()), Err(SynthError::CountTooSmall(2))));
    }
}
