//! STFT, mel filterbank and spectrogram images.
//!
//! Images are 64 mel bins by 64 time frames. Internally rows are indexed by
//! ascending mel bin; only [`export_image`] flips them so that frequency
//! increases upward in the written file.

use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio_io::{AudioClip, CLIP_LEN, SAMPLE_RATE};

pub const WINDOW_LEN: usize = 1024;
pub const HOP_LEN: usize = 512;
pub const N_BINS: usize = WINDOW_LEN / 2 + 1;
pub const N_MELS: usize = 64;
pub const N_FRAMES: usize = 64;
pub const MEL_FMIN: f64 = 50.0;
pub const MEL_FMAX: f64 = 2000.0;

const LOG_FLOOR: f64 = 1e-10;
const WOLA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SpectrogramError {
    #[error("clip too short: {len} samples, need at least {need}")]
    ClipTooShort { len: usize, need: usize },
    #[error("clip has {len} samples, expected {expected}")]
    WrongLength { len: usize, expected: usize },
    #[error("bad mel range: {0}")]
    BadRange(String),
    #[error("image has no pixel data; call render first")]
    NotRendered,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// STFT framing. The hop is always half the window, which makes the
/// periodic Hann window constant-overlap-add.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    window_len: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window_len: WINDOW_LEN }
    }
}

impl StftConfig {
    /// `window_len` must be even and at least 2.
    pub fn new(window_len: usize) -> Option<Self> {
        (window_len >= 2 && window_len.is_multiple_of(2)).then_some(Self { window_len })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.window_len / 2
    }

    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Periodic Hann: w[n] = 0.5 − 0.5·cos(2πn/W).
    pub fn window(&self) -> Vec<f64> {
        hann_periodic(self.window_len)
    }

    pub fn frame_count(&self, signal_len: usize) -> usize {
        if signal_len < self.window_len {
            0
        } else {
            (signal_len - self.window_len) / self.hop() + 1
        }
    }
}

pub fn hann_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Half-spectrum STFT frames plus what is needed to invert them.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectra {
    /// `frames[t][k]`, k in `0..=W/2`.
    pub frames: Vec<Vec<Complex64>>,
    pub config: StftConfig,
    /// Length of the analysed signal; the inverse reproduces this length.
    pub signal_len: usize,
    pub sample_rate_hz: u32,
}

fn fft_pair(len: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(len), planner.plan_fft_inverse(len))
}

pub fn stft(clip: &AudioClip, cfg: StftConfig) -> Result<ComplexSpectra, SpectrogramError> {
    let w = cfg.window_len();
    let x = clip.samples();
    if x.len() < w {
        return Err(SpectrogramError::ClipTooShort { len: x.len(), need: w });
    }
    let window = cfg.window();
    let (fwd, _) = fft_pair(w);
    let mut buf = vec![Complex64::default(); w];
    let mut scratch = vec![Complex64::default(); fwd.get_inplace_scratch_len()];
    let frames = (0..cfg.frame_count(x.len()))
        .map(|t| {
            let seg = &x[t * cfg.hop()..t * cfg.hop() + w];
            for ((b, &s), &wn) in buf.iter_mut().zip(seg).zip(&window) {
                *b = Complex64::new(s * wn, 0.0);
            }
            fwd.process_with_scratch(&mut buf, &mut scratch);
            buf[..cfg.n_bins()].to_vec()
        })
        .collect();
    Ok(ComplexSpectra {
        frames,
        config: cfg,
        signal_len: x.len(),
        sample_rate_hz: clip.sample_rate_hz(),
    })
}

/// Weighted overlap-add inverse: each frame is inverse transformed,
/// multiplied by the synthesis (= analysis) window, summed, and divided by
/// the overlap-added squared window (floored at 1e-8).
pub fn istft(spectra: &ComplexSpectra) -> AudioClip {
    let cfg = spectra.config;
    let (w, hop, bins) = (cfg.window_len(), cfg.hop(), cfg.n_bins());
    let covered = if spectra.frames.is_empty() { 0 } else { (spectra.frames.len() - 1) * hop + w };
    let len = spectra.signal_len.max(covered);
    let window = cfg.window();
    let (_, inv) = fft_pair(w);
    let mut scratch = vec![Complex64::default(); inv.get_inplace_scratch_len()];
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::default(); w];
    for (t, frame) in spectra.frames.iter().enumerate() {
        buf[..bins].copy_from_slice(&frame[..bins]);
        // Hermitian extension of the half spectrum.
        for k in 1..w - bins + 1 {
            buf[w - k] = frame[k].conj();
        }
        buf[0].im = 0.0;
        buf[w / 2].im = 0.0;
        inv.process_with_scratch(&mut buf, &mut scratch);
        let start = t * hop;
        for n in 0..w {
            out[start + n] += buf[n].re / w as f64 * window[n];
            norm[start + n] += window[n] * window[n];
        }
    }
    for (o, d) in out.iter_mut().zip(&norm) {
        *o /= d.max(WOLA_FLOOR);
    }
    out.truncate(spectra.signal_len);
    AudioClip::new(out, spectra.sample_rate_hz).expect("finite spectra give finite samples")
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters, one row per filter, `window_len/2 + 1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    rows: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Builds `n_mel` triangular filters whose centers are equally spaced in
/// mel between `f_min` and `f_max`. Each row is scaled so its largest
/// weight is exactly 1.
pub fn mel_filterbank(
    n_mel: usize,
    f_min: f64,
    f_max: f64,
    window_len: usize,
    sample_rate: u32,
) -> Result<MelFilterbank, SpectrogramError> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mel == 0 || !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(SpectrogramError::BadRange(format!(
            "need 0 <= f_min < f_max <= {nyquist}, got {f_min}..{f_max}"
        )));
    }
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let points: Vec<f64> = (0..n_mel + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mel + 1) as f64))
        .collect();
    let n_bins = window_len / 2 + 1;
    let bin_hz = sample_rate as f64 / window_len as f64;
    let mut rows = Vec::with_capacity(n_mel);
    for i in 0..n_mel {
        let (l, c, r) = (points[i], points[i + 1], points[i + 2]);
        let mut row: Vec<f64> = (0..n_bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
            })
            .collect();
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak > 0.0 {
            row.iter_mut().for_each(|w| *w /= peak);
        } else {
            // Narrower than one bin: fall back to the nearest bin.
            let k = ((c / bin_hz).round() as usize).min(n_bins - 1);
            row[k] = 1.0;
        }
        rows.push(row);
    }
    Ok(MelFilterbank { rows, centers_hz: points[1..=n_mel].to_vec() })
}

/// The 64-band 50–2000 Hz filterbank used by the feature pipeline.
pub fn canonical_filterbank() -> &'static MelFilterbank {
    static FB: OnceLock<MelFilterbank> = OnceLock::new();
    FB.get_or_init(|| {
        mel_filterbank(N_MELS, MEL_FMIN, MEL_FMAX, WINDOW_LEN, SAMPLE_RATE)
            .expect("canonical mel range is valid")
    })
}

/// Normalized log-mel image, optionally rendered to pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramImage {
    /// Row-major `[mel][frame]`, each in [0, 1].
    values: Vec<f64>,
    /// Row-major `[mel][frame][channel]`, present after [`render`].
    pixels: Option<Vec<f64>>,
    channels: usize,
}

impl SpectrogramImage {
    pub const HEIGHT: usize = N_MELS;
    pub const WIDTH: usize = N_FRAMES;

    /// Wraps precomputed values; they must already lie in [0, 1].
    pub fn from_values(values: Vec<f64>) -> Option<Self> {
        (values.len() == N_MELS * N_FRAMES && values.iter().all(|v| (0.0..=1.0).contains(v)))
            .then_some(Self { values, pixels: None, channels: 0 })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * N_FRAMES + frame]
    }

    pub fn pixels(&self) -> Option<&[f64]> {
        self.pixels.as_deref()
    }

    /// 0 until rendered, then 1 (grayscale) or 3 (colored).
    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// log10 mel power of a canonical-length clip, min-max normalized.
pub fn mel_spectrogram(clip: &AudioClip) -> Result<SpectrogramImage, SpectrogramError> {
    if clip.len() < CLIP_LEN {
        return Err(SpectrogramError::ClipTooShort { len: clip.len(), need: CLIP_LEN });
    }
    if clip.len() > CLIP_LEN {
        return Err(SpectrogramError::WrongLength { len: clip.len(), expected: CLIP_LEN });
    }
    let spectra = stft(clip, StftConfig::default())?;
    debug_assert_eq!(spectra.frames.len(), N_FRAMES);
    let fb = canonical_filterbank();
    let mut logv = vec![0.0; N_MELS * N_FRAMES];
    let mut power = vec![0.0; N_BINS];
    for (t, frame) in spectra.frames.iter().enumerate() {
        for (p, x) in power.iter_mut().zip(frame) {
            *p = x.norm_sqr();
        }
        for (m, e) in fb.apply(&power).into_iter().enumerate() {
            logv[m * N_FRAMES + t] = (e + LOG_FLOOR).log10();
        }
    }
    let lo = logv.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        logv.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; logv.len()]
    };
    Ok(SpectrogramImage { values, pixels: None, channels: 0 })
}

/// Colormap control points at v = 0, 0.25, 0.5, 0.75, 1.
pub const COLORMAP: [[f64; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.229, 0.322, 0.545],
    [0.127, 0.566, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

pub fn colormap(v: f64) -> [f64; 3] {
    let x = v.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let f = x - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f, a[2] + (b[2] - a[2]) * f]
}

pub fn render(spec: &SpectrogramImage, colored: bool) -> SpectrogramImage {
    let (channels, pixels) = if colored {
        (3, spec.values.iter().flat_map(|&v| colormap(v)).collect())
    } else {
        (1, spec.values.clone())
    };
    SpectrogramImage { values: spec.values.clone(), pixels: Some(pixels), channels }
}

/// Encodes a rendered image as binary PGM (1 channel) or PPM (3 channels).
pub fn encode_image(spec: &SpectrogramImage) -> Result<Vec<u8>, SpectrogramError> {
    let pixels = spec.pixels.as_ref().ok_or(SpectrogramError::NotRendered)?;
    let c = spec.channels;
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{N_FRAMES} {N_MELS}\n255\n").into_bytes();
    for mel in (0..N_MELS).rev() {
        let row = &pixels[mel * N_FRAMES * c..(mel + 1) * N_FRAMES * c];
        out.extend(row.iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn export_image(spec: &SpectrogramImage, path: impl AsRef<Path>) -> Result<(), SpectrogramError> {
    let bytes = encode_image(spec)?;
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64, len: usize) -> AudioClip {
        let x = (0..len)
            .map(|n| amp * (2.0 * PI * freq * n as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        AudioClip::new(x, SAMPLE_RATE).unwrap()
    }

    /// Direct O(N²) DFT, independent of the FFT path.
    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold(Complex64::default(), |acc, (i, &v)| {
                    let ang = -2.0 * PI * (k * i % n) as f64 / n as f64;
                    acc + Complex64::new(v * ang.cos(), v * ang.sin())
                })
            })
            .collect()
    }

    #[test]
    fn stft_frames_and_degenerate_inputs() {
        let zero = AudioClip::new(vec![0.0; CLIP_LEN], SAMPLE_RATE).unwrap();
        let s = stft(&zero, StftConfig::default()).unwrap();
        assert_eq!(s.frames.len(), 64);
        assert!(s.frames.iter().flatten().all(|c| c.norm() == 0.0));
        assert_eq!(s.frames[0].len(), 513);

        let mut imp = vec![0.0; 2048];
        imp[0] = 1.0;
        let s = stft(&AudioClip::new(imp, SAMPLE_RATE).unwrap(), StftConfig::default()).unwrap();
        assert!(s.frames[0].iter().all(|c| c.norm() == 0.0));

        let short = AudioClip::new(vec![0.0; 1023], SAMPLE_RATE).unwrap();
        assert!(matches!(
            stft(&short, StftConfig::default()),
            Err(SpectrogramError::ClipTooShort { .. })
        ));
    }

    #[test]
    fn stft_matches_direct_dft() {
        let clip = sine(437.0, 0.7, 1536);
        let s = stft(&clip, StftConfig::default()).unwrap();
        let w = hann_periodic(WINDOW_LEN);
        let seg: Vec<f64> = clip.samples()[512..1536].iter().zip(&w).map(|(a, b)| a * b).collect();
        let direct = naive_dft(&seg);
        for (got, want) in s.frames[1].iter().zip(&direct).take(N_BINS) {
            assert!((got - want).norm() < 1e-9);
        }
    }

    #[test]
    fn cola_sum_is_one() {
        let w = hann_periodic(WINDOW_LEN);
        for n in 0..HOP_LEN {
            let s = w[n] + w[n + HOP_LEN];
            assert!((s - 1.0).abs() <= 1e-12, "n={n} sum={s}");
        }
    }

    #[test]
    fn parseval_per_frame() {
        let clip = sine(600.0, 0.5, 4096);
        let s = stft(&clip, StftConfig::default()).unwrap();
        let w = hann_periodic(WINDOW_LEN);
        for (t, frame) in s.frames.iter().enumerate() {
            let time: f64 = clip.samples()[t * HOP_LEN..t * HOP_LEN + WINDOW_LEN]
                .iter()
                .zip(&w)
                .map(|(x, wn)| (x * wn).powi(2))
                .sum();
            let mut freq = frame[0].norm_sqr() + frame[N_BINS - 1].norm_sqr();
            freq += 2.0 * frame[1..N_BINS - 1].iter().map(|c| c.norm_sqr()).sum::<f64>();
            let rel = (freq - WINDOW_LEN as f64 * time).abs() / (WINDOW_LEN as f64 * time);
            assert!(rel < 1e-9, "frame {t}: rel {rel}");
        }
    }

    fn interior_error(clip: &AudioClip) -> f64 {
        let back = istft(&stft(clip, StftConfig::default()).unwrap());
        assert_eq!(back.len(), clip.len());
        let peak = clip.peak();
        let end = StftConfig::default().frame_count(clip.len()) * HOP_LEN;
        clip.samples()[WINDOW_LEN..end]
            .iter()
            .zip(&back.samples()[WINDOW_LEN..end])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / peak
    }

    #[test]
    fn istft_round_trip() {
        assert!(interior_error(&sine(600.0, 0.5, CLIP_LEN)) <= 1e-6);
        let zero = ComplexSpectra {
            frames: vec![vec![Complex64::default(); N_BINS]; 5],
            config: StftConfig::default(),
            signal_len: 3072,
            sample_rate_hz: SAMPLE_RATE,
        };
        let z = istft(&zero);
        assert_eq!(z.len(), 3072);
        assert!(z.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn mel_scale_values() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rows() {
        let fb = canonical_filterbank();
        assert_eq!(fb.rows().len(), 64);
        for row in fb.rows() {
            assert_eq!(row.len(), 513);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0));
            assert_eq!(row.iter().cloned().fold(0.0, f64::max), 1.0);
        }
        // Centers equally spaced in mel, so each triangle's support reaches
        // into its neighbours.
        let mels: Vec<f64> = fb.centers_hz().iter().map(|&f| hz_to_mel(f)).collect();
        let step = mels[1] - mels[0];
        assert!(step > 0.0);
        assert!(mels.windows(2).all(|p| ((p[1] - p[0]) - step).abs() < 1e-9));
        assert!(matches!(
            mel_filterbank(64, 2000.0, 50.0, 1024, 16000),
            Err(SpectrogramError::BadRange(_))
        ));
        assert!(matches!(
            mel_filterbank(64, 50.0, 9000.0, 1024, 16000),
            Err(SpectrogramError::BadRange(_))
        ));
    }

    #[test]
    fn mel_spectrogram_cases() {
        let zero = AudioClip::new(vec![0.0; CLIP_LEN], SAMPLE_RATE).unwrap();
        let img = mel_spectrogram(&zero).unwrap();
        assert_eq!(img.values().len(), 64 * 64);
        assert!(img.values().iter().all(|&v| v == 0.0));

        let img = mel_spectrogram(&sine(600.0, 0.5, CLIP_LEN)).unwrap();
        let fb = canonical_filterbank();
        let nearest = fb
            .centers_hz()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 600.0).abs().total_cmp(&(b.1 - 600.0).abs()))
            .unwrap()
            .0;
        let row_max = (0..64).map(|t| img.value(nearest, t)).fold(0.0, f64::max);
        assert_eq!(row_max, 1.0);
        assert_eq!(img.values().iter().cloned().fold(1.0, f64::min), 0.0);

        let short = AudioClip::new(vec![0.0; 2048], SAMPLE_RATE).unwrap();
        assert!(matches!(mel_spectrogram(&short), Err(SpectrogramError::ClipTooShort { .. })));
    }

    #[test]
    fn colormap_points() {
        let zeros = SpectrogramImage::from_values(vec![0.0; 4096]).unwrap();
        let c = render(&zeros, true);
        assert_eq!(c.channels(), 3);
        assert!(c.pixels().unwrap().chunks(3).all(|p| p == [0.267, 0.005, 0.329]));
        let ones = SpectrogramImage::from_values(vec![1.0; 4096]).unwrap();
        assert!(render(&ones, true).pixels().unwrap().chunks(3).all(|p| p == [0.993, 0.906, 0.144]));
        assert!((colormap(0.125)[0] - 0.248).abs() < 1e-12);
        let g = render(&ones, false);
        assert_eq!(g.channels(), 1);
        assert_eq!(g.pixels().unwrap(), ones.values());
    }

    #[test]
    fn colored_is_function_of_value() {
        let vals: Vec<f64> = (0..4096).map(|i| ((i * 37) % 4096) as f64 / 4095.0).collect();
        let img = SpectrogramImage::from_values(vals.clone()).unwrap();
        let c = render(&img, true);
        let px = c.pixels().unwrap();
        for i in 0..4096 {
            for j in [0usize, 1, 17, 4095] {
                if vals[i] == vals[j] {
                    assert_eq!(&px[3 * i..3 * i + 3], &px[3 * j..3 * j + 3]);
                }
            }
        }
    }

    #[test]
    fn pgm_ppm_encoding() {
        let zeros = SpectrogramImage::from_values(vec![0.0; 4096]).unwrap();
        assert!(matches!(encode_image(&zeros), Err(SpectrogramError::NotRendered)));
        let b = encode_image(&render(&zeros, false)).unwrap();
        let header = b"P5\n64 64\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(b.len() - header.len(), 4096);
        assert!(b[header.len()..].iter().all(|&x| x == 0));

        let ones = SpectrogramImage::from_values(vec![1.0; 4096]).unwrap();
        let b = encode_image(&render(&ones, false)).unwrap();
        assert!(b[header.len()..].iter().all(|&x| x == 255));

        let b = encode_image(&render(&ones, true)).unwrap();
        let header = b"P6\n64 64\n255\n";
        assert_eq!(&b[..header.len()], header);
        let payload = &b[header.len()..];
        assert_eq!(payload.len(), 3 * 4096);
        assert!(payload.chunks(3).all(|p| p == [253, 231, 37]));
    }

    #[test]
    fn export_puts_high_mel_on_top() {
        let mut vals = vec![0.0; 4096];
        for t in 0..64 {
            vals[63 * 64 + t] = 1.0;
        }
        let img = render(&SpectrogramImage::from_values(vals).unwrap(), false);
        let b = encode_image(&img).unwrap();
        let payload = &b[b"P5\n64 64\n255\n".len()..];
        assert!(payload[..64].iter().all(|&x| x == 255));
        assert!(payload[64..].iter().all(|&x| x == 0));
    }
}
