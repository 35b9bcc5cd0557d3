//! WAV ingestion, clip canonicalization and dataset manifests.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical sample rate of every clip entering the feature pipeline.
pub const SAMPLE_RATE: u32 = 16_000;
/// Canonical clip length: 2.08 s, which gives exactly 64 STFT frames.
pub const CLIP_LEN: usize = 33_280;

const PCM_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a RIFF/WAVE file")]
    NotWav,
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("empty clip")]
    EmptyClip,
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("manifest line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("manifest line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
}

/// Mono PCM audio as real amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    /// Builds a clip, rejecting non-finite samples and a zero sample rate.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidClip("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidClip(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

/// The three acoustic conditions the classifier distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    /// Room noise only.
    Ambient,
    /// Extruder running with material.
    ExtruderNormal,
    /// Extruder running without material.
    ExtruderFault,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] =
        [ClassLabel::Ambient, ClassLabel::ExtruderNormal, ClassLabel::ExtruderFault];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Ambient => 0,
            ClassLabel::ExtruderNormal => 1,
            ClassLabel::ExtruderFault => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Ambient => "ambient",
            ClassLabel::ExtruderNormal => "extruder_normal",
            ClassLabel::ExtruderFault => "extruder_fault",
        }
    }

    /// Case-insensitive parse of the manifest spelling.
    pub fn parse(s: &str) -> Option<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|c| c.name() == lower)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub clip_path: PathBuf,
    pub label: ClassLabel,
    pub split: Option<Split>,
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a RIFF/WAVE PCM16 byte buffer (mono or stereo).
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWav);
    }
    let mut pos = 12;
    let mut format: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(AudioError::Truncated("fmt chunk".into()));
                }
                let tag = read_u16(bytes, body);
                let channels = read_u16(bytes, body + 2);
                let rate = read_u32(bytes, body + 4);
                let bits = read_u16(bytes, body + 14);
                if tag != 1 {
                    return Err(AudioError::UnsupportedEncoding(format!("format tag {tag}")));
                }
                if bits != 16 {
                    return Err(AudioError::UnsupportedEncoding(format!("{bits}-bit samples")));
                }
                if channels != 1 && channels != 2 {
                    return Err(AudioError::UnsupportedEncoding(format!("{channels} channels")));
                }
                if rate == 0 {
                    return Err(AudioError::UnsupportedEncoding("zero sample rate".into()));
                }
                format = Some((channels, rate));
            }
            b"data" => {
                let (channels, rate) = format
                    .ok_or_else(|| AudioError::UnsupportedEncoding("data before fmt".into()))?;
                let available = bytes.len() - body;
                if size > available {
                    return Err(AudioError::Truncated(format!(
                        "data chunk declares {size} bytes, {available} present"
                    )));
                }
                let frame_bytes = 2 * channels as usize;
                let frames = size / frame_bytes;
                let data = &bytes[body..body + frames * frame_bytes];
                let samples = data
                    .chunks_exact(frame_bytes)
                    .map(|frame| {
                        let sum: f64 = frame
                            .chunks_exact(2)
                            .map(|p| i16::from_le_bytes([p[0], p[1]]) as f64)
                            .sum();
                        sum / channels as f64 / PCM_SCALE
                    })
                    .collect();
                return AudioClip::new(samples, rate);
            }
            _ => {}
        }
        // Chunks are padded to even length.
        pos = body + size + (size & 1);
    }
    Err(AudioError::Truncated("missing fmt or data chunk".into()))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    decode_wav(&fs::read(path)?)
}

/// Quantizes a sample to PCM16, saturating at the representable range.
pub fn to_pcm16(sample: f64) -> i16 {
    (sample * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes a clip as a mono PCM16 RIFF/WAVE buffer.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = (clip.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        out.extend_from_slice(&to_pcm16(s).to_le_bytes());
    }
    out
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), AudioError> {
    fs::write(path, encode_wav(clip))?;
    Ok(())
}

/// Linear-interpolation resampling; the final input sample is held past
/// the end.
pub fn resample_linear(samples: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    if from_hz == to_hz || samples.is_empty() {
        return samples.to_vec();
    }
    let (from, to) = (from_hz as u64, to_hz as u64);
    let out_len = (samples.len() as u64 * to).div_ceil(from) as usize;
    let last = samples.len() - 1;
    (0..out_len as u64)
        .map(|j| {
            let num = j * from;
            let i = (num / to) as usize;
            let frac = (num % to) as f64 / to as f64;
            if i >= last {
                samples[last]
            } else {
                samples[i] + (samples[i + 1] - samples[i]) * frac
            }
        })
        .collect()
}

/// Resamples to 16 kHz, then zero-pads or truncates to `target_len` and
/// clamps to [-1, 1].
pub fn standardize(clip: &AudioClip, target_len: usize) -> Result<AudioClip, AudioError> {
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    let mut samples = resample_linear(&clip.samples, clip.sample_rate_hz, SAMPLE_RATE);
    samples.resize(target_len, 0.0);
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    Ok(AudioClip { samples, sample_rate_hz: SAMPLE_RATE })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    path: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

/// Parses JSONL manifest text. Relative paths are joined onto `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<LabeledExample>, AudioError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(raw)
            .map_err(|e| AudioError::ParseError { line, message: e.to_string() })?;
        let label = ClassLabel::parse(&entry.label)
            .ok_or_else(|| AudioError::UnknownLabel { line, label: entry.label.clone() })?;
        let split = match entry.split.as_deref() {
            None => None,
            Some(s) => Some(Split::parse(s).ok_or_else(|| AudioError::ParseError {
                line,
                message: format!("unknown split {s:?}"),
            })?),
        };
        let p = PathBuf::from(&entry.path);
        let clip_path = if p.is_absolute() { p } else { base_dir.join(p) };
        out.push(LabeledExample { clip_path, label, split });
    }
    Ok(out)
}

/// Loads a JSONL manifest; relative clip paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>, AudioError> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut text = String::new();
    for line in reader.lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// Writes a manifest. Paths are written as given.
pub fn write_manifest(
    path: impl AsRef<Path>,
    entries: &[(String, ClassLabel, Option<Split>)],
) -> Result<(), AudioError> {
    let mut f = fs::File::create(path)?;
    for (p, label, split) in entries {
        let line = ManifestLine {
            path: p.clone(),
            label: label.name().to_string(),
            split: split.map(|s| s.name().to_string()),
        };
        let json = serde_json::to_string(&line).expect("manifest line serializes");
        writeln!(f, "{json}")?;
    }
    Ok(())
}
