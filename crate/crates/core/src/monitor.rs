//! Sliding-window streaming inference with EMA smoothing and hysteresis.
//!
//! Samples are bandpassed once, on arrival, by a cascade whose state spans
//! the whole stream. Verdicts fall at sample counts `window + j·stride`, so
//! they depend only on the sample sequence and never on how it was chunked.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{self, AudioClip, AudioError, CLIP_LEN, SAMPLE_RATE};
use crate::cnn::{ClassProbabilities, CnnError, Model};
use crate::dsp::{self, FilterCascade};
use crate::features::{self, FeatureError};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("no model supplied to the monitor")]
    NoModel,
    #[error("invalid monitor config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorConfig {
    pub window: usize,
    pub stride: usize,
    pub ema_alpha: f64,
    pub alarm_on: f64,
    pub alarm_off: f64,
    pub consecutive_k: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self { window: CLIP_LEN, stride: 8192, ema_alpha: 0.6, alarm_on: 0.8, alarm_off: 0.5, consecutive_k: 3 }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), MonitorError> {
        let bad = |m: String| Err(MonitorError::InvalidConfig(m));
        if self.window != CLIP_LEN {
            return bad(format!("window must be {CLIP_LEN} samples, got {}", self.window));
        }
        if self.stride == 0 {
            return bad("stride must be >= 1".into());
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return bad(format!("ema_alpha {} outside (0, 1]", self.ema_alpha));
        }
        if self.alarm_off.partial_cmp(&self.alarm_on) != Some(std::cmp::Ordering::Less) {
            return bad(format!("alarm_off {} must be below alarm_on {}", self.alarm_off, self.alarm_on));
        }
        if self.consecutive_k == 0 {
            return bad("consecutive_k must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlarmState {
    Normal,
    Alarm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probs {
    pub ambient: f64,
    pub extruder_normal: f64,
    pub extruder_fault: f64,
}

impl From<ClassProbabilities> for Probs {
    fn from(p: ClassProbabilities) -> Self {
        Self { ambient: p.0[0], extruder_normal: p.0[1], extruder_fault: p.0[2] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamVerdict {
    /// Seconds from stream start to the last sample of the window.
    pub t_end: f64,
    pub probs: Probs,
    pub smoothed_fault: f64,
    pub state: AlarmState,
}

/// EMA of the fault probability plus the on/off/k state machine.
#[derive(Debug, Clone)]
pub struct AlarmTracker {
    cfg: MonitorConfig,
    smoothed: Option<f64>,
    run: usize,
    state: AlarmState,
}

impl AlarmTracker {
    pub fn new(cfg: MonitorConfig) -> Self {
        Self { cfg, smoothed: None, run: 0, state: AlarmState::Normal }
    }

    pub fn state(&self) -> AlarmState {
        self.state
    }

    pub fn update(&mut self, p_fault: f64) -> (f64, AlarmState) {
        let a = self.cfg.ema_alpha;
        let s = match self.smoothed {
            None => p_fault,
            Some(prev) => a * p_fault + (1.0 - a) * prev,
        }
        .clamp(0.0, 1.0);
        self.smoothed = Some(s);
        match self.state {
            AlarmState::Normal => {
                self.run = if s >= self.cfg.alarm_on { self.run + 1 } else { 0 };
                if self.run >= self.cfg.consecutive_k {
                    self.state = AlarmState::Alarm;
                }
            }
            AlarmState::Alarm => {
                if s < self.cfg.alarm_off {
                    self.state = AlarmState::Normal;
                    self.run = 0;
                }
            }
        }
        (s, self.state)
    }
}

#[derive(Debug, Default)]
pub struct MonitorBuilder {
    model: Option<Arc<Model>>,
    config: MonitorConfig,
}

impl MonitorBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn model(mut self, model: Arc<Model>) -> Self {
        self.model = Some(model);
        self
    }

    pub fn config(mut self, config: MonitorConfig) -> Self {
        self.config = config;
        self
    }

    pub fn build(self) -> Result<Monitor, MonitorError> {
        let model = self.model.ok_or(MonitorError::NoModel)?;
        self.config.validate()?;
        Ok(Monitor {
            colored: model.input_shape().channels == 3,
            model,
            cfg: self.config,
            filter: dsp::design_bandpass(),
            ring: VecDeque::with_capacity(self.config.window),
            consumed: 0,
            tracker: AlarmTracker::new(self.config),
        })
    }
}

/// One stream's state. `Send`, so it can move between threads.
#[derive(Debug)]
pub struct Monitor {
    model: Arc<Model>,
    colored: bool,
    cfg: MonitorConfig,
    filter: FilterCascade,
    ring: VecDeque<f64>,
    consumed: u64,
    tracker: AlarmTracker,
}

impl Monitor {
    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    pub fn samples_consumed(&self) -> u64 {
        self.consumed
    }

    pub fn state(&self) -> AlarmState {
        self.tracker.state()
    }

    fn due(&self) -> bool {
        let w = self.cfg.window as u64;
        self.consumed >= w && (self.consumed - w).is_multiple_of(self.cfg.stride as u64)
    }

    /// Feeds 16 kHz samples; returns the verdicts whose windows completed.
    pub fn push_samples(&mut self, samples: &[f64]) -> Result<Vec<StreamVerdict>, MonitorError> {
        let mut out = Vec::new();
        for &x in samples {
            // Same ±1 clamp the batch path applies before filtering.
            let x = if x.is_finite() { x.clamp(-1.0, 1.0) } else { 0.0 };
            if self.ring.len() == self.cfg.window {
                self.ring.pop_front();
            }
            self.ring.push_back(self.filter.process_sample(x));
            self.consumed += 1;
            if self.due() {
                out.push(self.verdict()?);
            }
        }
        Ok(out)
    }

    fn verdict(&mut self) -> Result<StreamVerdict, MonitorError> {
        let window = AudioClip::new(self.ring.iter().copied().collect(), SAMPLE_RATE)?;
        let image = features::filtered_features(&window, self.colored)?;
        let probs = self.model.predict(&image)?;
        let (smoothed_fault, state) = self.tracker.update(probs.fault());
        Ok(StreamVerdict {
            t_end: self.consumed as f64 / SAMPLE_RATE as f64,
            probs: probs.into(),
            smoothed_fault,
            state,
        })
    }
}

pub const FILE_CHUNK: usize = 4096;

/// Streams a WAV file through the monitor, writing one JSON line per
/// verdict. Non-16 kHz files are resampled first.
pub fn run_file(
    monitor: &mut Monitor,
    path: impl AsRef<Path>,
    mut out: impl Write,
) -> Result<Vec<StreamVerdict>, MonitorError> {
    let clip = audio_io::read_wav(path)?;
    let samples = if clip.sample_rate_hz() == SAMPLE_RATE {
        clip.into_samples()
    } else {
        log::info!("resampling {} Hz input to {SAMPLE_RATE} Hz", clip.sample_rate_hz());
        audio_io::resample_linear(clip.samples(), clip.sample_rate_hz(), SAMPLE_RATE)
    };
    let mut all = Vec::new();
    for chunk in samples.chunks(FILE_CHUNK) {
        for v in monitor.push_samples(chunk)? {
            serde_json::to_writer(&mut out, &v).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            all.push(v);
        }
    }
    out.flush()?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::ClassLabel;
    use crate::synth;
    use proptest::prelude::*;

    fn assert_send<T: Send>() {}

    #[test]
    fn monitor_is_send() {
        assert_send::<Monitor>();
    }

    fn run(track: &mut AlarmTracker, ps: &[f64]) -> Vec<(f64, AlarmState)> {
        ps.iter().map(|&p| track.update(p)).collect()
    }

    #[test]
    fn constant_one_alarms_at_third_window() {
        let mut t = AlarmTracker::new(MonitorConfig::default());
        let r = run(&mut t, &[1.0; 5]);
        assert!(r.iter().all(|(s, _)| *s == 1.0));
        let states: Vec<_> = r.iter().map(|x| x.1).collect();
        assert_eq!(states[..2], [AlarmState::Normal; 2]);
        assert_eq!(states[2..], [AlarmState::Alarm; 3]);
    }

    #[test]
    fn constant_zero_stays_normal() {
        let mut t = AlarmTracker::new(MonitorConfig::default());
        assert!(run(&mut t, &[0.0; 50]).iter().all(|x| x == &(0.0, AlarmState::Normal)));
    }

    #[test]
    fn hysteresis_holds_alarm_above_off() {
        let mut t = AlarmTracker::new(MonitorConfig::default());
        run(&mut t, &[1.0; 3]);
        assert_eq!(t.state(), AlarmState::Alarm);
        // s: 0.6·0.55 + 0.4·1 = 0.73, then 0.622, 0.5788, 0.5615, ... → 0.55.
        let r = run(&mut t, &[0.55; 10]);
        let mut expect = 1.0;
        for (s, st) in r {
            expect = 0.6 * 0.55 + 0.4 * expect;
            assert!((s - expect).abs() < 1e-12);
            assert_eq!(st, AlarmState::Alarm);
        }
        let (s, st) = t.update(0.0);
        assert!(s < 0.5);
        assert_eq!(st, AlarmState::Normal);
    }

    #[test]
    fn interrupted_run_does_not_alarm() {
        let mut t = AlarmTracker::new(MonitorConfig { ema_alpha: 1.0, ..MonitorConfig::default() });
        let r = run(&mut t, &[0.9, 0.9, 0.1, 0.9, 0.9, 0.1]);
        assert!(r.iter().all(|x| x.1 == AlarmState::Normal));
        assert_eq!(t.update(0.9).1, AlarmState::Normal);
        assert_eq!(t.update(0.9).1, AlarmState::Normal);
        assert_eq!(t.update(0.9).1, AlarmState::Alarm);
    }

    proptest! {
        #[test]
        fn smoothed_stays_in_unit_interval(ps in prop::collection::vec(0.0f64..=1.0, 1..60)) {
            let mut t = AlarmTracker::new(MonitorConfig::default());
            let mut run_len = 0;
            let mut prev = AlarmState::Normal;
            for p in ps {
                let (s, st) = t.update(p);
                prop_assert!((0.0..=1.0).contains(&s));
                run_len = if s >= 0.8 { run_len + 1 } else { 0 };
                if prev == AlarmState::Normal && st == AlarmState::Alarm {
                    prop_assert!(run_len >= 3);
                }
                if prev == AlarmState::Alarm && st == AlarmState::Normal {
                    prop_assert!(s < 0.5);
                }
                prev = st;
            }
        }
    }

    #[test]
    fn config_validation() {
        let ok = MonitorConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            MonitorConfig { ema_alpha: 0.0, ..ok },
            MonitorConfig { ema_alpha: 1.5, ..ok },
            MonitorConfig { alarm_off: 0.8, ..ok },
            MonitorConfig { stride: 0, ..ok },
            MonitorConfig { consecutive_k: 0, ..ok },
            MonitorConfig { window: 1000, ..ok },
        ] {
            assert!(matches!(bad.validate(), Err(MonitorError::InvalidConfig(_))), "{bad:?}");
        }
        assert!(matches!(MonitorBuilder::new().build(), Err(MonitorError::NoModel)));
    }

    fn monitor() -> Monitor {
        MonitorBuilder::new().model(Arc::new(Model::init_canonical(1, 3).unwrap())).build().unwrap()
    }

    #[test]
    fn verdict_timing_and_chunk_invariance() {
        let stream = synth::synth_signal(ClassLabel::ExtruderNormal, 5, CLIP_LEN + 3 * 8192 + 100);
        let mut whole = monitor();
        let a = whole.push_samples(&stream).unwrap();
        let times: Vec<f64> = a.iter().map(|v| v.t_end).collect();
        assert_eq!(times, vec![2.08, 2.592, 3.104, 3.616]);

        for chunk in [1, 1000, 7919, 32768] {
            let mut m = monitor();
            let mut b = Vec::new();
            for c in stream.chunks(chunk) {
                b.extend(m.push_samples(c).unwrap());
            }
            assert_eq!(a, b, "chunk {chunk}");
        }
    }

    #[test]
    fn short_stream_is_silent_and_first_window_matches_batch_path() {
        let stream = synth::synth_signal(ClassLabel::ExtruderFault, 8, CLIP_LEN);
        let mut m = monitor();
        assert!(m.push_samples(&stream[..CLIP_LEN - 1]).unwrap().is_empty());
        let v = m.push_samples(&stream[CLIP_LEN - 1..]).unwrap();
        assert_eq!(v.len(), 1);
        // The first window sees a cascade started at stream start: the batch path exactly.
        let clip = AudioClip::new(stream, SAMPLE_RATE).unwrap();
        let batch = features::classify_clip(&m.model, &clip).unwrap();
        assert_eq!(v[0].probs, Probs::from(batch));
        assert_eq!(v[0].smoothed_fault, batch.fault());
    }

    #[test]
    fn run_file_writes_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let clip = AudioClip::new(synth::synth_signal(ClassLabel::Ambient, 1, CLIP_LEN + 8192), SAMPLE_RATE).unwrap();
        audio_io::write_wav(&clip, &path).unwrap();
        let mut buf = Vec::new();
        let v = run_file(&mut monitor(), &path, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(v.len(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["t_end"], 2.08);
        assert_eq!(first["state"], "normal");
        assert!(first["probs"]["extruder_fault"].is_number());

        let short = dir.path().join("short.wav");
        audio_io::write_wav(&AudioClip::new(vec![0.1; 1000], SAMPLE_RATE).unwrap(), &short).unwrap();
        let mut buf = Vec::new();
        assert!(run_file(&mut monitor(), &short, &mut buf).unwrap().is_empty());
        assert!(buf.is_empty());
    }
}
