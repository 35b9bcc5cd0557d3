//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use acfm::audio_io::ClassLabel;
use acfm::rng::SplitMix64;
use acfm::synth;
use rustfft::{num_complex::Complex64, FftPlanner};

pub const FS: f64 = 16000.0;
pub const STREAM_SECS: usize = 10;

pub fn sine(freq: f64, amp: f64, len: usize) -> Vec<f64> {
    (0..len).map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / FS).sin()).collect()
}

pub fn white_noise(std: f64, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..len).map(|_| std * rng.gaussian()).collect()
}

/// Welch-style averaged periodogram: Hann-windowed 1024-point segments,
/// 50 % overlap, skipping the first and last segment.
pub fn averaged_power(x: &[f64]) -> Vec<f64> {
    let n = 1024;
    let w: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let starts: Vec<usize> = (0..).map(|k| k * n / 2).take_while(|s| s + n <= x.len()).collect();
    let inner = &starts[1..starts.len() - 1];
    let mut acc = vec![0.0; n / 2 + 1];
    for &s in inner {
        let mut buf: Vec<Complex64> = (0..n).map(|i| Complex64::new(x[s + i] * w[i], 0.0)).collect();
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(&buf) {
            *a += c.norm_sqr();
        }
    }
    acc.iter().map(|a| a / inner.len() as f64).collect()
}

/// SNR of a tone: energy within ±3 bins of the tone against the remaining
/// energy of the 100–1200 Hz band, in dB.
pub fn tone_snr_db(x: &[f64], tone_hz: f64) -> f64 {
    let p = averaged_power(x);
    let bin_hz = FS / 1024.0;
    let peak = (tone_hz / bin_hz).round() as usize;
    let lo = (100.0 / bin_hz).ceil() as usize;
    let hi = (1200.0 / bin_hz).floor() as usize;
    let (mut sig, mut noise) = (0.0, 0.0);
    for (k, &v) in p.iter().enumerate().take(hi + 1).skip(lo) {
        if k.abs_diff(peak) <= 3 {
            sig += v;
        } else {
            noise += v;
        }
    }
    10.0 * (sig / noise).log10()
}

/// Steady-state output amplitude of the bandpass for a unit sine.
pub fn measured_gain(freq: f64) -> f64 {
    let mut cascade = acfm::dsp::design_bandpass();
    let mut x = sine(freq, 1.0, 32000);
    cascade.process_in_place(&mut x);
    let tail = &x[16000..];
    let rms = (tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt();
    rms * std::f64::consts::SQRT_2
}

/// 10 s of extruder-normal audio followed by 10 s of extruder-fault audio.
pub fn normal_then_fault(seed: u64) -> Vec<f64> {
    let len = STREAM_SECS * FS as usize;
    let mut s = synth::synth_signal(ClassLabel::ExtruderNormal, seed, len);
    s.extend(synth::synth_signal(ClassLabel::ExtruderFault, seed.wrapping_add(1), len));
    s
}

pub fn acfm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acfm"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn acfm")
}

/// The bare synth → train → eval sequence. Returns (model bytes, report JSON).
pub fn benchmark_run(dir: &Path, color: bool) -> Result<(Vec<u8>, String), String> {
    let run = |args: &[&str]| {
        let out = acfm(args, dir);
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("acfm {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
        }
    };
    run(&["synth", "--out", "data", "--count", "256", "--seed", "42"])?;
    let mut train = vec!["train", "--manifest", "data/manifest.jsonl", "--seed", "7", "--out", "model.bin"];
    if color {
        train.push("--color");
    }
    run(&train)?;
    run(&["eval", "--manifest", "data/manifest.jsonl", "--model", "model.bin", "--report", "report.json"])?;
    let model = std::fs::read(dir.join("model.bin")).map_err(|e| e.to_string())?;
    let report = std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    Ok((model, report))
}
