//! Short-time Fourier analysis and the mel frontend.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use crate::dsp::wav::Waveform;
use crate::error::{LsError, Result};
use crate::nn::tensor::Tensor;

pub const MEL_LOG_FLOOR: f32 = 1e-5;

static PLANS: Lazy<Mutex<HashMap<usize, Arc<dyn Fft<f32>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

static PLANS64: Lazy<Mutex<HashMap<usize, Arc<dyn Fft<f64>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

pub fn fft_plan(n: usize) -> Arc<dyn Fft<f32>> {
    let mut plans = PLANS.lock().unwrap();
    plans
        .entry(n)
        .or_insert_with(|| FftPlanner::new().plan_fft_forward(n))
        .clone()
}

pub fn fft_plan_f64(n: usize) -> Arc<dyn Fft<f64>> {
    let mut plans = PLANS64.lock().unwrap();
    plans
        .entry(n)
        .or_insert_with(|| FftPlanner::new().plan_fft_forward(n))
        .clone()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos() as f32)
        .collect()
}

/// Number of analysis frames for a signal of length `len` (no centering).
pub fn frame_count(len: usize, win_len: usize, hop: usize) -> usize {
    if len < win_len {
        0
    } else {
        (len - win_len) / hop + 1
    }
}

/// Complex spectra of Hann-windowed frames; each frame holds `win_len` bins.
pub fn stft_frames(samples: &[f32], win_len: usize, hop: usize) -> Vec<Vec<Complex32>> {
    let window = hann(win_len);
    let plan = fft_plan(win_len);
    let n_frames = frame_count(samples.len(), win_len, hop);
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let off = f * hop;
        let mut buf: Vec<Complex32> = (0..win_len)
            .map(|i| Complex32::new(samples[off + i] * window[i], 0.0))
            .collect();
        plan.process(&mut buf);
        out.push(buf);
    }
    out
}

/// f64 variant used by the differentiable spectral loss.
pub fn stft_frames_f64(
    samples: &[f32],
    win_len: usize,
    hop: usize,
) -> Vec<Vec<rustfft::num_complex::Complex64>> {
    use rustfft::num_complex::Complex64;
    let window = hann(win_len);
    let plan = fft_plan_f64(win_len);
    let n_frames = frame_count(samples.len(), win_len, hop);
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let off = f * hop;
        let mut buf: Vec<Complex64> = (0..win_len)
            .map(|i| Complex64::new(samples[off + i] as f64 * window[i] as f64, 0.0))
            .collect();
        plan.process(&mut buf);
        out.push(buf);
    }
    out
}

/// STFT magnitude matrix `[bins x frames]` with `bins = win_len/2 + 1`.
pub fn stft_magnitude(audio: &Waveform, win_len: usize, hop: usize) -> Result<Tensor> {
    if !win_len.is_power_of_two() {
        return Err(LsError::Config(format!(
            "window length {win_len} must be a power of two"
        )));
    }
    if hop == 0 || hop > win_len {
        return Err(LsError::Config(format!("hop {hop} must be in 1..={win_len}")));
    }
    if audio.len() < win_len {
        return Err(LsError::Input(format!(
            "audio length {} shorter than window {win_len}",
            audio.len()
        )));
    }
    let frames = stft_frames(&audio.samples, win_len, hop);
    let bins = win_len / 2 + 1;
    let n_frames = frames.len();
    let mut data = vec![0.0f32; bins * n_frames];
    for (f, frame) in frames.iter().enumerate() {
        for k in 0..bins {
            data[k * n_frames + f] = frame[k].norm();
        }
    }
    Tensor::new(vec![bins, n_frames], data)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank `[n_mels x bins]` spanning 0..Nyquist.
pub fn mel_filterbank(sample_rate: u32, win_len: usize, n_mels: usize) -> Tensor {
    let bins = win_len / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut data = vec![0.0f32; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..bins {
            let f = k as f64 * nyquist / (bins - 1) as f64;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            data[m * bins + k] = w as f32;
        }
    }
    Tensor::new(vec![n_mels, bins], data).unwrap()
}

/// Log-compressed mel spectrogram `[n_mels x frames]`.
pub fn mel_spectrogram(
    audio: &Waveform,
    win_len: usize,
    hop: usize,
    n_mels: usize,
) -> Result<Tensor> {
    let mag = stft_magnitude(audio, win_len, hop)?;
    let fb = mel_filterbank(audio.sample_rate, win_len, n_mels);
    let (bins, frames) = (mag.shape[0], mag.shape[1]);
    let mut data = vec![0.0f32; n_mels * frames];
    for m in 0..n_mels {
        let frow = fb.row(m);
        for f in 0..frames {
            let mut acc = 0.0f64;
            for k in 0..bins {
                let w = frow[k];
                if w != 0.0 {
                    acc += w as f64 * mag.data[k * frames + f] as f64;
                }
            }
            data[m * frames + f] = (MEL_LOG_FLOOR as f64 + acc).ln() as f32;
        }
    }
    Tensor::new(vec![n_mels, frames], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: u32, secs: f64) -> Waveform {
        let n = (sr as f64 * secs) as usize;
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32 * 0.5)
            .collect();
        Waveform::new(samples, sr)
    }

    #[test]
    fn bins_law() {
        let audio = sine(440.0, 16000, 0.25);
        let mag = stft_magnitude(&audio, 1024, 256).unwrap();
        assert_eq!(mag.shape[0], 513);
    }

    #[test]
    fn zeros_give_zero_magnitudes() {
        let audio = Waveform::new(vec![0.0; 4096], 16000);
        let mag = stft_magnitude(&audio, 1024, 256).unwrap();
        assert!(mag.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_audio_is_input_error() {
        let audio = Waveform::new(vec![0.0; 100], 16000);
        assert!(stft_magnitude(&audio, 1024, 256).is_err());
    }

    #[test]
    fn sine_peaks_at_its_bin() {
        let sr = 16000u32;
        let win = 1024usize;
        let k = 64usize; // bin-center frequency
        let freq = k as f64 * sr as f64 / win as f64;
        let audio = sine(freq, sr, 0.5);
        let mag = stft_magnitude(&audio, win, 256).unwrap();
        let frames = mag.shape[1];
        for f in 0..frames {
            let (mut best_k, mut best) = (0, 0.0f32);
            for b in 0..mag.shape[0] {
                let v = mag.data[b * frames + f];
                if v > best {
                    best = v;
                    best_k = b;
                }
            }
            assert_eq!(best_k, k, "frame {f}");
        }
    }

    #[test]
    fn mel_of_silence_is_log_floor() {
        let audio = Waveform::new(vec![0.0; 4096], 16000);
        let mel = mel_spectrogram(&audio, 1024, 256, 80).unwrap();
        let want = MEL_LOG_FLOOR.ln();
        assert!(mel.data.iter().all(|&v| (v - want).abs() < 1e-6));
    }

    #[test]
    fn mel_filters_cover_all_bins_and_sum_positive() {
        let fb = mel_filterbank(48000, 1024, 80);
        let bins = fb.shape[1];
        for m in 0..80 {
            let s: f32 = fb.row(m).iter().sum();
            assert!(s > 0.0, "mel row {m} sums to zero");
        }
        // every interior bin is touched by at least one filter
        let frames_covered: Vec<bool> = (0..bins)
            .map(|k| (0..80).any(|m| fb.data[m * bins + k] > 0.0))
            .collect();
        for (k, &covered) in frames_covered.iter().enumerate().skip(1).take(bins - 2) {
            assert!(covered, "bin {k} uncovered");
        }
    }

    #[test]
    fn mel_monotone_under_amplitude_scaling() {
        let audio = sine(700.0, 16000, 0.3);
        let double = Waveform::new(audio.samples.iter().map(|v| v * 2.0).collect(), 16000);
        let a = mel_spectrogram(&audio, 1024, 256, 40).unwrap();
        let b = mel_spectrogram(&double, 1024, 256, 40).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!(y >= x);
        }
    }
}
