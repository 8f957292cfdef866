//! Mel Cepstral Distortion with optional DTW alignment.

use crate::dsp::stft::mel_spectrogram;
use crate::dsp::wav::Waveform;
use crate::error::{LsError, Result};

pub const MCD_COEFFS: usize = 13;

/// Mel cepstral coefficients c_1..c_13 per frame (c_0 excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct CepstraSequence {
    /// frames x 13
    pub frames: Vec<[f32; MCD_COEFFS]>,
}

/// DCT-II of the log-mel energies (80 mels, win 1024, hop 256), keeping
/// coefficients 1..13.
pub fn mel_cepstra(audio: &Waveform) -> Result<CepstraSequence> {
    let mel = mel_spectrogram(audio, 1024, 256, 80)?;
    let (n_mels, n_frames) = (mel.shape[0], mel.shape[1]);
    let mut frames = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut c = [0.0f32; MCD_COEFFS];
        for (d, slot) in c.iter_mut().enumerate() {
            let k = d + 1; // skip c_0
            let mut acc = 0.0f64;
            for m in 0..n_mels {
                let x = mel.data[m * n_frames + f] as f64;
                acc += x * (std::f64::consts::PI * k as f64 * (m as f64 + 0.5) / n_mels as f64).cos();
            }
            *slot = (2.0 * acc) as f32;
        }
        frames.push(c);
    }
    if frames.is_empty() {
        return Err(LsError::Input("audio shorter than one analysis window".into()));
    }
    Ok(CepstraSequence { frames })
}

fn frame_dist(a: &[f32; MCD_COEFFS], b: &[f32; MCD_COEFFS]) -> f64 {
    let mut acc = 0.0f64;
    for d in 0..MCD_COEFFS {
        let diff = (a[d] - b[d]) as f64;
        acc += diff * diff;
    }
    acc
}

/// DTW path over the squared-distance grid, returned as index pairs.
fn dtw_path(r: &CepstraSequence, s: &CepstraSequence) -> Vec<(usize, usize)> {
    let (n, m) = (r.frames.len(), s.frames.len());
    let mut cost = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = frame_dist(&r.frames[i], &s.frames[j]).sqrt();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut b = f64::INFINITY;
                if i > 0 {
                    b = b.min(cost[(i - 1) * m + j]);
                }
                if j > 0 {
                    b = b.min(cost[i * m + j - 1]);
                }
                if i > 0 && j > 0 {
                    b = b.min(cost[(i - 1) * m + j - 1]);
                }
                b
            };
            cost[i * m + j] = d + best;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let mut next = (0usize, 0usize);
        let mut best = f64::INFINITY;
        if i > 0 && j > 0 && cost[(i - 1) * m + j - 1] < best {
            best = cost[(i - 1) * m + j - 1];
            next = (i - 1, j - 1);
        }
        if i > 0 && cost[(i - 1) * m + j] < best {
            best = cost[(i - 1) * m + j];
            next = (i - 1, j);
        }
        if j > 0 && cost[i * m + j - 1] < best {
            next = (i, j - 1);
        }
        path.push(next);
        (i, j) = next;
    }
    path.reverse();
    path
}

/// MCD in dB: (10/ln 10) · mean over aligned pairs of sqrt(2·Σ(c_d−c'_d)²).
/// Without alignment the sequences must have equal length.
pub fn mcd(reference: &CepstraSequence, synthesized: &CepstraSequence, align: bool) -> Result<f64> {
    if reference.frames.is_empty() || synthesized.frames.is_empty() {
        return Err(LsError::Input("empty cepstra sequence".into()));
    }
    let pairs: Vec<(usize, usize)> = if align {
        dtw_path(reference, synthesized)
    } else {
        if reference.frames.len() != synthesized.frames.len() {
            return Err(LsError::Dimension(format!(
                "unaligned mcd needs equal lengths ({} vs {})",
                reference.frames.len(),
                synthesized.frames.len()
            )));
        }
        (0..reference.frames.len()).map(|i| (i, i)).collect()
    };
    let k = 10.0 / std::f64::consts::LN_10;
    let mean = pairs
        .iter()
        .map(|&(i, j)| (2.0 * frame_dist(&reference.frames[i], &synthesized.frames[j])).sqrt())
        .sum::<f64>()
        / pairs.len() as f64;
    Ok(k * mean)
}
