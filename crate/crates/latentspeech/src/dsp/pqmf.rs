//! Near-perfect-reconstruction pseudo-QMF filter bank.
//!
//! Cosine-modulated bank built from a Kaiser-windowed lowpass prototype.
//! The prototype cutoff is tuned by golden-section search on the impulse
//! round-trip error, then the bank is normalized so analysis preserves
//! white-noise energy and the round trip has unit gain.

use crate::dsp::wav::Waveform;
use crate::error::{LsError, Result};
use crate::nn::tensor::Tensor;

/// Critically sampled multi-band decomposition of a waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSignal {
    /// `[N_bands x L_sub]`
    pub bands: Tensor,
    pub sample_rate: u32,
    /// Pre-padding audio length, used to trim after synthesis.
    pub orig_len: Option<usize>,
}

impl SubbandSignal {
    pub fn n_bands(&self) -> usize {
        self.bands.shape[0]
    }

    pub fn len_sub(&self) -> usize {
        self.bands.shape[1]
    }

    pub fn energy(&self) -> f64 {
        self.bands.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct PqmfBank {
    pub n_bands: usize,
    pub taps: usize,
    pub prototype: Vec<f32>,
    /// `n_bands` rows of `taps` coefficients each.
    pub analysis: Vec<Vec<f32>>,
    pub synthesis: Vec<Vec<f32>>,
}

fn bessel_i0(x: f64) -> f64 {
    // power series, converges fast for the beta range used here
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

fn kaiser_beta(attenuation_db: f64) -> f64 {
    if attenuation_db > 50.0 {
        0.1102 * (attenuation_db - 8.7)
    } else if attenuation_db >= 21.0 {
        0.5842 * (attenuation_db - 21.0).powf(0.4) + 0.07886 * (attenuation_db - 21.0)
    } else {
        0.0
    }
}

/// Tap count suggested by the Kaiser length formula for a transition band of
/// half the band spacing, rounded up to a multiple of `n_bands`.
pub fn kaiser_taps(n_bands: usize, attenuation_db: f64) -> usize {
    let delta_w = std::f64::consts::PI / (2.0 * n_bands as f64);
    let m = ((attenuation_db - 8.0) / (2.285 * delta_w)).ceil() as usize + 1;
    m.div_ceil(n_bands) * n_bands
}

fn prototype_lowpass(taps: usize, cutoff: f64, beta: f64) -> Vec<f64> {
    let center = (taps - 1) as f64 / 2.0;
    let i0b = bessel_i0(beta);
    (0..taps)
        .map(|n| {
            let t = n as f64 - center;
            let sinc = if t.abs() < 1e-12 {
                cutoff / std::f64::consts::PI
            } else {
                (cutoff * t).sin() / (std::f64::consts::PI * t)
            };
            let r = t / center;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            sinc * w
        })
        .collect()
}

fn modulate(proto: &[f64], n_bands: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let taps = proto.len();
    let center = (taps - 1) as f64 / 2.0;
    let mut analysis = Vec::with_capacity(n_bands);
    let mut synthesis = Vec::with_capacity(n_bands);
    for k in 0..n_bands {
        let phase = if k % 2 == 0 {
            std::f64::consts::FRAC_PI_4
        } else {
            -std::f64::consts::FRAC_PI_4
        };
        let freq = (2 * k + 1) as f64 * std::f64::consts::PI / (2.0 * n_bands as f64);
        let h: Vec<f64> = (0..taps)
            .map(|n| 2.0 * proto[n] * (freq * (n as f64 - center) + phase).cos())
            .collect();
        let g: Vec<f64> = (0..taps)
            .map(|n| 2.0 * proto[n] * (freq * (n as f64 - center) - phase).cos())
            .collect();
        analysis.push(h);
        synthesis.push(g);
    }
    (analysis, synthesis)
}

/// Impulse round-trip error (after optimal gain) used as the design objective.
/// Uses the same circular convolution as the runtime path.
fn roundtrip_error(analysis: &[Vec<f64>], synthesis: &[Vec<f64>], n_bands: usize) -> f64 {
    let taps = analysis[0].len();
    let len = (4 * taps).div_ceil(n_bands) * n_bands;
    let mid = len / 2;
    let mut x = vec![0.0f64; len];
    x[mid] = 1.0;
    let y = roundtrip_f64(analysis, synthesis, n_bands, &x);
    let delay = taps - 1;
    let gain = y[(mid + delay) % len];
    if gain.abs() < 1e-9 {
        return 1e9;
    }
    let mut err = 0.0;
    for t in 0..len {
        let target = if t == mid { 1.0 } else { 0.0 };
        let v = y[(t + delay) % len] / gain;
        let d = v - target;
        err += d * d;
    }
    err
}

/// Circular filtered decimation: y_k[m] = sum_n h_k[n] x[(mN - n) mod L].
fn analysis_f64(filters: &[Vec<f64>], n_bands: usize, x: &[f64]) -> Vec<Vec<f64>> {
    let len = x.len();
    let l_sub = len / n_bands;
    filters
        .iter()
        .map(|h| {
            (0..l_sub)
                .map(|m| {
                    let t = m * n_bands;
                    let mut acc = 0.0;
                    for (n, &hv) in h.iter().enumerate() {
                        let idx = if n <= t { t - n } else { t + len - (n % len) };
                        acc += hv * x[idx % len];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn synthesis_f64(filters: &[Vec<f64>], n_bands: usize, sub: &[Vec<f64>]) -> Vec<f64> {
    let l_sub = sub[0].len();
    let len = l_sub * n_bands;
    let mut out = vec![0.0f64; len];
    for (k, g) in filters.iter().enumerate() {
        for (m, &s) in sub[k].iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let base = m * n_bands;
            for (n, &gv) in g.iter().enumerate() {
                out[(base + n) % len] += gv * s;
            }
        }
    }
    out
}

fn roundtrip_f64(
    analysis: &[Vec<f64>],
    synthesis: &[Vec<f64>],
    n_bands: usize,
    x: &[f64],
) -> Vec<f64> {
    let sub = analysis_f64(analysis, n_bands, x);
    synthesis_f64(synthesis, n_bands, &sub)
}

/// Design a pseudo-QMF bank.
///
/// `taps == 0` picks the Kaiser-formula length. `n_bands == 1` degenerates to
/// the identity bank.
pub fn design_pqmf(n_bands: usize, attenuation_db: f64, taps: usize) -> Result<PqmfBank> {
    if !n_bands.is_power_of_two() {
        return Err(LsError::Config(format!(
            "n_bands {n_bands} must be a power of two"
        )));
    }
    if n_bands == 1 {
        return Ok(PqmfBank {
            n_bands: 1,
            taps: 1,
            prototype: vec![1.0],
            analysis: vec![vec![1.0]],
            synthesis: vec![vec![1.0]],
        });
    }
    let taps = if taps == 0 {
        kaiser_taps(n_bands, attenuation_db)
    } else {
        taps
    };
    if taps % n_bands != 0 {
        return Err(LsError::Config(format!(
            "taps {taps} must be a multiple of n_bands {n_bands}"
        )));
    }
    let beta = kaiser_beta(attenuation_db);
    let wc0 = std::f64::consts::PI / (2.0 * n_bands as f64);

    let objective = |wc: f64| -> f64 {
        let proto = prototype_lowpass(taps, wc, beta);
        let (a, s) = modulate(&proto, n_bands);
        roundtrip_error(&a, &s, n_bands)
    };

    // golden-section search for the cutoff
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.25 * wc0, 1.75 * wc0);
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..60 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = objective(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = objective(d);
        }
    }
    let wc = 0.5 * (lo + hi);
    let err = objective(wc);
    if !err.is_finite() || err > 1e-2 {
        return Err(LsError::Design(format!(
            "infeasible attenuation/taps combination: residual {err:.3e} with {taps} taps"
        )));
    }

    let proto = prototype_lowpass(taps, wc, beta);
    let (mut analysis, mut synthesis) = modulate(&proto, n_bands);

    // analysis preserves white-noise energy: (1/N) sum_k sum_n h_k[n]^2 == 1
    let e: f64 = analysis
        .iter()
        .flat_map(|h| h.iter())
        .map(|&v| v * v)
        .sum::<f64>()
        / n_bands as f64;
    let a_scale = 1.0 / e.sqrt();
    for h in &mut analysis {
        for v in h.iter_mut() {
            *v *= a_scale;
        }
    }
    // unit round-trip gain measured on an impulse
    {
        let len = (4 * taps).div_ceil(n_bands) * n_bands;
        let mid = len / 2;
        let mut x = vec![0.0f64; len];
        x[mid] = 1.0;
        let y = roundtrip_f64(&analysis, &synthesis, n_bands, &x);
        let gain = y[(mid + taps - 1) % len];
        let s_scale = 1.0 / gain;
        for g in &mut synthesis {
            for v in g.iter_mut() {
                *v *= s_scale;
            }
        }
    }

    Ok(PqmfBank {
        n_bands,
        taps,
        prototype: proto.iter().map(|&v| v as f32).collect(),
        analysis: analysis
            .iter()
            .map(|h| h.iter().map(|&v| v as f32).collect())
            .collect(),
        synthesis: synthesis
            .iter()
            .map(|g| g.iter().map(|&v| v as f32).collect())
            .collect(),
    })
}

impl PqmfBank {
    /// Group delay of the analysis+synthesis chain, in samples.
    pub fn round_trip_delay(&self) -> usize {
        self.taps.saturating_sub(1)
    }

    /// Decompose audio into `n_bands` critically decimated sub-band rows.
    ///
    /// The input is zero-padded to a multiple of `n_bands` and treated as
    /// circular, which keeps critical sampling exact at the edges.
    pub fn analysis(&self, audio: &Waveform) -> Result<SubbandSignal> {
        if audio.is_empty() {
            return Err(LsError::Input("empty audio".into()));
        }
        if self.n_bands > 1 && audio.len() <= self.taps {
            return Err(LsError::Input(format!(
                "audio length {} not greater than filter length {}",
                audio.len(),
                self.taps
            )));
        }
        let n = self.n_bands;
        let orig_len = audio.len();
        let padded = orig_len.div_ceil(n) * n;
        let l_sub = padded / n;
        let mut x = vec![0.0f32; padded];
        x[..orig_len].copy_from_slice(&audio.samples);
        let mut bands = Tensor::zeros(&[n, l_sub]);
        for (k, h) in self.analysis.iter().enumerate() {
            let row = &mut bands.data[k * l_sub..(k + 1) * l_sub];
            for (m, slot) in row.iter_mut().enumerate() {
                let t = m * n;
                let mut acc = 0.0f64;
                // split the circular window at the wrap point
                let head = (t + 1).min(h.len());
                for (nn, &hv) in h.iter().enumerate().take(head) {
                    acc += hv as f64 * x[t - nn] as f64;
                }
                for (nn, &hv) in h.iter().enumerate().skip(head) {
                    let idx = (t + padded - (nn % padded)) % padded;
                    acc += hv as f64 * x[idx] as f64;
                }
                *slot = acc as f32;
            }
        }
        Ok(SubbandSignal {
            bands,
            sample_rate: audio.sample_rate,
            orig_len: Some(orig_len),
        })
    }

    /// Recombine sub-bands into audio, compensating the filter group delay
    /// and trimming to the original length when known.
    pub fn synthesis(&self, sub: &SubbandSignal) -> Result<Waveform> {
        if sub.n_bands() != self.n_bands {
            return Err(LsError::Config(format!(
                "band count mismatch: signal has {}, bank has {}",
                sub.n_bands(),
                self.n_bands
            )));
        }
        let n = self.n_bands;
        let l_sub = sub.len_sub();
        let len = l_sub * n;
        let mut out = vec![0.0f64; len];
        for (k, g) in self.synthesis.iter().enumerate() {
            let row = &sub.bands.data[k * l_sub..(k + 1) * l_sub];
            for (m, &s) in row.iter().enumerate() {
                if s == 0.0 {
                    continue;
                }
                let base = m * n;
                let head = g.len().min(len - base);
                for (nn, &gv) in g.iter().enumerate().take(head) {
                    out[base + nn] += gv as f64 * s as f64;
                }
                for (nn, &gv) in g.iter().enumerate().skip(head) {
                    out[(base + nn) % len] += gv as f64 * s as f64;
                }
            }
        }
        let delay = self.round_trip_delay();
        let want = sub.orig_len.unwrap_or(len).min(len);
        let samples: Vec<f32> = (0..want)
            .map(|t| out[(t + delay) % len] as f32)
            .collect();
        Ok(Waveform::new(samples, sub.sample_rate))
    }
}

/// Signal-to-noise ratio of `approx` against `reference`, in dB.
pub fn snr_db(reference: &[f32], approx: &[f32]) -> f64 {
    let n = reference.len().min(approx.len());
    let mut sig = 0.0f64;
    let mut err = 0.0f64;
    for i in 0..n {
        let r = reference[i] as f64;
        let d = r - approx[i] as f64;
        sig += r * r;
        err += d * d;
    }
    if err == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (sig / err).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn white_noise(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), 48000)
    }

    #[test]
    fn bank_shape_law() {
        let bank = design_pqmf(16, 100.0, 0).unwrap();
        assert_eq!(bank.analysis.len(), 16);
        for h in &bank.analysis {
            assert_eq!(h.len(), bank.taps);
        }
        assert_eq!(bank.taps % 16, 0);
    }

    #[test]
    fn roundtrip_snr_on_white_noise() {
        let bank = design_pqmf(16, 100.0, 0).unwrap();
        let x = white_noise(11, 48000);
        let sub = bank.analysis(&x).unwrap();
        let y = bank.synthesis(&sub).unwrap();
        assert_eq!(y.len(), x.len());
        let snr = snr_db(&x.samples, &y.samples);
        assert!(snr >= 60.0, "round-trip SNR {snr:.1} dB");
    }

    #[test]
    fn single_band_is_identity() {
        let bank = design_pqmf(1, 100.0, 0).unwrap();
        let x = white_noise(3, 4096);
        let sub = bank.analysis(&x).unwrap();
        let y = bank.synthesis(&sub).unwrap();
        let snr = snr_db(&x.samples, &y.samples);
        assert!(snr >= 100.0, "degenerate bank SNR {snr:.1} dB");
    }

    #[test]
    fn zeros_in_zeros_out() {
        let bank = design_pqmf(4, 80.0, 0).unwrap();
        let x = Waveform::new(vec![0.0; 4000], 48000);
        let sub = bank.analysis(&x).unwrap();
        assert!(sub.bands.data.iter().all(|&v| v == 0.0));
        let y = bank.synthesis(&sub).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_audio_is_input_error() {
        let bank = design_pqmf(4, 80.0, 0).unwrap();
        assert!(bank.analysis(&Waveform::new(vec![], 48000)).is_err());
    }

    #[test]
    fn band_count_mismatch_is_config_error() {
        let bank4 = design_pqmf(4, 80.0, 0).unwrap();
        let bank8 = design_pqmf(8, 80.0, 0).unwrap();
        let sub = bank8.analysis(&white_noise(5, 8000)).unwrap();
        assert!(bank4.synthesis(&sub).is_err());
    }

    #[test]
    fn eq1_shape_law_and_480k_shape() {
        let bank = design_pqmf(16, 100.0, 0).unwrap();
        let x = white_noise(9, 480000);
        let sub = bank.analysis(&x).unwrap();
        assert_eq!(sub.bands.shape, vec![16, 30000]);
        // padded length is a multiple of the band count for any input
        let x2 = white_noise(10, 48001);
        let sub2 = bank.analysis(&x2).unwrap();
        assert_eq!(sub2.len_sub() * 16, 48016);
    }

    #[test]
    fn sine_energy_concentrates_in_its_band() {
        let bank = design_pqmf(8, 100.0, 0).unwrap();
        let sr = 48000u32;
        // center of band 3 of 8: (2*3+1)/(2*8) * nyquist
        let freq = 7.0 / 16.0 * sr as f64 / 2.0;
        let n = 48000;
        let samples: Vec<f32> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32 * 0.7)
            .collect();
        let sub = bank.analysis(&Waveform::new(samples, sr)).unwrap();
        let l = sub.len_sub();
        let energies: Vec<f64> = (0..8)
            .map(|k| {
                sub.bands.data[k * l..(k + 1) * l]
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum()
            })
            .collect();
        let total: f64 = energies.iter().sum();
        assert!(
            energies[3] / total >= 0.95,
            "band 3 holds {:.1}% of energy",
            100.0 * energies[3] / total
        );
    }

    #[test]
    fn parseval_energy_bound_on_white_noise() {
        let bank = design_pqmf(16, 100.0, 0).unwrap();
        let x = white_noise(21, 48000);
        let sub = bank.analysis(&x).unwrap();
        let ratio = sub.energy() / x.energy();
        assert!(
            (ratio - 1.0).abs() < 0.01,
            "subband/input energy ratio {ratio:.4}"
        );
    }

    #[test]
    fn synthesis_linearity() {
        let bank = design_pqmf(4, 80.0, 0).unwrap();
        let s1 = bank.analysis(&white_noise(31, 4000)).unwrap();
        let s2 = bank.analysis(&white_noise(32, 4000)).unwrap();
        let (a, b) = (2.0f32, -0.5f32);
        let mixed = SubbandSignal {
            bands: Tensor::new(
                s1.bands.shape.clone(),
                s1.bands
                    .data
                    .iter()
                    .zip(&s2.bands.data)
                    .map(|(x, y)| a * x + b * y)
                    .collect(),
            )
            .unwrap(),
            sample_rate: 48000,
            orig_len: s1.orig_len,
        };
        let y1 = bank.synthesis(&s1).unwrap();
        let y2 = bank.synthesis(&s2).unwrap();
        let ym = bank.synthesis(&mixed).unwrap();
        for i in 0..ym.len() {
            let want = a * y1.samples[i] + b * y2.samples[i];
            assert!((ym.samples[i] - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }
}
