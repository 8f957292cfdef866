use std::path::Path;

use crate::error::{LsError, Result};

/// Mono audio buffer with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Peak-normalize in place to the given amplitude (no-op on silence).
    pub fn peak_normalize(&mut self, peak: f32) {
        let max = self
            .samples
            .iter()
            .fold(0.0f32, |m, &v| m.max(v.abs()));
        if max > 0.0 {
            let s = peak / max;
            for v in &mut self.samples {
                *v *= s;
            }
        }
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Read a WAV file as mono; stereo is downmixed by channel averaging.
/// Supports 16-bit PCM and 32-bit float.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(LsError::Input("wav file with zero channels".into()));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(LsError::Input(format!(
                "unsupported wav format: {fmt:?} {bits}-bit (need 16-bit PCM or 32-bit float)"
            )))
        }
    };
    let mono = if channels == 1 {
        samples
    } else {
        samples
            .chunks(channels)
            .map(|c| c.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Ok(Waveform::new(mono, spec.sample_rate))
}

/// Write mono 32-bit float WAV.
pub fn write_wav_f32(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &v in &wave.samples {
        writer.write_sample(v.clamp(-1.0, 1.0))?;
    }
    writer.finalize()?;
    Ok(())
}

/// Write mono 16-bit PCM WAV.
pub fn write_wav_i16(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &v in &wave.samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Serialize a waveform to in-memory 16-bit PCM WAV bytes (for ASR upload).
pub fn wav_bytes_i16(wave: &Waveform) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec)?;
        for &v in &wave.samples {
            let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(q)?;
        }
        writer.finalize()?;
    }
    Ok(cursor.into_inner())
}
