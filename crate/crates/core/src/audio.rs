//! Mono waveforms and WAV ingestion.

use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 22050;

/// A mono signal with amplitudes nominally in [-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        let w = Self {
            samples,
            sample_rate,
        };
        w.check_finite()?;
        Ok(w)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.samples.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    /// Mean square amplitude.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Samples in `[start, start + len)`, zero outside the signal.
    pub fn excerpt_padded(&self, start: i64, len: usize) -> Self {
        let mut out = vec![0.0f32; len];
        for (i, o) in out.iter_mut().enumerate() {
            let j = start + i as i64;
            if j >= 0 && (j as usize) < self.samples.len() {
                *o = self.samples[j as usize];
            }
        }
        Self {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn mean_square(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// Reads a mono WAV file (PCM 16/24-bit or IEEE float32). Integer PCM is
/// mapped to [-1, 1).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<Result<_, _>>()?,
        (hound::SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = 1.0 / (1u32 << (bits - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::Audio(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Reads a WAV file and checks its sample rate against `expected_rate`.
pub fn read_wav_at(path: impl AsRef<Path>, expected_rate: u32) -> Result<Waveform> {
    let w = read_wav(&path)?;
    if w.sample_rate != expected_rate {
        return Err(Error::Audio(format!(
            "{}: sample rate {} Hz does not match configured {} Hz",
            path.as_ref().display(),
            w.sample_rate,
            expected_rate
        )));
    }
    Ok(w)
}

/// Writes a mono IEEE float32 WAV file.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_maps_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for s in [i16::MIN, 0, i16::MAX] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let wav = read_wav(&path).unwrap();
        assert_eq!(wav.samples[0], -1.0);
        assert_eq!(wav.samples[1], 0.0);
        assert!(wav.samples[2] < 1.0 && wav.samples[2] > 0.9999);
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        let err = read_wav(&path).unwrap_err().to_string();
        assert!(err.contains("mono"), "{err}");
    }

    #[test]
    fn float_roundtrip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let w = Waveform::new(vec![0.25, -0.5, 0.125], 22050).unwrap();
        write_wav(&path, &w).unwrap();
        assert_eq!(read_wav_at(&path, 22050).unwrap(), w);
        assert!(read_wav_at(&path, 16000).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Waveform::new(vec![0.0, f32::NAN], 22050),
            Err(Error::NonFinite(1))
        ));
    }
}
