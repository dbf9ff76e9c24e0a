//! PCM audio buffers and WAV I/O.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

/// Mono PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Wraps `samples`, rejecting non-finite values and a zero rate.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// A buffer at the engine rate.
    pub fn from_samples(samples: Vec<f32>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn silence(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power (mean of squares), in f64.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    /// Fails unless the buffer is at the engine rate.
    pub fn require_engine_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedRate(self.sample_rate));
        }
        Ok(())
    }

    /// Iterates `ceil(len / hop)` frames of `frame_len` samples starting at
    /// multiples of `hop`, zero-padding past the end.
    pub fn frames(&self, frame_len: usize, hop: usize) -> Frames<'_> {
        assert!(hop > 0 && frame_len > 0);
        Frames {
            samples: &self.samples,
            frame_len,
            hop,
            next: 0,
        }
    }
}

pub(crate) fn mean_power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

pub struct Frames<'a> {
    samples: &'a [f32],
    frame_len: usize,
    hop: usize,
    next: usize,
}

impl Iterator for Frames<'_> {
    type Item = Vec<f32>;

    fn next(&mut self) -> Option<Vec<f32>> {
        let start = self.next * self.hop;
        if start >= self.samples.len() {
            return None;
        }
        self.next += 1;
        let mut frame = vec![0.0; self.frame_len];
        let end = (start + self.frame_len).min(self.samples.len());
        frame[..end - start].copy_from_slice(&self.samples[start..end]);
        Some(frame)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let total = self.samples.len().div_ceil(self.hop);
        let rem = total.saturating_sub(self.next);
        (rem, Some(rem))
    }
}

impl ExactSizeIterator for Frames<'_> {}

/// Reads a 16-bit PCM or 32-bit float WAV file, averaging stereo to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let reader = WavReader::open(path.as_ref()).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedRate(spec.sample_rate));
    }
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels")));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{fmt:?} {bits}-bit")));
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(Error::Wav("truncated sample frame".into()));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Quantizes one sample to 16 bits, saturating out-of-range values.
#[inline]
pub fn to_pcm16(sample: f32) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec).map_err(wav_err)?;
    {
        let mut w = writer.get_i16_writer(audio.samples.len() as u32);
        for &s in &audio.samples {
            w.write_sample(to_pcm16(s));
        }
        w.flush().map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)?;
    Ok(())
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedFormat("unsupported wav encoding".into()),
        other => Error::Wav(other.to_string()),
    }
}
