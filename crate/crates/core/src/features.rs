//! Log-melspectrum front end: 160 mel bands from 80 ms Hann windows every
//! 40 ms (25 Hz) at 16 kHz.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::par;
use crate::weights::WeightSet;
use crate::SAMPLE_RATE;

pub const N_MELS: usize = 160;

/// One conditioning vector: log mel energies for a 40 ms hop.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub values: Vec<f32>,
    pub frame_index: usize,
}

impl FeatureFrame {
    pub fn new(values: Vec<f32>, frame_index: usize) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            values,
            frame_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub n_mels: usize,
    pub fft_size: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Floor applied to mel energies before the log.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            window_ms: 80,
            hop_ms: 40,
            n_mels: N_MELS,
            fft_size: 2048,
            fmin_hz: 125.0,
            fmax_hz: 7500.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn write_metadata(&self, set: &mut WeightSet) {
        set.set_meta("mel.sample_rate", self.sample_rate);
        set.set_meta("mel.window_ms", self.window_ms);
        set.set_meta("mel.hop_ms", self.hop_ms);
        set.set_meta("mel.n_mels", self.n_mels);
        set.set_meta("mel.fft_size", self.fft_size);
        set.set_meta("mel.fmin_hz", self.fmin_hz);
        set.set_meta("mel.fmax_hz", self.fmax_hz);
        set.set_meta("mel.log_floor", self.log_floor);
    }

    /// Reads `mel.*` metadata; absent keys keep their defaults.
    pub fn from_metadata(set: &WeightSet) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            sample_rate: set.meta_or("mel.sample_rate", d.sample_rate)?,
            window_ms: set.meta_or("mel.window_ms", d.window_ms)?,
            hop_ms: set.meta_or("mel.hop_ms", d.hop_ms)?,
            n_mels: set.meta_or("mel.n_mels", d.n_mels)?,
            fft_size: set.meta_or("mel.fft_size", d.fft_size)?,
            fmin_hz: set.meta_or("mel.fmin_hz", d.fmin_hz)?,
            fmax_hz: set.meta_or("mel.fmax_hz", d.fmax_hz)?,
            log_floor: set.meta_or("mel.log_floor", d.log_floor)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn window_len(&self) -> usize {
        (self.sample_rate as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as usize * self.hop_ms as usize) / 1000
    }

    pub fn frame_rate_hz(&self) -> f64 {
        1000.0 / self.hop_ms as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("mel config: {m}")));
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedRate(self.sample_rate));
        }
        if self.hop_ms == 0 || 1000 % self.hop_ms != 0 {
            return bad("hop must divide one second");
        }
        if self.window_len() == 0 || self.window_len() < self.hop_len() {
            return bad("window shorter than hop");
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < self.window_len() {
            return bad("fft size must be a power of two covering the window");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive");
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.fmin_hz && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return bad("band edges out of order");
        }
        if !(self.log_floor > 0.0) {
            return bad("log floor must be positive");
        }
        Ok(())
    }

    /// Feature value of an all-silent frame.
    pub fn floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular mel filters.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filter weights, `n_mels × (fft_size/2 + 1)` row-major.
pub fn mel_matrix(cfg: &MelConfig) -> Vec<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let edges = mel_edges(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut w = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let v = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            w[m * n_bins + k] = v;
        }
    }
    w
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Reusable extractor holding the FFT plan, window and mel matrix.
pub struct MelExtractor {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Sparse rows of the mel matrix: (first bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let n_bins = cfg.fft_size / 2 + 1;
        let dense = mel_matrix(&cfg);
        let filters = dense
            .chunks(n_bins)
            .map(|row| {
                let first = row.iter().position(|&v| v != 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&v| v != 0.0).map_or(first, |i| i + 1);
                (first, row[first..last].to_vec())
            })
            .collect();
        Ok(Self {
            window: hann(cfg.window_len()),
            cfg,
            fft,
            filters,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Log-mel vector for one window of samples (zero-padded to the window).
    pub fn frame_values(&self, window: &[f32]) -> Vec<f32> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.fft_size];
        for (i, (&s, &w)) in window.iter().zip(&self.window).enumerate() {
            buf[i] = Complex64::new(s as f64 * w, 0.0);
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..self.cfg.fft_size / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect();
        self.filters
            .iter()
            .map(|(first, weights)| {
                let e: f64 = weights
                    .iter()
                    .zip(&power[*first..])
                    .map(|(w, p)| w * p)
                    .sum();
                e.max(self.cfg.log_floor).ln() as f32
            })
            .collect()
    }

    /// One frame per hop; frame `t` covers samples `[t·hop, t·hop + window)`.
    pub fn extract(&self, audio: &AudioBuffer) -> Result<Vec<FeatureFrame>> {
        audio.require_engine_rate()?;
        let hop = self.cfg.hop_len();
        let win = self.cfg.window_len();
        let samples = audio.samples();
        let n_frames = samples.len().div_ceil(hop);
        Ok(par::map_range(n_frames, |t| {
            let start = t * hop;
            let end = (start + win).min(samples.len());
            FeatureFrame {
                values: self.frame_values(&samples[start..end]),
                frame_index: t,
            }
        }))
    }
}

pub fn extract_features(audio: &AudioBuffer, cfg: &MelConfig) -> Result<Vec<FeatureFrame>> {
    MelExtractor::new(cfg.clone())?.extract(audio)
}

/// Writes the debug dump: an ASCII header line `n_mels hop_ms`, then each
/// frame as `n_mels` little-endian f32 values.
pub fn write_feature_dump<W: Write>(
    mut w: W,
    frames: &[FeatureFrame],
    cfg: &MelConfig,
) -> Result<()> {
    writeln!(w, "{} {}", cfg.n_mels, cfg.hop_ms)?;
    for f in frames {
        if f.dim() != cfg.n_mels {
            return Err(Error::shape(format!(
                "frame {} has {} values, expected {}",
                f.frame_index,
                f.dim(),
                cfg.n_mels
            )));
        }
        for v in &f.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a dump written by [`write_feature_dump`]; returns `(hop_ms, frames)`.
pub fn read_feature_dump<R: BufRead>(mut r: R) -> Result<(u32, Vec<FeatureFrame>)> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let mut parts = header.split_whitespace().map(str::parse::<u64>);
    let (Some(Ok(n_mels)), Some(Ok(hop_ms)), None) = (parts.next(), parts.next(), parts.next())
    else {
        return Err(Error::format("feature dump", "bad header line"));
    };
    if n_mels == 0 {
        return Err(Error::format("feature dump", "zero n_mels"));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let rec = n_mels as usize * 4;
    if body.len() % rec != 0 {
        return Err(Error::format("feature dump", "truncated record"));
    }
    let frames = body
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, c)| {
            let values = c
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            FeatureFrame::new(values, i)
        })
        .collect::<Result<_>>()?;
    Ok((hop_ms as u32, frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = MelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.window_len(), 1280);
        assert_eq!(c.hop_len(), 640);
        assert_eq!(c.hop_ms as f64 * c.frame_rate_hz(), 1000.0);
        assert!(c.fft_size >= c.window_len());
    }

    #[test]
    fn silence_is_floor() {
        let cfg = MelConfig::default();
        let frames = extract_features(&AudioBuffer::silence(16000), &cfg).unwrap();
        assert_eq!(frames.len(), 25);
        for f in &frames {
            assert_eq!(f.dim(), 160);
            assert!(f.values.iter().all(|&v| v == cfg.floor_value()));
        }
    }

    #[test]
    fn empty_audio_gives_no_frames() {
        let frames = extract_features(&AudioBuffer::silence(0), &MelConfig::default()).unwrap();
        assert!(frames.is_empty());
    }

    #[test]
    fn every_filter_touches_a_bin() {
        let cfg = MelConfig::default();
        let ex = MelExtractor::new(cfg).unwrap();
        assert!(ex.filters.iter().all(|(_, w)| w.iter().any(|&v| v > 0.0)));
    }

    #[test]
    fn rejects_wrong_rate() {
        let a = AudioBuffer::new(vec![0.0; 100], 8000).unwrap();
        assert!(matches!(
            extract_features(&a, &MelConfig::default()),
            Err(Error::UnsupportedRate(8000))
        ));
    }

    #[test]
    fn invalid_configs() {
        let base = MelConfig::default();
        for c in [
            MelConfig { fft_size: 1024, ..base.clone() },
            MelConfig { fft_size: 3000, ..base.clone() },
            MelConfig { n_mels: 0, ..base.clone() },
            MelConfig { fmin_hz: 8000.0, ..base.clone() },
            MelConfig { hop_ms: 7, ..base.clone() },
            MelConfig { log_floor: 0.0, ..base.clone() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn dump_round_trip_and_errors() {
        let cfg = MelConfig::default();
        let frames = vec![
            FeatureFrame::new(vec![1.5; 160], 0).unwrap(),
            FeatureFrame::new((0..160).map(|i| i as f32).collect(), 1).unwrap(),
        ];
        let mut buf = Vec::new();
        write_feature_dump(&mut buf, &frames, &cfg).unwrap();
        assert!(buf.starts_with(b"160 40\n"));
        assert_eq!(buf.len(), 7 + 2 * 160 * 4);
        let (hop, back) = read_feature_dump(&buf[..]).unwrap();
        assert_eq!(hop, 40);
        assert_eq!(back, frames);

        assert!(read_feature_dump(&buf[..buf.len() - 1]).is_err());
        assert!(read_feature_dump(&b"x y\n"[..]).is_err());
    }
}
