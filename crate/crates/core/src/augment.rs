//! Noise mixing at a controlled SNR and the training-regime pairings.
//!
//! A regime `X2Y` names the audio the conditioning features come from (`X`)
//! and the audio used as the autoregressive / teacher-forcing target (`Y`).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::{mean_power, AudioBuffer};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Range of SNRs drawn by [`MixSpec::random`], in dB.
pub const SNR_RANGE_DB: (f64, f64) = (1.0, 40.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub snr_db: f64,
    pub seed: u64,
}

impl MixSpec {
    pub fn new(snr_db: f64, seed: u64) -> Self {
        Self { snr_db, seed }
    }

    /// SNR uniform over [`SNR_RANGE_DB`], drawn from `seed`.
    pub fn random(seed: u64) -> Self {
        let mut rng = CounterRng::new(seed);
        Self {
            snr_db: rng.range(SNR_RANGE_DB.0, SNR_RANGE_DB.1),
            seed,
        }
    }
}

/// A mixture and its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: AudioBuffer,
    /// Speech as it appears in the mixture (after any peak normalization).
    pub speech: Vec<f32>,
    /// Scaled noise as it appears in the mixture.
    pub noise: Vec<f32>,
    /// Gain applied to the fitted noise before normalization.
    pub noise_gain: f64,
    /// Gain applied to the sum to keep `|out| ≤ 1`; 1 when no clipping.
    pub peak_gain: f64,
}

impl Mixture {
    /// SNR of the components actually present in the mixture.
    pub fn measured_snr_db(&self) -> f64 {
        10.0 * (mean_power(&self.speech) / mean_power(&self.noise)).log10()
    }
}

/// Loops or crops `noise` to `len` samples starting at a seeded random
/// offset.
pub fn fit_noise(noise: &[f32], len: usize, seed: u64) -> Result<Vec<f32>> {
    if noise.is_empty() {
        return Err(Error::InvalidArgument("noise is empty".into()));
    }
    let mut rng = CounterRng::new(seed);
    if noise.len() > len {
        let off = rng.below((noise.len() - len + 1) as u64) as usize;
        Ok(noise[off..off + len].to_vec())
    } else {
        let off = rng.below(noise.len() as u64) as usize;
        Ok((0..len).map(|i| noise[(off + i) % noise.len()]).collect())
    }
}

/// `speech + g·noise` with `g` chosen so the speech-to-noise power ratio is
/// `snr_db`. If the sum would clip, both components are scaled down together.
pub fn mix_at_snr(
    speech: &AudioBuffer,
    noise: &AudioBuffer,
    snr_db: f64,
    seed: u64,
) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("SNR must be finite, got {snr_db}")));
    }
    if speech.sample_rate() != noise.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "speech at {} Hz, noise at {} Hz",
            speech.sample_rate(),
            noise.sample_rate()
        )));
    }
    let ps = speech.power();
    if !(ps > 0.0) {
        return Err(Error::InvalidArgument("speech has zero energy".into()));
    }
    let fitted = fit_noise(noise.samples(), speech.len(), seed)?;
    let pn = mean_power(&fitted);
    if !(pn > 0.0) {
        return Err(Error::InvalidArgument("noise has zero energy".into()));
    }
    let g = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let s: Vec<f64> = speech.samples().iter().map(|&v| v as f64).collect();
    let n: Vec<f64> = fitted.iter().map(|&v| v as f64 * g).collect();
    let peak = s
        .iter()
        .zip(&n)
        .fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
    let peak_gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    let speech_c: Vec<f32> = s.iter().map(|v| (v * peak_gain) as f32).collect();
    let noise_c: Vec<f32> = n.iter().map(|v| (v * peak_gain) as f32).collect();
    let mixed: Vec<f32> = s
        .iter()
        .zip(&n)
        .map(|(a, b)| ((a + b) * peak_gain) as f32)
        .collect();
    Ok(Mixture {
        mixture: AudioBuffer::new(mixed, speech.sample_rate())?,
        speech: speech_c,
        noise: noise_c,
        noise_gain: g,
        peak_gain,
    })
}

/// Where a regime takes its audio from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Clean,
    Noisy,
    Denoised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    C2c,
    N2n,
    N2c,
    Dc2c,
    Dn2n,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Self::C2c, Self::N2n, Self::N2c, Self::Dc2c, Self::Dn2n];

    pub fn name(self) -> &'static str {
        match self {
            Self::C2c => "c2c",
            Self::N2n => "n2n",
            Self::N2c => "n2c",
            Self::Dc2c => "dc2c",
            Self::Dn2n => "dn2n",
        }
    }

    pub fn conditioning_source(self) -> Source {
        match self {
            Self::C2c => Source::Clean,
            Self::N2n | Self::N2c => Source::Noisy,
            Self::Dc2c | Self::Dn2n => Source::Denoised,
        }
    }

    /// The target side. For the denoised regimes this also names the data
    /// the decoder was trained on: `dc2c` runs a c2c-style model on denoised
    /// input, `dn2n` an n2n-style one.
    pub fn target_source(self) -> Source {
        match self {
            Self::C2c | Self::N2c | Self::Dc2c => Source::Clean,
            Self::N2n | Self::Dn2n => Source::Noisy,
        }
    }

    pub fn needs_denoiser(self) -> bool {
        self.conditioning_source() == Source::Denoised
    }

    pub fn needs_noise(self) -> bool {
        self != Self::C2c
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown regime `{s}`")))
    }
}

/// Audio for the conditioning features and for the target.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioPair {
    pub conditioning: AudioBuffer,
    pub target: AudioBuffer,
}

/// Builds the `(conditioning, target)` audio for `regime`. `c2c` never
/// touches `noise`; the denoised regimes fail without a denoiser.
pub fn build_pair(
    regime: Regime,
    clean: &AudioBuffer,
    noise: &AudioBuffer,
    mix: MixSpec,
    denoiser: Option<&Denoiser>,
) -> Result<AudioPair> {
    if regime.needs_denoiser() && denoiser.is_none() {
        return Err(Error::InvalidArgument(format!(
            "regime {regime} needs a denoiser"
        )));
    }
    if regime == Regime::C2c {
        return Ok(AudioPair {
            conditioning: clean.clone(),
            target: clean.clone(),
        });
    }
    let mixed = mix_at_snr(clean, noise, mix.snr_db, mix.seed)?.mixture;
    let conditioning = match regime.conditioning_source() {
        Source::Clean => clean.clone(),
        Source::Noisy => mixed.clone(),
        Source::Denoised => denoiser.expect("checked above").denoise(&mixed)?,
    };
    let target = match regime.target_source() {
        Source::Clean => clean.clone(),
        _ => mixed,
    };
    Ok(AudioPair {
        conditioning,
        target,
    })
}

/// One line of an augmentation manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub noise: PathBuf,
    pub snr_db: f64,
    pub regime: Regime,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn mix_spec(&self) -> MixSpec {
        MixSpec::new(self.snr_db, self.seed)
    }
}

/// Parses a manifest: tab-separated `clean noise snr_db regime seed`, one
/// entry per line. Blank lines and lines starting with `#` are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let bad = |why: String| Error::format("manifest", format!("line {}: {why}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 tab-separated fields, got {}", f.len())));
        }
        let snr_db: f64 = f[2].trim().parse().map_err(|_| bad(format!("bad SNR `{}`", f[2])))?;
        if !snr_db.is_finite() {
            return Err(bad(format!("bad SNR `{}`", f[2])));
        }
        out.push(ManifestEntry {
            clean: PathBuf::from(f[0]),
            noise: PathBuf::from(f[1]),
            snr_db,
            regime: f[3].parse().map_err(|e: Error| bad(e.to_string()))?,
            seed: f[4].trim().parse().map_err(|_| bad(format!("bad seed `{}`", f[4])))?,
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# clean\tnoise\tsnr_db\tregime\tseed\n");
    for e in entries {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.clean.display(),
            e.noise.display(),
            e.snr_db,
            e.regime,
            e.seed
        ));
    }
    s
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, format_manifest(entries))?;
    Ok(())
}

/// `count` entries pairing clean and noise files at random, each with its
/// own seed and an SNR drawn uniformly from [`SNR_RANGE_DB`].
pub fn draw_manifest(
    clean: &[PathBuf],
    noise: &[PathBuf],
    regime: Regime,
    count: usize,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    if clean.is_empty() || noise.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one clean and one noise file".into(),
        ));
    }
    let mut rng = CounterRng::new(seed);
    Ok((0..count)
        .map(|_| {
            let c = rng.below(clean.len() as u64) as usize;
            let n = rng.below(noise.len() as u64) as usize;
            let item_seed = rng.next_u64();
            ManifestEntry {
                clean: clean[c].clone(),
                noise: noise[n].clone(),
                snr_db: MixSpec::random(item_seed).snr_db,
                regime,
                seed: item_seed,
            }
        })
        .collect())
}
