//! The assembled codec: mel features, feature quantizer, vocoder and an
//! optional denoiser, all loaded from one weight file.

use std::path::Path;

use crate::audio::AudioBuffer;
use crate::augment::Regime;
use crate::denoiser::{names as tasnet_names, Denoiser, TasNetConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureFrame, MelConfig, MelExtractor};
use crate::quantizer::{pack_bitstream, unpack_bitstream, Bitstream, FeatureCodec, VqLayout};
use crate::rng::CounterRng;
use crate::vocoder::{self, Vocoder, VocoderConfig};
use crate::weights::WeightSet;
use crate::{FRAME_RATE, SAMPLE_RATE};

pub struct Codec {
    extractor: MelExtractor,
    pub quantizer: FeatureCodec,
    pub vocoder: Vocoder,
    pub denoiser: Option<Denoiser>,
}

impl Codec {
    pub fn new(
        mel: MelConfig,
        quantizer: FeatureCodec,
        vocoder: Vocoder,
        denoiser: Option<Denoiser>,
    ) -> Result<Self> {
        if mel.n_mels != quantizer.klt.dim() || mel.n_mels != vocoder.config.n_mels {
            return Err(Error::shape(format!(
                "mel config has {} bands, quantizer {}, vocoder {}",
                mel.n_mels,
                quantizer.klt.dim(),
                vocoder.config.n_mels
            )));
        }
        if mel.hop_len() != vocoder.config.samples_per_frame() {
            return Err(Error::shape(format!(
                "mel hop is {} samples, vocoder emits {} per frame",
                mel.hop_len(),
                vocoder.config.samples_per_frame()
            )));
        }
        Ok(Self {
            extractor: MelExtractor::new(mel)?,
            quantizer,
            vocoder,
            denoiser,
        })
    }

    /// Loads every part; the denoiser is optional and is loaded only when
    /// `tasnet.` tensors are present.
    pub fn from_weights(set: &WeightSet) -> Result<Self> {
        let denoiser = if set.has_prefix(tasnet_names::PREFIX) {
            Some(Denoiser::from_weights(set)?)
        } else {
            None
        };
        Self::new(
            MelConfig::from_metadata(set)?,
            FeatureCodec::from_weights(set)?,
            Vocoder::from_weights(set)?,
            denoiser,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weights(&WeightSet::load(path)?)
    }

    pub fn to_weights(&self) -> WeightSet {
        let mut set = self.quantizer.to_weights();
        self.mel().write_metadata(&mut set);
        set.merge(self.vocoder.to_weights());
        if let Some(d) = &self.denoiser {
            set.merge(d.to_weights());
        }
        set
    }

    pub fn mel(&self) -> &MelConfig {
        self.extractor.config()
    }

    pub fn features(&self, audio: &AudioBuffer) -> Result<Vec<FeatureFrame>> {
        self.extractor.extract(audio)
    }

    pub fn encode(&self, audio: &AudioBuffer) -> Result<Bitstream> {
        let frames = self.features(audio)?;
        let codes = self.quantizer.encode(&frames)?;
        pack_bitstream(&codes, self.quantizer.layout(), FRAME_RATE as u16)
    }

    /// Dequantized features carried by `stream`.
    pub fn decode_features(&self, stream: &Bitstream) -> Result<Vec<FeatureFrame>> {
        if stream.frame_rate_hz as u32 != FRAME_RATE {
            return Err(Error::format(
                "bitstream",
                format!("frame rate {} Hz, codec runs at {FRAME_RATE} Hz", stream.frame_rate_hz),
            ));
        }
        let codes = unpack_bitstream(stream, self.quantizer.layout())?;
        self.quantizer.decode(&codes)
    }

    /// `samples_per_frame` samples per coded frame.
    pub fn decode(&self, stream: &Bitstream, seed: u64) -> Result<AudioBuffer> {
        vocoder::decode(&self.vocoder, &self.decode_features(stream)?, seed)
    }

    /// Runs the conditioning side of `regime` (denoising first for the `d*`
    /// regimes), then encodes and decodes. The output covers the input
    /// rounded up to whole frames.
    pub fn roundtrip(&self, audio: &AudioBuffer, regime: Regime, seed: u64) -> Result<AudioBuffer> {
        Ok(self.roundtrip_with_stream(audio, regime, seed)?.1)
    }

    /// As [`Codec::roundtrip`], also returning the intermediate bitstream.
    pub fn roundtrip_with_stream(
        &self,
        audio: &AudioBuffer,
        regime: Regime,
        seed: u64,
    ) -> Result<(Bitstream, AudioBuffer)> {
        let input = if regime.needs_denoiser() {
            let d = self.denoiser.as_ref().ok_or_else(|| {
                Error::MissingTensor(format!(
                    "{} (regime {regime} needs a denoiser)",
                    tasnet_names::ENCODER
                ))
            })?;
            d.denoise(audio)?
        } else {
            audio.clone()
        };
        let stream = self.encode(&input)?;
        let audio = self.decode(&stream, seed)?;
        Ok((stream, audio))
    }

    /// A codec with random networks and a quantizer fitted to `training`
    /// audio. Useful as a structural stand-in for trained weights.
    pub fn random(
        training: &[AudioBuffer],
        vocoder: VocoderConfig,
        denoiser: Option<TasNetConfig>,
        seed: u64,
    ) -> Result<Self> {
        let mel = MelConfig::default();
        let extractor = MelExtractor::new(mel.clone())?;
        let mut frames = Vec::new();
        for a in training {
            frames.extend(extractor.extract(a)?);
        }
        for (i, f) in frames.iter_mut().enumerate() {
            f.frame_index = i;
        }
        let quantizer = FeatureCodec::train(&frames, &VqLayout::default(), seed)?;
        let voc = Vocoder::random(vocoder, seed.wrapping_add(1), 0.92, 16)?;
        let den = denoiser
            .map(|cfg| Denoiser::random(cfg, seed.wrapping_add(2), 0.92))
            .transpose()?;
        Self::new(mel, quantizer, voc, den)
    }
}

/// A deterministic speech-like test signal: a glottal-pulse-like harmonic
/// source with a wandering pitch, shaped by two moving resonances, plus a
/// little noise and syllable-rate amplitude modulation. Peak below 0.5.
pub fn synthetic_utterance(seconds: f64, seed: u64) -> AudioBuffer {
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let mut rng = CounterRng::new(seed);
    let f0_base = rng.range(90.0, 220.0);
    let vib = rng.range(0.5, 3.0);
    let syl = rng.range(2.5, 5.0);
    let f1 = rng.range(300.0, 800.0);
    let f2 = rng.range(900.0, 2500.0);
    let sr = SAMPLE_RATE as f64;
    let tau = std::f64::consts::TAU;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f0 = f0_base * (1.0 + 0.08 * (tau * vib * t).sin());
        phase += tau * f0 / sr;
        let env = 0.5 * (1.0 - (tau * syl * t).cos());
        let r1 = f1 * (1.0 + 0.2 * (tau * 0.7 * t).sin());
        let r2 = f2 * (1.0 + 0.15 * (tau * 0.4 * t).cos());
        let mut v = 0.0;
        let mut h = 1;
        while (h as f64) * f0 < 7000.0 {
            let fh = h as f64 * f0;
            let g = 1.0 / (1.0 + ((fh - r1) / 150.0).powi(2))
                + 0.5 / (1.0 + ((fh - r2) / 250.0).powi(2))
                + 0.02;
            v += g * (h as f64 * phase).sin() / h as f64;
            h += 1;
        }
        out.push((0.25 * env * v + 0.003 * rng.normal()) as f32);
    }
    let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 0.49 {
        let g = 0.49 / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    AudioBuffer::from_samples(out).expect("finite synthetic signal")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> Codec {
        let train: Vec<_> = (0..4).map(|s| synthetic_utterance(3.0, s)).collect();
        Codec::random(&train, VocoderConfig::tiny(), Some(TasNetConfig::tiny()), 7).unwrap()
    }

    #[test]
    fn one_second_is_375_bytes_and_16000_samples() {
        let c = codec();
        let a = synthetic_utterance(1.0, 99);
        let bs = c.encode(&a).unwrap();
        assert_eq!(bs.n_frames, 25);
        assert_eq!(bs.to_bytes().len(), 13 + 375);
        assert_eq!(bs.bitrate_bps(), 3000.0);
        assert_eq!(c.decode(&bs, 0).unwrap().len(), 16000);
    }

    #[test]
    fn weights_round_trip_through_bytes() {
        let c = codec();
        let back = Codec::from_weights(&WeightSet::from_bytes(&c.to_weights().to_bytes()).unwrap())
            .unwrap();
        let a = synthetic_utterance(0.5, 3);
        assert_eq!(back.encode(&a).unwrap(), c.encode(&a).unwrap());
        assert_eq!(back.roundtrip(&a, Regime::Dn2n, 4).unwrap(), c.roundtrip(&a, Regime::Dn2n, 4).unwrap());
    }

    #[test]
    fn denoised_regime_without_denoiser_fails() {
        let mut c = codec();
        c.denoiser = None;
        let a = synthetic_utterance(0.2, 3);
        assert!(c.roundtrip(&a, Regime::Dc2c, 0).is_err());
        assert_eq!(c.roundtrip(&a, Regime::N2n, 0).unwrap().len(), 3200);
    }
}
