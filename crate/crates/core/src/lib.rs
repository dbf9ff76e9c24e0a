//! Streaming neural speech codec engine.
//!
//! The encoder turns 16 kHz speech into 160-dimensional log-mel frames at
//! 25 Hz, decorrelates them with a KLT and split-vector-quantizes each frame
//! to 120 bits (3 kbps). The decoder is a multi-band WaveGRU: a convolutional
//! conditioning stack upsamples the frames to 4 kHz, a GRU emits one sample
//! per QMF subband per step from a mixture of logistics, and a QMF synthesis
//! bank reassembles 16 kHz audio. An optional causal ConvTASNet denoiser can
//! run in front of the encoder.
//!
//! Data-parallel loops (feature frames, VQ search, k-means, convolutions over
//! time) go through [`par`], which uses rayon when the `parallel` feature is
//! enabled and plain iterators otherwise.

pub mod audio;
pub mod augment;
pub mod denoiser;
pub mod error;
pub mod features;
pub mod filterbank;
pub mod kernels;
pub mod par;
pub mod pipeline;
pub mod quantizer;
pub mod rng;
pub mod vocoder;
pub mod weights;

pub use audio::AudioBuffer;
pub use error::{Error, Result};

/// Engine-native sample rate.
pub const SAMPLE_RATE: u32 = 16_000;
/// Conditioning frame rate.
pub const FRAME_RATE: u32 = 25;
/// Audio samples per conditioning frame (16000 / 25).
pub const SAMPLES_PER_FRAME: usize = (SAMPLE_RATE / FRAME_RATE) as usize;
