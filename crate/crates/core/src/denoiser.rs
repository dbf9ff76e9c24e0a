//! Causal ConvTASNet speech enhancer and the SI-SNR metric.
//!
//! A learned analysis filterbank `F` (`filters × window`, hop `hop`) turns
//! the waveform into frames; a second filterbank `F'` feeds the mask network,
//! a stack of residual blocks (1×1 conv, PReLU, causal dilated depthwise
//! conv, PReLU, 1×1 conv) without any normalization. A final causal conv and
//! a sigmoid give one mask per filter per frame. The mask computed at frame
//! `m` multiplies analysis frame `m - lookahead`, and the synthesis bank `G`
//! overlap-adds the masked frames back to audio.
//!
//! Frame `k` reads `x[k·hop - (window - hop) .. (k+1)·hop]`. The causal
//! output writes it to `y[(k+1)·hop .. (k+1)·hop + window]`, so `y` is the
//! input delayed by `window` samples and output sample `n` depends only on
//! input samples `< n + lookahead·hop`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::kernels::conv::{pointwise_step, RowHistory};
use crate::kernels::{
    conv1d, depthwise_conv1d, magnitude_prune, pointwise, prelu, sigmoid, ConvKernel,
    DepthwiseKernel, LinearOp, Matrix, Sequence,
};
use crate::par;
use crate::rng::CounterRng;
use crate::weights::{Tensor, WeightSet};
use crate::SAMPLE_RATE;

/// Largest mask value; keeps masks strictly inside (0, 1) in f32.
pub const MASK_MAX: f32 = 1.0 - f32::EPSILON / 2.0;
pub const MASK_MIN: f32 = f32::MIN_POSITIVE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TasNetConfig {
    pub filters: usize,
    pub window: usize,
    pub hop: usize,
    pub mask_filters: usize,
    pub blocks: usize,
    pub dilation_cycle: u32,
    pub block_channels: usize,
    pub depthwise_width: usize,
    pub mask_width: usize,
    /// Mask frames between a mask and the analysis frame it scales.
    pub lookahead: usize,
}

impl Default for TasNetConfig {
    fn default() -> Self {
        Self {
            filters: 256,
            window: 64,
            hop: 16,
            mask_filters: 128,
            blocks: 20,
            dilation_cycle: 10,
            block_channels: 256,
            depthwise_width: 3,
            mask_width: 3,
            lookahead: 2,
        }
    }
}

impl TasNetConfig {
    /// Default framing with narrow layers and four blocks.
    pub fn tiny() -> Self {
        Self {
            filters: 32,
            mask_filters: 16,
            blocks: 4,
            dilation_cycle: 3,
            block_channels: 32,
            ..Self::default()
        }
    }

    pub fn dilation(&self, block: usize) -> usize {
        1 << (block as u32 % self.dilation_cycle)
    }

    pub fn frame_rate_hz(&self) -> usize {
        SAMPLE_RATE as usize / self.hop
    }

    /// Delay of [`Denoiser::process_causal`] in samples.
    pub fn latency(&self) -> usize {
        self.window
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("denoiser config: {m}")));
        if self.hop == 0 || self.window < self.hop || self.window % self.hop != 0 {
            return bad("window must be a positive multiple of the hop");
        }
        if self.filters == 0 || self.mask_filters == 0 || self.block_channels == 0 {
            return bad("layer sizes must be positive");
        }
        if self.dilation_cycle == 0 || self.dilation_cycle > 16 {
            return bad("dilation cycle must be in 1..=16");
        }
        if self.depthwise_width == 0 || self.mask_width == 0 {
            return bad("kernel widths must be positive");
        }
        Ok(())
    }

    pub fn write_metadata(&self, set: &mut WeightSet) {
        set.set_meta("tasnet.filters", self.filters);
        set.set_meta("tasnet.window", self.window);
        set.set_meta("tasnet.hop", self.hop);
        set.set_meta("tasnet.mask_filters", self.mask_filters);
        set.set_meta("tasnet.blocks", self.blocks);
        set.set_meta("tasnet.dilation_cycle", self.dilation_cycle);
        set.set_meta("tasnet.block_channels", self.block_channels);
        set.set_meta("tasnet.depthwise_width", self.depthwise_width);
        set.set_meta("tasnet.mask_width", self.mask_width);
        set.set_meta("tasnet.lookahead", self.lookahead);
    }

    pub fn from_metadata(set: &WeightSet) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            filters: set.meta_or("tasnet.filters", d.filters)?,
            window: set.meta_or("tasnet.window", d.window)?,
            hop: set.meta_or("tasnet.hop", d.hop)?,
            mask_filters: set.meta_or("tasnet.mask_filters", d.mask_filters)?,
            blocks: set.meta_or("tasnet.blocks", d.blocks)?,
            dilation_cycle: set.meta_or("tasnet.dilation_cycle", d.dilation_cycle)?,
            block_channels: set.meta_or("tasnet.block_channels", d.block_channels)?,
            depthwise_width: set.meta_or("tasnet.depthwise_width", d.depthwise_width)?,
            mask_width: set.meta_or("tasnet.mask_width", d.mask_width)?,
            lookahead: set.meta_or("tasnet.lookahead", d.lookahead)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One residual block of the mask network.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBlock {
    pub input: LinearOp,
    pub input_bias: Vec<f32>,
    pub alpha1: f32,
    pub depthwise: DepthwiseKernel,
    pub depthwise_bias: Vec<f32>,
    pub alpha2: f32,
    pub output: LinearOp,
    pub output_bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: TasNetConfig,
    /// `F`: `filters × window`.
    pub encoder: Matrix,
    /// `F'`: `mask_filters × window`.
    pub mask_encoder: Matrix,
    pub blocks: Vec<MaskBlock>,
    /// `filters × mask_filters × mask_width`, causal.
    pub mask: ConvKernel,
    pub mask_bias: Vec<f32>,
    /// `G`: `window × filters`.
    pub decoder: Matrix,
}

/// Tensor names under the `tasnet.` prefix.
pub mod names {
    pub const PREFIX: &str = "tasnet.";
    pub const ENCODER: &str = "tasnet.encoder.w";
    pub const MASK_ENCODER: &str = "tasnet.mask_encoder.w";
    pub const MASK_W: &str = "tasnet.mask.w";
    pub const MASK_B: &str = "tasnet.mask.b";
    pub const DECODER: &str = "tasnet.decoder.w";

    pub fn block(k: usize, part: &str) -> String {
        format!("tasnet.block{k}.{part}")
    }
}

impl Denoiser {
    pub fn from_weights(set: &WeightSet) -> Result<Self> {
        let cfg = TasNetConfig::from_metadata(set)?;
        let (f, fm, b, w) = (cfg.filters, cfg.mask_filters, cfg.block_channels, cfg.window);
        let blocks = (0..cfg.blocks)
            .map(|k| {
                Ok(MaskBlock {
                    input: set.linear(&names::block(k, "in.w"), b, fm)?,
                    input_bias: set.vector(&names::block(k, "in.b"), b)?,
                    alpha1: set.vector(&names::block(k, "prelu1"), 1)?[0],
                    depthwise: set.depthwise(&names::block(k, "dw.w"), b, cfg.depthwise_width)?,
                    depthwise_bias: set.vector(&names::block(k, "dw.b"), b)?,
                    alpha2: set.vector(&names::block(k, "prelu2"), 1)?[0],
                    output: set.linear(&names::block(k, "out.w"), fm, b)?,
                    output_bias: set.vector(&names::block(k, "out.b"), fm)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            encoder: set.matrix(names::ENCODER, f, w)?,
            mask_encoder: set.matrix(names::MASK_ENCODER, fm, w)?,
            blocks,
            mask: set.conv(names::MASK_W, f, fm, cfg.mask_width)?,
            mask_bias: set.vector(names::MASK_B, f)?,
            decoder: set.matrix(names::DECODER, w, f)?,
            config: cfg,
        })
    }

    pub fn to_weights(&self) -> WeightSet {
        let mut set = WeightSet::new();
        self.config.write_metadata(&mut set);
        let dense = |m: &Matrix| Tensor::from(&LinearOp::Dense(m.clone()));
        set.insert(names::ENCODER, dense(&self.encoder));
        set.insert(names::MASK_ENCODER, dense(&self.mask_encoder));
        set.insert(names::DECODER, dense(&self.decoder));
        set.insert(names::MASK_W, Tensor::from(&self.mask));
        set.insert(names::MASK_B, Tensor::vector(self.mask_bias.clone()));
        for (k, blk) in self.blocks.iter().enumerate() {
            set.insert_op(names::block(k, "in.w"), &blk.input);
            set.insert(names::block(k, "in.b"), Tensor::vector(blk.input_bias.clone()));
            set.insert(names::block(k, "prelu1"), Tensor::vector(vec![blk.alpha1]));
            set.insert(names::block(k, "dw.w"), Tensor::from(&blk.depthwise));
            set.insert(names::block(k, "dw.b"), Tensor::vector(blk.depthwise_bias.clone()));
            set.insert(names::block(k, "prelu2"), Tensor::vector(vec![blk.alpha2]));
            set.insert_op(names::block(k, "out.w"), &blk.output);
            set.insert(names::block(k, "out.b"), Tensor::vector(blk.output_bias.clone()));
        }
        set
    }

    /// Random weights. The 1×1 convs are block-pruned to `prune`; the
    /// filterbanks, depthwise convs and the mask conv stay dense.
    pub fn random(cfg: TasNetConfig, seed: u64, prune: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = CounterRng::new(seed);
        let (f, fm, b, w) = (cfg.filters, cfg.mask_filters, cfg.block_channels, cfg.window);
        let mut dense = |rows: usize, cols: usize, fan_in: usize| {
            let a = (3.0 / fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.range(-a, a) as f32)
        };
        let encoder = dense(f, w, w);
        let mask_encoder = dense(fm, w, w);
        let decoder = dense(w, f, f);
        let pruned = |m: Matrix| -> Result<LinearOp> {
            if prune > 0.0 && m.rows() % 4 == 0 && m.cols() % 4 == 0 {
                Ok(LinearOp::BlockSparse(magnitude_prune(&m, prune)?))
            } else {
                Ok(LinearOp::Dense(m))
            }
        };
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let input = pruned(dense(b, fm, fm))?;
            let output = pruned(dense(fm, b, b))?;
            let dw = dense(b, cfg.depthwise_width, cfg.depthwise_width);
            blocks.push(MaskBlock {
                input,
                input_bias: vec![0.0; b],
                alpha1: 0.25,
                depthwise: DepthwiseKernel::new(b, cfg.depthwise_width, dw.data().to_vec())?,
                depthwise_bias: vec![0.0; b],
                alpha2: 0.25,
                output,
                output_bias: vec![0.0; fm],
            });
        }
        let mk = dense(f, fm * cfg.mask_width, fm * cfg.mask_width);
        Ok(Self {
            encoder,
            mask_encoder,
            blocks,
            mask: ConvKernel::new(f, fm, cfg.mask_width, mk.data())?,
            mask_bias: vec![0.0; f],
            decoder,
            config: cfg,
        })
    }

    /// Analysis frames `0..n` of `x` (zero outside the signal), one
    /// `window`-long row each.
    fn windows(&self, x: &[f32], n: usize) -> Sequence {
        let (w, h) = (self.config.window, self.config.hop);
        let mut out = Sequence::zeros(n, w);
        par::for_each_chunk_mut(out.data_mut(), w, |k, row| {
            let start = (k * h + h) as isize - w as isize;
            for (i, v) in row.iter_mut().enumerate() {
                let t = start + i as isize;
                if t >= 0 && (t as usize) < x.len() {
                    *v = x[t as usize];
                }
            }
        });
        out
    }

    /// Masks for frames `0..n`, `n × filters`.
    fn masks_from_windows(&self, windows: &Sequence) -> Result<Sequence> {
        let mut a = pointwise(windows, &LinearOp::Dense(self.mask_encoder.clone()), None)?;
        for (k, blk) in self.blocks.iter().enumerate() {
            let mut h = pointwise(&a, &blk.input, Some(&blk.input_bias))?;
            h.map_in_place(|v| prelu(v, blk.alpha1));
            let mut h = depthwise_conv1d(
                &h,
                &blk.depthwise,
                Some(&blk.depthwise_bias),
                self.config.dilation(k),
                0,
            )?;
            h.map_in_place(|v| prelu(v, blk.alpha2));
            let o = pointwise(&h, &blk.output, Some(&blk.output_bias))?;
            for (a, o) in a.data_mut().iter_mut().zip(o.data()) {
                *a += o;
            }
        }
        let mut m = conv1d(&a, &self.mask, Some(&self.mask_bias), 1, 0)?;
        m.map_in_place(mask_activation);
        Ok(m)
    }

    /// The mask sequence for `audio`: one row per analysis frame
    /// (`ceil(len / hop)` rows), every value strictly inside (0, 1).
    pub fn masks(&self, audio: &[f32]) -> Result<Sequence> {
        let n = audio.len().div_ceil(self.config.hop);
        self.masks_from_windows(&self.windows(audio, n))
    }

    /// Causal enhancement: returns `x.len()` samples of the enhanced signal
    /// delayed by [`TasNetConfig::latency`] samples.
    pub fn process_causal(&self, x: &[f32]) -> Result<Vec<f32>> {
        let cfg = &self.config;
        let (w, h, l) = (cfg.window, cfg.hop, cfg.lookahead);
        let n = x.len();
        // Frames whose output lands inside [0, n).
        let k_out = n.saturating_sub(h).div_ceil(h);
        let windows = self.windows(x, k_out + l);
        let masks = self.masks_from_windows(&windows)?;
        let enc = LinearOp::Dense(self.encoder.clone());
        let dec = LinearOp::Dense(self.decoder.clone());
        let frames = par::map_range(k_out, |k| {
            let mut e = vec![0.0; cfg.filters];
            pointwise_step(&enc, None, windows.row(k), &mut e);
            for (e, m) in e.iter_mut().zip(masks.row(k + l)) {
                *e *= m;
            }
            let mut g = vec![0.0; w];
            pointwise_step(&dec, None, &e, &mut g);
            g
        });
        let mut y = vec![0.0f32; n];
        for (k, g) in frames.iter().enumerate() {
            let start = (k + 1) * h;
            for (i, v) in g.iter().enumerate() {
                if let Some(s) = y.get_mut(start + i) {
                    *s += v;
                }
            }
        }
        Ok(y)
    }

    /// Same-length enhancement with the delay removed.
    pub fn denoise(&self, audio: &AudioBuffer) -> Result<AudioBuffer> {
        audio.require_engine_rate()?;
        let lat = self.config.latency();
        let mut x = audio.samples().to_vec();
        x.resize(x.len() + lat, 0.0);
        let y = self.process_causal(&x)?;
        AudioBuffer::new(y[lat..].to_vec(), audio.sample_rate())
    }
}

/// Convenience wrapper for [`Denoiser::denoise`].
pub fn denoise(audio: &AudioBuffer, model: &Denoiser) -> Result<AudioBuffer> {
    model.denoise(audio)
}

#[inline]
fn mask_activation(v: f32) -> f32 {
    sigmoid(v).clamp(MASK_MIN, MASK_MAX)
}

/// Sample-by-sample twin of [`Denoiser::process_causal`]; bit-identical for
/// any chunking of the input.
#[derive(Debug, Clone)]
pub struct DenoiserStream<'a> {
    model: &'a Denoiser,
    window: Vec<f32>,
    fill: usize,
    frames: usize,
    total_in: usize,
    emitted: usize,
    encoded: VecDeque<Vec<f32>>,
    block_inputs: Vec<RowHistory>,
    mask_inputs: RowHistory,
    /// Output samples from `emitted` on, still open to overlap-add.
    pending: VecDeque<f32>,
    finished: bool,
}

impl<'a> DenoiserStream<'a> {
    pub fn new(model: &'a Denoiser) -> Self {
        let cfg = &model.config;
        Self {
            model,
            window: vec![0.0; cfg.window],
            fill: 0,
            frames: 0,
            total_in: 0,
            emitted: 0,
            encoded: VecDeque::new(),
            block_inputs: (0..cfg.blocks)
                .map(|k| RowHistory::new((cfg.depthwise_width - 1) * cfg.dilation(k) + 1))
                .collect(),
            mask_inputs: RowHistory::new(cfg.mask_width),
            pending: VecDeque::new(),
            finished: false,
        }
    }

    pub fn push(&mut self, samples: &[f32]) -> Vec<f32> {
        assert!(!self.finished, "push after finish");
        self.total_in += samples.len();
        let mut out = Vec::new();
        self.feed(samples, &mut out);
        out
    }

    /// Flushes the tail so the total output length equals the input length.
    pub fn finish(&mut self) -> Vec<f32> {
        let mut out = Vec::new();
        if self.finished {
            return out;
        }
        self.finished = true;
        let h = self.model.config.hop;
        while self.emitted < self.total_in {
            self.feed(&vec![0.0; h - self.fill], &mut out);
        }
        out
    }

    fn feed(&mut self, samples: &[f32], out: &mut Vec<f32>) {
        let cfg = &self.model.config;
        let (w, h) = (cfg.window, cfg.hop);
        for &s in samples {
            self.window[w - h + self.fill] = s;
            self.fill += 1;
            if self.fill == h {
                self.frame(out);
                self.window.copy_within(h.., 0);
                self.fill = 0;
            }
        }
    }

    fn frame(&mut self, out: &mut Vec<f32>) {
        let m = self.model;
        let cfg = &m.config;
        let t = self.frames as isize;
        self.frames += 1;

        let mut e = vec![0.0; cfg.filters];
        m.encoder.matvec_add_unchecked(&self.window, &mut e);
        self.encoded.push_back(e);

        let mut a = vec![0.0; cfg.mask_filters];
        m.mask_encoder.matvec_add_unchecked(&self.window, &mut a);
        for (k, (blk, hist)) in m.blocks.iter().zip(&mut self.block_inputs).enumerate() {
            let mut h = vec![0.0; cfg.block_channels];
            pointwise_step(&blk.input, Some(&blk.input_bias), &a, &mut h);
            h.iter_mut().for_each(|v| *v = prelu(*v, blk.alpha1));
            hist.push(h);
            let d = cfg.dilation(k);
            let mut g = vec![0.0; cfg.block_channels];
            blk.depthwise
                .apply(Some(&blk.depthwise_bias), &mut g, |j| hist.get(t - (j * d) as isize));
            g.iter_mut().for_each(|v| *v = prelu(*v, blk.alpha2));
            let mut o = vec![0.0; cfg.mask_filters];
            pointwise_step(&blk.output, Some(&blk.output_bias), &g, &mut o);
            for (a, o) in a.iter_mut().zip(&o) {
                *a += o;
            }
        }
        self.mask_inputs.push(a);
        let mut mask = vec![0.0; cfg.filters];
        let hist = &self.mask_inputs;
        m.mask.apply(Some(&m.mask_bias), &mut mask, |j| hist.get(t - j as isize));

        if self.frames <= cfg.lookahead {
            return;
        }
        let k = self.frames - 1 - cfg.lookahead;
        let mut e = self.encoded.pop_front().expect("analysis frame queued");
        for (e, v) in e.iter_mut().zip(&mask) {
            *e *= mask_activation(*v);
        }
        let mut g = vec![0.0; cfg.window];
        m.decoder.matvec_add_unchecked(&e, &mut g);

        let start = (k + 1) * cfg.hop;
        let need = start + cfg.window - self.emitted;
        if self.pending.len() < need {
            self.pending.resize(need, 0.0);
        }
        for (i, v) in g.iter().enumerate() {
            self.pending[start - self.emitted + i] += v;
        }
        // Everything before the next frame's start is final.
        let ready = (start + cfg.hop).min(self.total_in);
        while self.emitted < ready {
            out.push(self.pending.pop_front().unwrap_or(0.0));
            self.emitted += 1;
        }
    }
}

/// SI-SNR values are capped here (an exact match would be +∞).
pub const SI_SNR_CAP_DB: f64 = 100.0;

/// Scale-invariant SNR in dB, with both signals made zero-mean. The result is
/// clamped to `±SI_SNR_CAP_DB`.
pub fn si_snr(estimate: &AudioBuffer, reference: &AudioBuffer) -> Result<f64> {
    si_snr_slices(estimate.samples(), reference.samples())
}

pub fn si_snr_slices(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::shape(format!(
            "SI-SNR needs equal lengths, got {} and {}",
            estimate.len(),
            reference.len()
        )));
    }
    let centered = |x: &[f32]| {
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len().max(1) as f64;
        x.iter().map(|&v| v as f64 - mean).collect::<Vec<f64>>()
    };
    let e = centered(estimate);
    let r = centered(reference);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if !(rr > 0.0) {
        return Err(Error::InvalidArgument(
            "SI-SNR reference has zero energy".into(),
        ));
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (a, b) in e.iter().zip(&r) {
        let t = alpha * b;
        target += t * t;
        noise += (a - t) * (a - t);
    }
    let db = if target == 0.0 {
        -SI_SNR_CAP_DB
    } else if noise == 0.0 {
        SI_SNR_CAP_DB
    } else {
        10.0 * (target / noise).log10()
    };
    Ok(db.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

/// `si_snr(enhanced, clean) - si_snr(noisy, clean)`.
pub fn si_snr_improvement(
    noisy: &AudioBuffer,
    enhanced: &AudioBuffer,
    clean: &AudioBuffer,
) -> Result<f64> {
    Ok(si_snr(enhanced, clean)? - si_snr(noisy, clean)?)
}
