//! Multi-band WaveGRU decoder.
//!
//! Log-mel frames at 25 Hz go through the conditioning stack (an input conv
//! with one frame of lookahead, three causal dilated convs, three ×2
//! transposed convs to 200 Hz, a projection to the GRU width) and are tiled
//! ×20 to the 4 kHz GRU rate. Each GRU step takes the conditioning vector
//! plus a projection of the previous step's subband samples, emits `M × K × 3`
//! mixture-of-logistics parameters, samples one value per band, and the QMF
//! synthesis bank turns the `M` band samples into `M` output samples.

mod conditioning;
mod decoder;
mod mol;

pub use conditioning::{condition, condition_frames, ConditioningStream};
pub use decoder::{
    decode, generate, teacher_forced_nll, teacher_forced_nll_subbands, Decoder, DecoderState,
    Generated,
};
pub use mol::{mol_log_likelihood, mol_sample, select_component, MolParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::{prototype, PrototypeKind, QmfCascade};
use crate::kernels::{
    magnitude_prune, BlockDiagonalMatrix, ConvKernel, GruWeights, LinearOp, Matrix,
};
use crate::rng::CounterRng;
use crate::weights::{Tensor, WeightSet};
use crate::{FRAME_RATE, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub n_mels: usize,
    pub cond_hidden: usize,
    pub input_conv_width: usize,
    pub lookahead_frames: usize,
    pub dilated_width: usize,
    pub dilations: Vec<usize>,
    pub upsample_layers: usize,
    pub upsample_width: usize,
    pub upsample_stride: usize,
    pub tile: usize,
    pub gru_size: usize,
    pub qmf_levels: u32,
    pub mixtures: usize,
    pub scale_floor: f64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 160,
            cond_hidden: 512,
            input_conv_width: 3,
            lookahead_frames: 1,
            dilated_width: 2,
            dilations: vec![1, 2, 4],
            upsample_layers: 3,
            upsample_width: 4,
            upsample_stride: 2,
            tile: 20,
            gru_size: 1024,
            qmf_levels: 2,
            mixtures: 8,
            scale_floor: 1e-4,
        }
    }
}

impl VocoderConfig {
    /// Same rates and band structure with narrow layers, for fast tests and
    /// toy models.
    pub fn tiny() -> Self {
        Self {
            cond_hidden: 16,
            gru_size: 32,
            ..Self::default()
        }
    }

    pub fn bands(&self) -> usize {
        1 << self.qmf_levels
    }

    /// Rate of the last transposed conv's output.
    pub fn upsampled_rate_hz(&self) -> usize {
        FRAME_RATE as usize * self.upsample_stride.pow(self.upsample_layers as u32)
    }

    pub fn gru_rate_hz(&self) -> usize {
        self.upsampled_rate_hz() * self.tile
    }

    /// GRU steps per conditioning frame.
    pub fn steps_per_frame(&self) -> usize {
        self.upsample_stride.pow(self.upsample_layers as u32) * self.tile
    }

    /// Projected (pre-tiling) conditioning rows per frame.
    pub fn rows_per_frame(&self) -> usize {
        self.upsample_stride.pow(self.upsample_layers as u32)
    }

    pub fn samples_per_frame(&self) -> usize {
        self.steps_per_frame() * self.bands()
    }

    pub fn mol_size(&self) -> usize {
        self.bands() * self.mixtures * 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("vocoder config: {m}")));
        if self.gru_rate_hz() * self.bands() != SAMPLE_RATE as usize {
            return bad(format!(
                "{} Hz × {} bands does not reach {SAMPLE_RATE} Hz",
                self.gru_rate_hz(),
                self.bands()
            ));
        }
        if self.input_conv_width == 0 || self.lookahead_frames >= self.input_conv_width {
            return bad("input conv must be wider than its lookahead".into());
        }
        if self.dilated_width == 0 || self.dilations.contains(&0) {
            return bad("dilated convs need width and dilation >= 1".into());
        }
        if self.upsample_width == 0 || self.upsample_stride == 0 {
            return bad("upsampling needs width and stride >= 1".into());
        }
        if self.n_mels == 0 || self.cond_hidden == 0 || self.gru_size == 0 || self.mixtures == 0 {
            return bad("layer sizes must be positive".into());
        }
        if !(self.scale_floor > 0.0) {
            return bad("scale floor must be positive".into());
        }
        Ok(())
    }

    pub fn write_metadata(&self, set: &mut WeightSet) {
        set.set_meta("vocoder.n_mels", self.n_mels);
        set.set_meta("vocoder.cond_hidden", self.cond_hidden);
        set.set_meta("vocoder.input_conv_width", self.input_conv_width);
        set.set_meta("vocoder.lookahead_frames", self.lookahead_frames);
        set.set_meta("vocoder.dilated_width", self.dilated_width);
        set.set_meta(
            "vocoder.dilations",
            self.dilations
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        set.set_meta("vocoder.upsample_layers", self.upsample_layers);
        set.set_meta("vocoder.upsample_width", self.upsample_width);
        set.set_meta("vocoder.upsample_stride", self.upsample_stride);
        set.set_meta("vocoder.tile", self.tile);
        set.set_meta("vocoder.gru_size", self.gru_size);
        set.set_meta("vocoder.qmf_levels", self.qmf_levels);
        set.set_meta("vocoder.mixtures", self.mixtures);
        set.set_meta("vocoder.scale_floor", self.scale_floor);
    }

    /// Reads the config back; absent keys take the engine defaults.
    pub fn from_metadata(set: &WeightSet) -> Result<Self> {
        let d = Self::default();
        let dilations = match set.meta("vocoder.dilations") {
            None => d.dilations.clone(),
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        Error::format("weights metadata", format!("vocoder.dilations = `{s}`"))
                    })
                })
                .collect::<Result<_>>()?,
        };
        let cfg = Self {
            n_mels: set.meta_or("vocoder.n_mels", d.n_mels)?,
            cond_hidden: set.meta_or("vocoder.cond_hidden", d.cond_hidden)?,
            input_conv_width: set.meta_or("vocoder.input_conv_width", d.input_conv_width)?,
            lookahead_frames: set.meta_or("vocoder.lookahead_frames", d.lookahead_frames)?,
            dilated_width: set.meta_or("vocoder.dilated_width", d.dilated_width)?,
            dilations,
            upsample_layers: set.meta_or("vocoder.upsample_layers", d.upsample_layers)?,
            upsample_width: set.meta_or("vocoder.upsample_width", d.upsample_width)?,
            upsample_stride: set.meta_or("vocoder.upsample_stride", d.upsample_stride)?,
            tile: set.meta_or("vocoder.tile", d.tile)?,
            gru_size: set.meta_or("vocoder.gru_size", d.gru_size)?,
            qmf_levels: set.meta_or("vocoder.qmf_levels", d.qmf_levels)?,
            mixtures: set.meta_or("vocoder.mixtures", d.mixtures)?,
            scale_floor: set.meta_or("vocoder.scale_floor", d.scale_floor)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A conv layer with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: ConvKernel,
    pub bias: Vec<f32>,
}

/// Conditioning stack weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningWeights {
    pub conv_in: ConvLayer,
    pub dilated: Vec<ConvLayer>,
    pub upsample: Vec<ConvLayer>,
    pub proj: LinearOp,
    pub proj_bias: Vec<f32>,
}

/// A complete decoder model.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocoder {
    pub config: VocoderConfig,
    pub conditioning: ConditioningWeights,
    pub gru: GruWeights,
    /// `gru_size × bands` projection of the previous step's subband samples.
    pub ar_proj: Matrix,
    pub ar_bias: Vec<f32>,
    pub mol_proj: LinearOp,
    pub mol_bias: Vec<f32>,
    pub qmf: QmfCascade,
}

/// Canonical tensor names.
pub mod names {
    pub const CONV_IN_W: &str = "cond.conv_in.w";
    pub const CONV_IN_B: &str = "cond.conv_in.b";
    pub const PROJ_W: &str = "cond.proj.w";
    pub const PROJ_B: &str = "cond.proj.b";
    pub const AR_W: &str = "ar_proj.w";
    pub const AR_B: &str = "ar_proj.b";
    pub const MOL_W: &str = "mol_proj.w";
    pub const MOL_B: &str = "mol_proj.b";
    pub const QMF_PROTOTYPE: &str = "qmf.prototype";

    pub fn dil_w(i: usize) -> String {
        format!("cond.dil{}.w", i + 1)
    }
    pub fn dil_b(i: usize) -> String {
        format!("cond.dil{}.b", i + 1)
    }
    pub fn up_w(i: usize) -> String {
        format!("cond.up{}.w", i + 1)
    }
    pub fn up_b(i: usize) -> String {
        format!("cond.up{}.b", i + 1)
    }
    pub fn gru(part: &str) -> String {
        format!("gru.{part}")
    }
}

impl Vocoder {
    pub fn from_weights(set: &WeightSet) -> Result<Self> {
        let cfg = VocoderConfig::from_metadata(set)?;
        let (h, d, m) = (cfg.cond_hidden, cfg.gru_size, cfg.bands());
        let layer = |w: &str, b: &str, c_in: usize, width: usize| -> Result<ConvLayer> {
            Ok(ConvLayer {
                kernel: set.conv(w, h, c_in, width)?,
                bias: set.vector(b, h)?,
            })
        };
        let conditioning = ConditioningWeights {
            conv_in: layer(
                names::CONV_IN_W,
                names::CONV_IN_B,
                cfg.n_mels,
                cfg.input_conv_width,
            )?,
            dilated: (0..cfg.dilations.len())
                .map(|i| layer(&names::dil_w(i), &names::dil_b(i), h, cfg.dilated_width))
                .collect::<Result<_>>()?,
            upsample: (0..cfg.upsample_layers)
                .map(|i| layer(&names::up_w(i), &names::up_b(i), h, cfg.upsample_width))
                .collect::<Result<_>>()?,
            proj: set.linear(names::PROJ_W, d, h)?,
            proj_bias: set.vector(names::PROJ_B, d)?,
        };
        let gru = GruWeights {
            wr: set.linear(&names::gru("wr"), d, d)?,
            wz: set.linear(&names::gru("wz"), d, d)?,
            wn: set.linear(&names::gru("wn"), d, d)?,
            ur: set.linear(&names::gru("ur"), d, d)?,
            uz: set.linear(&names::gru("uz"), d, d)?,
            un: set.linear(&names::gru("un"), d, d)?,
            br: set.vector(&names::gru("br"), d)?,
            bz: set.vector(&names::gru("bz"), d)?,
            bn: set.vector(&names::gru("bn"), d)?,
        };
        let qmf = match set.tensor(names::QMF_PROTOTYPE) {
            Ok(t) => {
                // Tensors are f32; recognize the built-in prototypes so they
                // keep their full f64 coefficients.
                let known = PrototypeKind::ALL
                    .into_iter()
                    .find(|&k| {
                        let p = prototype(k);
                        p.len() == t.data().len()
                            && p.iter().zip(t.data()).all(|(&a, &b)| a as f32 == b)
                    });
                match known {
                    Some(k) => QmfCascade::with_kind(cfg.qmf_levels, k),
                    None => QmfCascade::new(
                        cfg.qmf_levels,
                        t.data().iter().map(|&v| v as f64).collect(),
                    )?,
                }
            }
            Err(_) => QmfCascade::with_kind(cfg.qmf_levels, PrototypeKind::LowRipple16),
        };
        Ok(Self {
            conditioning,
            gru,
            ar_proj: set.matrix(names::AR_W, d, m)?,
            ar_bias: set.vector(names::AR_B, d)?,
            mol_proj: set.linear(names::MOL_W, cfg.mol_size(), d)?,
            mol_bias: set.vector(names::MOL_B, cfg.mol_size())?,
            qmf,
            config: cfg,
        })
    }

    pub fn to_weights(&self) -> WeightSet {
        let mut set = WeightSet::new();
        self.config.write_metadata(&mut set);
        let c = &self.conditioning;
        set.insert(names::CONV_IN_W, Tensor::from(&c.conv_in.kernel));
        set.insert(names::CONV_IN_B, Tensor::vector(c.conv_in.bias.clone()));
        for (i, l) in c.dilated.iter().enumerate() {
            set.insert(names::dil_w(i), Tensor::from(&l.kernel));
            set.insert(names::dil_b(i), Tensor::vector(l.bias.clone()));
        }
        for (i, l) in c.upsample.iter().enumerate() {
            set.insert(names::up_w(i), Tensor::from(&l.kernel));
            set.insert(names::up_b(i), Tensor::vector(l.bias.clone()));
        }
        set.insert_op(names::PROJ_W, &c.proj);
        set.insert(names::PROJ_B, Tensor::vector(c.proj_bias.clone()));
        let g = &self.gru;
        for (n, op) in [
            ("wr", &g.wr),
            ("wz", &g.wz),
            ("wn", &g.wn),
            ("ur", &g.ur),
            ("uz", &g.uz),
            ("un", &g.un),
        ] {
            set.insert_op(names::gru(n), op);
        }
        for (n, b) in [("br", &g.br), ("bz", &g.bz), ("bn", &g.bn)] {
            set.insert(names::gru(n), Tensor::vector(b.clone()));
        }
        set.insert_op(names::AR_W, &LinearOp::Dense(self.ar_proj.clone()));
        set.insert(names::AR_B, Tensor::vector(self.ar_bias.clone()));
        set.insert_op(names::MOL_W, &self.mol_proj);
        set.insert(names::MOL_B, Tensor::vector(self.mol_bias.clone()));
        set.insert(
            names::QMF_PROTOTYPE,
            Tensor::vector(self.qmf.prototype().iter().map(|&v| v as f32).collect()),
        );
        set
    }

    /// Randomly initialized model with the on-device sparsity structure:
    /// GRU input matrices and the large projections pruned to `prune` with
    /// 4×4 blocks, GRU recurrent matrices block-diagonal with `gru_blocks`
    /// blocks.
    pub fn random(cfg: VocoderConfig, seed: u64, prune: f64, gru_blocks: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = CounterRng::new(seed);
        let (h, d, m) = (cfg.cond_hidden, cfg.gru_size, cfg.bands());
        let mut uniform = |n: usize, fan_in: usize, gain: f64| -> Vec<f32> {
            let a = gain * (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.range(-a, a) as f32).collect()
        };
        let mut conv = |c_in: usize, width: usize| -> Result<ConvLayer> {
            Ok(ConvLayer {
                kernel: ConvKernel::new(h, c_in, width, &uniform(h * c_in * width, c_in * width, 1.0))?,
                bias: vec![0.0; h],
            })
        };
        let conv_in = conv(cfg.n_mels, cfg.input_conv_width)?;
        let dilated = (0..cfg.dilations.len())
            .map(|_| conv(h, cfg.dilated_width))
            .collect::<Result<_>>()?;
        let upsample = (0..cfg.upsample_layers)
            .map(|_| conv(h, cfg.upsample_width))
            .collect::<Result<_>>()?;

        let mut rng = CounterRng::new(seed ^ 0x5E_ED0F_6A7E);
        let mut dense = |rows: usize, cols: usize, fan_in: usize, gain: f64| -> Matrix {
            let a = gain * (3.0 / fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.range(-a, a) as f32)
        };
        let sparse_fan = |cols: usize| ((cols as f64 * (1.0 - prune)).ceil() as usize).max(1);
        let pruned = |m: Matrix| -> Result<LinearOp> {
            if prune > 0.0 && m.rows() % 4 == 0 && m.cols() % 4 == 0 {
                Ok(LinearOp::BlockSparse(magnitude_prune(&m, prune)?))
            } else {
                Ok(LinearOp::Dense(m))
            }
        };
        let proj = pruned(dense(d, h, sparse_fan(h), 1.0))?;
        let gw = |dense_m: Matrix| pruned(dense_m);
        let wr = gw(dense(d, d, sparse_fan(d), 1.0))?;
        let wz = gw(dense(d, d, sparse_fan(d), 1.0))?;
        let wn = gw(dense(d, d, sparse_fan(d), 1.0))?;
        let bs = d / gru_blocks.max(1);
        let mut recurrent = || -> Result<LinearOp> {
            let full = dense(d, d, bs, 1.0);
            Ok(LinearOp::BlockDiagonal(BlockDiagonalMatrix::from_dense(
                &full, gru_blocks,
            )?))
        };
        let ur = recurrent()?;
        let uz = recurrent()?;
        let un = recurrent()?;
        let ar_proj = dense(d, m, m, 1.0);
        let mol = dense(cfg.mol_size(), d, sparse_fan(d), 0.5);
        let mol_proj = pruned(mol)?;
        // Log-scale biases start near ln(0.05) so fresh models make quiet noise.
        let k = cfg.mixtures;
        let mol_bias = (0..cfg.mol_size())
            .map(|i| if i % (3 * k) >= 2 * k { -3.0 } else { 0.0 })
            .collect();
        Ok(Self {
            conditioning: ConditioningWeights {
                conv_in,
                dilated,
                upsample,
                proj,
                proj_bias: vec![0.0; d],
            },
            gru: GruWeights {
                wr,
                wz,
                wn,
                ur,
                uz,
                un,
                br: vec![0.0; d],
                bz: vec![0.0; d],
                bn: vec![0.0; d],
            },
            ar_proj,
            ar_bias: vec![0.0; d],
            mol_proj,
            mol_bias,
            qmf: QmfCascade::with_kind(cfg.qmf_levels, PrototypeKind::LowRipple16),
            config: cfg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rate_arithmetic() {
        let c = VocoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.upsampled_rate_hz(), 200);
        assert_eq!(c.gru_rate_hz(), 4000);
        assert_eq!(c.steps_per_frame(), 160);
        assert_eq!(c.samples_per_frame(), 640);
        assert_eq!(c.mol_size(), 4 * 8 * 3);
    }

    #[test]
    fn inconsistent_rates_are_rejected() {
        let c = VocoderConfig {
            tile: 10,
            ..VocoderConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn weights_round_trip() {
        let v = Vocoder::random(VocoderConfig::tiny(), 3, 0.92, 16).unwrap();
        let set = v.to_weights();
        let bytes = set.to_bytes();
        let back = Vocoder::from_weights(&WeightSet::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, v.config);
        assert_eq!(back.gru, v.gru);
        assert_eq!(back.conditioning, v.conditioning);
        assert_eq!(back.qmf, v.qmf);
        assert_eq!(back.gru.ur.sparsity(), 0.9375);
    }

    #[test]
    fn missing_tensor_is_named() {
        let v = Vocoder::random(VocoderConfig::tiny(), 3, 0.0, 4).unwrap();
        let mut set = WeightSet::new();
        for (k, t) in v.to_weights().tensors() {
            if k != "gru.uz" {
                set.insert(k, t.clone());
            }
        }
        v.config.write_metadata(&mut set);
        match Vocoder::from_weights(&set) {
            Err(Error::MissingTensor(n)) => assert_eq!(n, "gru.uz"),
            other => panic!("{other:?}"),
        }
    }
}
