use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use nvc_core::audio::{read_wav, write_wav};
use nvc_core::augment::{build_pair, mix_at_snr, read_manifest, MixSpec, Regime};
use nvc_core::denoiser::{si_snr, si_snr_improvement, Denoiser, TasNetConfig};
use nvc_core::pipeline::{synthetic_utterance, Codec};
use nvc_core::quantizer::Bitstream;
use nvc_core::vocoder::VocoderConfig;
use nvc_core::weights::{Storage, WeightSet};
use nvc_core::AudioBuffer;

/// 3 kbps neural speech codec.
#[derive(Parser)]
#[command(name = "nvc", version)]
struct Cli {
    /// Line-oriented key=value output.
    #[arg(long, global = true)]
    porcelain: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct WeightsArg {
    /// NVW1 weight file.
    #[arg(long, value_name = "PATH")]
    weights: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// WAV to NVC1 bitstream.
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        weights: WeightsArg,
    },
    /// NVC1 bitstream to WAV.
    Decode {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        weights: WeightsArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the ConvTASNet enhancer.
    Denoise {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        weights: WeightsArg,
    },
    /// Encode and decode, denoising first for the dc2c/dn2n regimes.
    Roundtrip {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        weights: WeightsArg,
        #[arg(long, default_value = "c2c")]
        regime: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mix noise into speech at a given SNR.
    Mix {
        clean: PathBuf,
        noise: PathBuf,
        output: PathBuf,
        /// Drawn uniformly from [1, 40] dB when absent.
        #[arg(long, allow_negative_numbers = true)]
        snr_db: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build conditioning/target WAV pairs from an augmentation manifest.
    Pairs {
        manifest: PathBuf,
        out_dir: PathBuf,
        /// Needed for the dc2c/dn2n regimes.
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
    },
    /// SI-SNR of ESTIMATE against REFERENCE, and SI-SNRi given the noisy input.
    Metrics {
        estimate: PathBuf,
        reference: PathBuf,
        #[arg(long)]
        noisy: Option<PathBuf>,
    },
    /// List the tensors of a weight file.
    Inspect { weights: PathBuf },
    /// Write a weight file with random networks and a quantizer fitted to
    /// the training WAVs (synthetic speech when none are given).
    InitWeights {
        output: PathBuf,
        #[arg(long = "train", value_name = "WAV")]
        train: Vec<PathBuf>,
        /// Narrow layers for quick experiments.
        #[arg(long)]
        small: bool,
        #[arg(long)]
        no_denoiser: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

struct Report {
    porcelain: bool,
}

impl Report {
    fn field(&self, key: &str, value: impl Display) {
        if self.porcelain {
            println!("{key}={value}");
        } else {
            println!("{key:>16}: {value}");
        }
    }
}

fn load_codec(path: &Path) -> Result<Codec> {
    Codec::load(path).with_context(|| format!("loading weights from {}", path.display()))
}

fn read_audio(path: &Path) -> Result<AudioBuffer> {
    read_wav(path).with_context(|| format!("reading {}", path.display()))
}

fn write_audio(path: &Path, audio: &AudioBuffer) -> Result<()> {
    write_wav(path, audio).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let out = Report {
        porcelain: cli.porcelain,
    };
    match cli.command {
        Command::Encode {
            input,
            output,
            weights,
        } => {
            let codec = load_codec(&weights.weights)?;
            let audio = read_audio(&input)?;
            let bs = codec.encode(&audio)?;
            let bytes = bs.to_bytes();
            std::fs::write(&output, &bytes)
                .with_context(|| format!("writing {}", output.display()))?;
            out.field("frames", bs.n_frames);
            out.field("bytes", bytes.len());
            out.field("bitrate_bps", bs.bitrate_bps());
        }
        Command::Decode {
            input,
            output,
            weights,
            seed,
        } => {
            let codec = load_codec(&weights.weights)?;
            let bytes =
                std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let bs = Bitstream::from_bytes(&bytes)?;
            let audio = codec.decode(&bs, seed)?;
            write_audio(&output, &audio)?;
            out.field("frames", bs.n_frames);
            out.field("samples", audio.len());
        }
        Command::Denoise {
            input,
            output,
            weights,
        } => {
            let set = WeightSet::load(&weights.weights)?;
            let model = Denoiser::from_weights(&set)?;
            let audio = read_audio(&input)?;
            let clean = model.denoise(&audio)?;
            write_audio(&output, &clean)?;
            out.field("samples", clean.len());
        }
        Command::Roundtrip {
            input,
            output,
            weights,
            regime,
            seed,
        } => {
            let regime: Regime = regime.parse()?;
            let codec = load_codec(&weights.weights)?;
            let audio = read_audio(&input)?;
            let (bs_bits, decoded) = codec.roundtrip_with_stream(&audio, regime, seed)?;
            write_audio(&output, &decoded)?;
            out.field("regime", regime);
            out.field("frames", bs_bits.n_frames);
            out.field("samples", decoded.len());
            out.field("bitrate", bs_bits.bitrate_bps());
        }
        Command::Mix {
            clean,
            noise,
            output,
            snr_db,
            seed,
        } => {
            let spec = match snr_db {
                Some(s) => MixSpec::new(s, seed),
                None => MixSpec::random(seed),
            };
            let m = mix_at_snr(&read_audio(&clean)?, &read_audio(&noise)?, spec.snr_db, seed)?;
            write_audio(&output, &m.mixture)?;
            out.field("snr_db", spec.snr_db);
            out.field("measured_snr_db", m.measured_snr_db());
            out.field("noise_gain", m.noise_gain);
            out.field("peak_gain", m.peak_gain);
        }
        Command::Pairs {
            manifest,
            out_dir,
            weights,
        } => {
            let entries = read_manifest(&manifest)
                .with_context(|| format!("reading {}", manifest.display()))?;
            let denoiser = match &weights {
                Some(p) => Some(Denoiser::from_weights(&WeightSet::load(p)?)?),
                None => None,
            };
            std::fs::create_dir_all(&out_dir)?;
            for (i, e) in entries.iter().enumerate() {
                let pair = build_pair(
                    e.regime,
                    &read_audio(&e.clean)?,
                    &read_audio(&e.noise)?,
                    e.mix_spec(),
                    denoiser.as_ref(),
                )
                .with_context(|| format!("manifest entry {}", i + 1))?;
                write_audio(&out_dir.join(format!("{i:05}_cond.wav")), &pair.conditioning)?;
                write_audio(&out_dir.join(format!("{i:05}_target.wav")), &pair.target)?;
            }
            out.field("pairs", entries.len());
        }
        Command::Metrics {
            estimate,
            reference,
            noisy,
        } => {
            let est = read_audio(&estimate)?;
            let reference = read_audio(&reference)?;
            out.field("si_snr_db", format!("{:.4}", si_snr(&est, &reference)?));
            if let Some(n) = noisy {
                let n = read_audio(&n)?;
                out.field(
                    "si_snri_db",
                    format!("{:.4}", si_snr_improvement(&n, &est, &reference)?),
                );
            }
        }
        Command::Inspect { weights } => {
            let set = WeightSet::load(&weights)
                .with_context(|| format!("loading weights from {}", weights.display()))?;
            for (name, t) in set.tensors() {
                let kind = match t.storage() {
                    Storage::Dense => "dense".to_string(),
                    Storage::BlockSparse { .. } => "block4x4".to_string(),
                    Storage::BlockDiagonal { n_blocks } => format!("blockdiag{n_blocks}"),
                };
                let shape = t
                    .shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x");
                let sparsity = format!("{:.2}%", 100.0 * t.sparsity());
                if out.porcelain {
                    println!("tensor={name} shape={shape} storage={kind} sparsity={sparsity}");
                } else {
                    println!("{name:<28} {shape:<14} {kind:<12} {sparsity:>8}");
                }
            }
            for (k, v) in set.metadata() {
                if out.porcelain {
                    println!("meta.{k}={v}");
                } else {
                    println!("{k:<28} = {v}");
                }
            }
        }
        Command::InitWeights {
            output,
            train,
            small,
            no_denoiser,
            seed,
        } => {
            let training: Vec<AudioBuffer> = if train.is_empty() {
                (0..8).map(|i| synthetic_utterance(4.0, seed.wrapping_add(i))).collect()
            } else {
                train.iter().map(|p| read_audio(p)).collect::<Result<_>>()?
            };
            let (voc, den) = if small {
                (VocoderConfig::tiny(), TasNetConfig::tiny())
            } else {
                (VocoderConfig::default(), TasNetConfig::default())
            };
            let den = (!no_denoiser).then_some(den);
            let codec = Codec::random(&training, voc, den, seed)?;
            let set = codec.to_weights();
            set.save(&output)
                .with_context(|| format!("writing {}", output.display()))?;
            out.field("tensors", set.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
