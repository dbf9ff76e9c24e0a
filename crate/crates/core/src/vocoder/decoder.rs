//! Autoregressive sampling loop and teacher-forced likelihood.

use serde::{Deserialize, Serialize};

use super::conditioning::{condition_frames, ConditioningStream};
use super::mol::{mol_log_likelihood, mol_sample, MolParams};
use super::Vocoder;
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::features::FeatureFrame;
use crate::filterbank::{analyze, QmfSynthesizer};
use crate::kernels::{GruScratch, Sequence};
use crate::rng::CounterRng;
use crate::SAMPLE_RATE;

/// Everything a decode stream carries between GRU steps. Serializable, so a
/// stream can be checkpointed and resumed bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderState {
    pub steps: u64,
    pub hidden: Vec<f32>,
    /// Subband samples drawn at the previous step.
    pub last_samples: Vec<f32>,
    pub conditioning: ConditioningStream,
    pub synthesis: QmfSynthesizer,
    pub rng: CounterRng,
}

/// Per-step buffers; not part of the state.
struct Workspace {
    x: Vec<f32>,
    mol: Vec<f32>,
    gru: GruScratch,
}

impl Workspace {
    fn new(model: &Vocoder) -> Self {
        Self {
            x: vec![0.0; model.config.gru_size],
            mol: vec![0.0; model.config.mol_size()],
            gru: GruScratch::new(model.config.gru_size),
        }
    }
}

/// Advances the GRU by one step and leaves the mixture parameters for every
/// band in `ws.mol`.
fn advance(model: &Vocoder, cond: &[f32], prev: &[f32], hidden: &mut [f32], ws: &mut Workspace) {
    ws.x.copy_from_slice(&model.ar_bias);
    model.ar_proj.matvec_add_unchecked(prev, &mut ws.x);
    for (x, c) in ws.x.iter_mut().zip(cond) {
        *x += c;
    }
    model.gru.step_into(hidden, &ws.x, &mut ws.gru);
    ws.mol.copy_from_slice(&model.mol_bias);
    model.mol_proj.matvec_add_unchecked(hidden, &mut ws.mol);
}

/// A streaming decoder bound to a model.
pub struct Decoder<'a> {
    model: &'a Vocoder,
    state: DecoderState,
    ws: Workspace,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a Vocoder, seed: u64) -> Self {
        let d = model.config.gru_size;
        let state = DecoderState {
            steps: 0,
            hidden: vec![0.0; d],
            last_samples: vec![0.0; model.config.bands()],
            conditioning: ConditioningStream::new(model),
            synthesis: model.qmf.synthesizer(),
            rng: CounterRng::new(seed),
        };
        Self {
            model,
            state,
            ws: Workspace::new(model),
        }
    }

    /// Continues from a snapshot taken with the same model.
    pub fn resume(model: &'a Vocoder, state: DecoderState) -> Result<Self> {
        if state.hidden.len() != model.config.gru_size
            || state.last_samples.len() != model.config.bands()
            || state.synthesis.bands() != model.config.bands()
        {
            return Err(Error::shape("decoder state does not match the model"));
        }
        Ok(Self {
            model,
            state,
            ws: Workspace::new(model),
        })
    }

    pub fn snapshot(&self) -> DecoderState {
        self.state.clone()
    }

    pub fn state(&self) -> &DecoderState {
        &self.state
    }

    /// Consumes one feature frame and returns the audio it released. With
    /// one frame of lookahead the first call returns nothing and later calls
    /// return the previous frame's 640 samples.
    pub fn push_frame(&mut self, frame: &FeatureFrame) -> Result<Vec<f32>> {
        let rows = self.state.conditioning.push(self.model, frame)?;
        let mut out = Vec::with_capacity(rows.len() * self.samples_per_row());
        for r in &rows {
            self.run_row(r, &mut out, None);
        }
        Ok(out)
    }

    /// Emits the audio held back by the lookahead.
    pub fn finish(&mut self) -> Vec<f32> {
        let rows = self.state.conditioning.finish(self.model);
        let mut out = Vec::with_capacity(rows.len() * self.samples_per_row());
        for r in &rows {
            self.run_row(r, &mut out, None);
        }
        out
    }

    fn samples_per_row(&self) -> usize {
        self.model.config.tile * self.model.config.bands()
    }

    /// Runs `tile` GRU steps on one upsampled conditioning row.
    fn run_row(&mut self, row: &[f32], out: &mut Vec<f32>, mut bands: Option<&mut Vec<f32>>) {
        let cfg = &self.model.config;
        let k3 = 3 * cfg.mixtures;
        for _ in 0..cfg.tile {
            let st = &mut self.state;
            advance(self.model, row, &st.last_samples, &mut st.hidden, &mut self.ws);
            for (b, s) in st.last_samples.iter_mut().enumerate() {
                let p = MolParams::from_slice(&self.ws.mol[b * k3..(b + 1) * k3]);
                let u1 = st.rng.uniform();
                let u2 = st.rng.uniform();
                *s = mol_sample(&p, u1, u2, cfg.scale_floor);
            }
            if let Some(b) = bands.as_deref_mut() {
                b.extend_from_slice(&st.last_samples);
            }
            st.synthesis.push_step(&st.last_samples, out);
            st.steps += 1;
        }
    }
}

/// Generated audio together with the subband samples drawn for it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub audio: AudioBuffer,
    /// `steps × bands`, the values the sampler drew before synthesis.
    pub subbands: Sequence,
}

/// Decodes a whole utterance: `samples_per_frame` samples per frame,
/// including the QMF cascade's group delay at the start.
pub fn decode(model: &Vocoder, frames: &[FeatureFrame], seed: u64) -> Result<AudioBuffer> {
    Ok(generate(model, frames, seed)?.audio)
}

/// As [`decode`], also returning the drawn subband samples.
pub fn generate(model: &Vocoder, frames: &[FeatureFrame], seed: u64) -> Result<Generated> {
    let rows = condition_frames(model, frames)?;
    let mut dec = Decoder::new(model, seed);
    let cfg = &model.config;
    let mut audio = Vec::with_capacity(frames.len() * cfg.samples_per_frame());
    let mut bands = Vec::with_capacity(frames.len() * cfg.steps_per_frame() * cfg.bands());
    for t in 0..rows.steps() {
        dec.run_row(rows.row(t), &mut audio, Some(&mut bands));
    }
    let steps = bands.len() / cfg.bands();
    Ok(Generated {
        audio: AudioBuffer::new(audio, SAMPLE_RATE)?,
        subbands: Sequence::new(steps, cfg.bands(), bands)?,
    })
}

/// Mean negative log-likelihood per subband sample of `target`, feeding the
/// ground-truth previous subband samples at every step (teacher forcing).
/// The target is split into subbands with the model's analysis cascade.
pub fn teacher_forced_nll(
    model: &Vocoder,
    frames: &[FeatureFrame],
    target: &AudioBuffer,
) -> Result<f64> {
    let expected = frames.len() * model.config.samples_per_frame();
    if target.len() != expected {
        return Err(Error::shape(format!(
            "target has {} samples, {} frames need {expected}",
            target.len(),
            frames.len()
        )));
    }
    let bands = analyze(target, &model.qmf)?;
    teacher_forced_nll_subbands(model, frames, &bands)
}

/// Teacher-forced NLL against subband targets given directly
/// (`steps_per_frame × n_frames` steps of `bands` values).
pub fn teacher_forced_nll_subbands(
    model: &Vocoder,
    frames: &[FeatureFrame],
    targets: &Sequence,
) -> Result<f64> {
    let cfg = &model.config;
    let steps = frames.len() * cfg.steps_per_frame();
    if targets.steps() != steps || targets.channels() != cfg.bands() {
        return Err(Error::shape(format!(
            "subband targets are {}×{}, expected {steps}×{}",
            targets.steps(),
            targets.channels(),
            cfg.bands()
        )));
    }
    if steps == 0 {
        return Err(Error::InsufficientData("no frames to score".into()));
    }
    let rows = condition_frames(model, frames)?;
    let mut ws = Workspace::new(model);
    let mut hidden = vec![0.0; cfg.gru_size];
    let zero = vec![0.0; cfg.bands()];
    let k3 = 3 * cfg.mixtures;
    let mut total = 0.0;
    for k in 0..steps {
        let prev = if k == 0 { &zero[..] } else { targets.row(k - 1) };
        advance(model, rows.row(k / cfg.tile), prev, &mut hidden, &mut ws);
        for (b, &y) in targets.row(k).iter().enumerate() {
            let p = MolParams::from_slice(&ws.mol[b * k3..(b + 1) * k3]);
            total -= mol_log_likelihood(&p, y, cfg.scale_floor);
        }
    }
    Ok(total / (steps * cfg.bands()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocoder::VocoderConfig;

    fn frames(n: usize, dim: usize, seed: u64) -> Vec<FeatureFrame> {
        let mut rng = CounterRng::new(seed);
        (0..n)
            .map(|i| {
                let v = (0..dim).map(|_| rng.range(-3.0, 1.0) as f32).collect();
                FeatureFrame::new(v, i).unwrap()
            })
            .collect()
    }

    fn model() -> Vocoder {
        Vocoder::random(VocoderConfig::tiny(), 11, 0.5, 4).unwrap()
    }

    #[test]
    fn output_length_is_640_per_frame() {
        let m = model();
        let a = decode(&m, &frames(3, 160, 1), 0).unwrap();
        assert_eq!(a.len(), 3 * 640);
    }

    #[test]
    fn streaming_matches_batch() {
        let m = model();
        let f = frames(4, 160, 2);
        let batch = decode(&m, &f, 9).unwrap();
        let mut dec = Decoder::new(&m, 9);
        let mut out = Vec::new();
        for (i, fr) in f.iter().enumerate() {
            let chunk = dec.push_frame(fr).unwrap();
            assert_eq!(chunk.len(), if i == 0 { 0 } else { 640 });
            out.extend(chunk);
        }
        out.extend(dec.finish());
        assert_eq!(out, batch.samples());
    }

    #[test]
    fn snapshot_resume_is_bit_exact() {
        let m = model();
        let f = frames(5, 160, 3);
        let full = decode(&m, &f, 4).unwrap();

        let mut dec = Decoder::new(&m, 4);
        let mut out = Vec::new();
        for fr in &f[..2] {
            out.extend(dec.push_frame(fr).unwrap());
        }
        let json = serde_json::to_string(&dec.snapshot()).unwrap();
        drop(dec);
        let state: DecoderState = serde_json::from_str(&json).unwrap();
        let mut dec = Decoder::resume(&m, state).unwrap();
        for fr in &f[2..] {
            out.extend(dec.push_frame(fr).unwrap());
        }
        out.extend(dec.finish());
        assert_eq!(out, full.samples());
    }

    #[test]
    fn seeds_change_output() {
        let m = model();
        let f = frames(2, 160, 5);
        assert_eq!(decode(&m, &f, 1).unwrap(), decode(&m, &f, 1).unwrap());
        assert_ne!(decode(&m, &f, 1).unwrap(), decode(&m, &f, 2).unwrap());
    }

    #[test]
    fn own_subbands_score_better_than_foreign() {
        let m = model();
        let f = frames(2, 160, 6);
        let g = generate(&m, &f, 0).unwrap();
        let own = teacher_forced_nll_subbands(&m, &f, &g.subbands).unwrap();
        let mut other = g.subbands.clone();
        let mut rng = CounterRng::new(77);
        for v in other.data_mut() {
            *v = rng.range(-1.0, 1.0) as f32;
        }
        let foreign = teacher_forced_nll_subbands(&m, &f, &other).unwrap();
        assert!(own.is_finite() && own < foreign, "{own} vs {foreign}");
    }

    #[test]
    fn nll_rejects_length_mismatch() {
        let m = model();
        let f = frames(2, 160, 7);
        let a = AudioBuffer::silence(1000);
        assert!(teacher_forced_nll(&m, &f, &a).is_err());
    }
}
