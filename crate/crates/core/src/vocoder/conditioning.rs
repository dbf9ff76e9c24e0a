//! Conditioning stack, batch and streaming.
//!
//! Both paths evaluate every output row through [`ConvKernel::apply`] with
//! identical inputs, so a streamed run is bit-identical to the batch one.

use serde::{Deserialize, Serialize};

use super::{ConvLayer, Vocoder};
use crate::error::{Error, Result};
use crate::features::FeatureFrame;
use crate::kernels::conv::{pointwise_step, RowHistory};
use crate::kernels::{conv1d, pointwise, transpose_conv1d, Sequence};

/// Runs the stack up to the projection: `n_frames × rows_per_frame` rows of
/// `gru_size` values at the upsampled rate (200 Hz by default).
pub fn condition_frames(model: &Vocoder, frames: &[FeatureFrame]) -> Result<Sequence> {
    let cfg = &model.config;
    let rows: Vec<Vec<f32>> = frames
        .iter()
        .map(|f| {
            if f.dim() != cfg.n_mels {
                Err(Error::shape(format!(
                    "frame {} has {} values, model expects {}",
                    f.frame_index,
                    f.dim(),
                    cfg.n_mels
                )))
            } else {
                Ok(f.values.clone())
            }
        })
        .collect::<Result<_>>()?;
    let x = Sequence::from_rows(cfg.n_mels, &rows)?;
    let w = &model.conditioning;
    let mut a = conv1d(
        &x,
        &w.conv_in.kernel,
        Some(&w.conv_in.bias),
        1,
        cfg.lookahead_frames,
    )?;
    a.map_in_place(f32::tanh);
    for (layer, &d) in w.dilated.iter().zip(&cfg.dilations) {
        a = conv1d(&a, &layer.kernel, Some(&layer.bias), d, 0)?;
        a.map_in_place(f32::tanh);
    }
    for layer in &w.upsample {
        a = transpose_conv1d(&a, &layer.kernel, Some(&layer.bias), cfg.upsample_stride)?;
        a.map_in_place(f32::tanh);
    }
    pointwise(&a, &w.proj, Some(&w.proj_bias))
}

/// Conditioning vectors at the GRU rate: each upsampled row tiled `tile`
/// times, `steps_per_frame × n_frames` rows in total.
pub fn condition(model: &Vocoder, frames: &[FeatureFrame]) -> Result<Sequence> {
    let rows = condition_frames(model, frames)?;
    let tile = model.config.tile;
    let d = rows.channels();
    let mut out = Sequence::zeros(rows.steps() * tile, d);
    for (i, chunk) in out.data_mut().chunks_exact_mut(d).enumerate() {
        chunk.copy_from_slice(rows.row(i / tile));
    }
    Ok(out)
}

/// Streaming state of the conditioning stack. Holds no weights; the model is
/// passed to each call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningStream {
    frames_in: usize,
    /// Input-conv rows emitted so far.
    emitted: usize,
    finished: bool,
    input: RowHistory,
    dilated: Vec<RowHistory>,
    upsample: Vec<RowHistory>,
}

impl ConditioningStream {
    pub fn new(model: &Vocoder) -> Self {
        let cfg = &model.config;
        let s = cfg.upsample_stride;
        Self {
            frames_in: 0,
            emitted: 0,
            finished: false,
            input: RowHistory::new(cfg.input_conv_width),
            dilated: cfg
                .dilations
                .iter()
                .map(|&d| RowHistory::new((cfg.dilated_width - 1) * d + 1))
                .collect(),
            upsample: (0..cfg.upsample_layers)
                .map(|_| RowHistory::new((cfg.upsample_width - 1).div_ceil(s) + 1))
                .collect(),
        }
    }

    /// Frames consumed so far.
    pub fn frames_in(&self) -> usize {
        self.frames_in
    }

    /// Feeds one feature frame and returns the projected rows that became
    /// computable (none for the first `lookahead` frames, then
    /// `rows_per_frame` per frame).
    pub fn push(&mut self, model: &Vocoder, frame: &FeatureFrame) -> Result<Vec<Vec<f32>>> {
        if self.finished {
            return Err(Error::InvalidArgument(
                "conditioning stream already finished".into(),
            ));
        }
        if frame.dim() != model.config.n_mels {
            return Err(Error::shape(format!(
                "frame has {} values, model expects {}",
                frame.dim(),
                model.config.n_mels
            )));
        }
        self.input.push(frame.values.clone());
        self.frames_in += 1;
        let mut out = Vec::new();
        let la = model.config.lookahead_frames;
        if self.frames_in > la {
            self.emit(model, self.frames_in - 1 - la, &mut out);
        }
        Ok(out)
    }

    /// Flushes the rows held back for lookahead, treating frames past the
    /// end as zero.
    pub fn finish(&mut self, model: &Vocoder) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        if !self.finished {
            self.finished = true;
            while self.emitted < self.frames_in {
                self.emit(model, self.emitted, &mut out);
            }
        }
        out
    }

    fn emit(&mut self, model: &Vocoder, t: usize, out: &mut Vec<Vec<f32>>) {
        let cfg = &model.config;
        let w = &model.conditioning;
        debug_assert_eq!(t, self.emitted);
        self.emitted += 1;

        let base = (t + cfg.lookahead_frames) as isize;
        let mut row = conv_row(&w.conv_in, |j| self.input.get(base - j as isize));
        for ((layer, hist), &d) in w.dilated.iter().zip(&mut self.dilated).zip(&cfg.dilations) {
            hist.push(row);
            let t = t as isize;
            row = conv_row(layer, |j| hist.get(t - (j * d) as isize));
        }
        let mut level = vec![(t, row)];
        for (layer, hist) in w.upsample.iter().zip(&mut self.upsample) {
            let s = cfg.upsample_stride;
            let mut next = Vec::with_capacity(level.len() * s);
            for (i, r) in level {
                hist.push(r);
                for n in i * s..(i + 1) * s {
                    next.push((n, conv_row(layer, |j| stuffed(hist, n, j, s))));
                }
            }
            level = next;
        }
        for (_, r) in level {
            let mut p = vec![0.0; w.proj.rows()];
            pointwise_step(&w.proj, Some(&w.proj_bias), &r, &mut p);
            out.push(p);
        }
    }
}

fn conv_row<'a>(layer: &ConvLayer, input: impl Fn(usize) -> Option<&'a [f32]>) -> Vec<f32> {
    let mut row = vec![0.0; layer.kernel.c_out()];
    layer.kernel.apply(Some(&layer.bias), &mut row, input);
    row.iter_mut().for_each(|v| *v = v.tanh());
    row
}

/// Streaming twin of the zero-stuffed row lookup in `transpose_conv1d`.
fn stuffed(hist: &RowHistory, n: usize, j: usize, stride: usize) -> Option<&[f32]> {
    if j > n || (n - j) % stride != 0 {
        return None;
    }
    hist.get(((n - j) / stride) as isize)
}
