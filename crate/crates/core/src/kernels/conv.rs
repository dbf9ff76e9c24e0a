use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::matrix::{LinearOp, Matrix};
use crate::error::{Error, Result};
use crate::par;

/// A `steps × channels` sequence, row-major (one row per time step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    steps: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Sequence {
    pub fn new(steps: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != steps * channels {
            return Err(Error::shape(format!(
                "{steps}x{channels} sequence needs {} values, got {}",
                steps * channels,
                data.len()
            )));
        }
        Ok(Self {
            steps,
            channels,
            data,
        })
    }

    pub fn zeros(steps: usize, channels: usize) -> Self {
        Self {
            steps,
            channels,
            data: vec![0.0; steps * channels],
        }
    }

    pub fn from_rows(channels: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * channels);
        for (t, r) in rows.iter().enumerate() {
            if r.len() != channels {
                return Err(Error::shape(format!(
                    "row {t} has {} channels, expected {channels}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), channels, data)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
    }

    /// Row at a signed time index, `None` outside `[0, steps)`.
    #[inline]
    pub fn get_row(&self, t: isize) -> Option<&[f32]> {
        (t >= 0 && (t as usize) < self.steps).then(|| self.row(t as usize))
    }

    pub fn map_in_place(&mut self, f: impl Fn(f32) -> f32) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }
}

/// Convolution kernel with `width` taps, each a `c_out × c_in` matrix.
///
/// Tap `j` weighs the input `j · dilation` steps before the aligned position,
/// so `[w0, w1]` computes `w0·x[t] + w1·x[t - d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    c_out: usize,
    c_in: usize,
    taps: Vec<Matrix>,
}

impl ConvKernel {
    /// From `(c_out, c_in, width)` row-major data.
    pub fn new(c_out: usize, c_in: usize, width: usize, data: &[f32]) -> Result<Self> {
        if width == 0 || data.len() != c_out * c_in * width {
            return Err(Error::shape(format!(
                "conv kernel ({c_out}, {c_in}, {width}) needs {} values, got {}",
                c_out * c_in * width,
                data.len()
            )));
        }
        let taps = (0..width)
            .map(|j| Matrix::from_fn(c_out, c_in, |o, i| data[(o * c_in + i) * width + j]))
            .collect();
        Ok(Self { c_out, c_in, taps })
    }

    /// Same-tap identity: channel `i` → channel `i` with weight 1 at tap 0.
    pub fn identity(channels: usize, width: usize) -> Self {
        let mut data = vec![0.0; channels * channels * width];
        for c in 0..channels {
            data[(c * channels + c) * width] = 1.0;
        }
        Self::new(channels, channels, width, &data).expect("consistent shape")
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn width(&self) -> usize {
        self.taps.len()
    }

    /// Back to `(c_out, c_in, width)` row-major.
    pub fn to_data(&self) -> Vec<f32> {
        let w = self.width();
        let mut out = vec![0.0; self.c_out * self.c_in * w];
        for (j, tap) in self.taps.iter().enumerate() {
            for o in 0..self.c_out {
                for i in 0..self.c_in {
                    out[(o * self.c_in + i) * w + j] = tap.get(o, i);
                }
            }
        }
        out
    }

    /// `out = bias + Σ_j tap_j · input(j)`, skipping taps whose input is
    /// `None` (zero padding). Shared by the batch and streaming paths so both
    /// produce bit-identical results.
    #[inline]
    pub fn apply<'a>(
        &self,
        bias: Option<&[f32]>,
        out: &mut [f32],
        input: impl Fn(usize) -> Option<&'a [f32]>,
    ) {
        match bias {
            Some(b) => out.copy_from_slice(b),
            None => out.fill(0.0),
        }
        for (j, tap) in self.taps.iter().enumerate() {
            if let Some(x) = input(j) {
                tap.matvec_add_unchecked(x, out);
            }
        }
    }

    fn check(&self, input: &Sequence, bias: Option<&[f32]>) -> Result<()> {
        if input.channels != self.c_in {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.c_in, input.channels
            )));
        }
        if let Some(b) = bias {
            if b.len() != self.c_out {
                return Err(Error::shape(format!(
                    "conv bias has {} values, expected {}",
                    b.len(),
                    self.c_out
                )));
            }
        }
        Ok(())
    }
}

/// Per-channel kernel: `channels × width`, same tap convention as [`ConvKernel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthwiseKernel {
    channels: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthwiseKernel {
    pub fn new(channels: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || data.len() != channels * width {
            return Err(Error::shape(format!(
                "depthwise kernel ({channels}, {width}) needs {} values, got {}",
                channels * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn apply<'a>(
        &self,
        bias: Option<&[f32]>,
        out: &mut [f32],
        input: impl Fn(usize) -> Option<&'a [f32]>,
    ) {
        match bias {
            Some(b) => out.copy_from_slice(b),
            None => out.fill(0.0),
        }
        for j in 0..self.width {
            if let Some(x) = input(j) {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += self.data[c * self.width + j] * x[c];
                }
            }
        }
    }
}

/// Dilated 1-D convolution. Output step `t` aligns tap 0 with input
/// `t + lookahead`, so `lookahead = 0` is causal. Length is preserved; inputs
/// outside the sequence are zero.
pub fn conv1d(
    input: &Sequence,
    kernel: &ConvKernel,
    bias: Option<&[f32]>,
    dilation: usize,
    lookahead: usize,
) -> Result<Sequence> {
    kernel.check(input, bias)?;
    if dilation == 0 {
        return Err(Error::InvalidArgument("dilation must be >= 1".into()));
    }
    let mut out = Sequence::zeros(input.steps, kernel.c_out);
    if kernel.c_out == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(&mut out.data, kernel.c_out, |t, row| {
        let base = (t + lookahead) as isize;
        kernel.apply(bias, row, |j| input.get_row(base - (j * dilation) as isize));
    });
    Ok(out)
}

/// Transposed convolution: zero-stuff the input by `stride` (input `t` lands
/// at `stride·t`), then apply a causal convolution with `kernel`. Output
/// length is `stride · steps`.
pub fn transpose_conv1d(
    input: &Sequence,
    kernel: &ConvKernel,
    bias: Option<&[f32]>,
    stride: usize,
) -> Result<Sequence> {
    kernel.check(input, bias)?;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let mut out = Sequence::zeros(input.steps * stride, kernel.c_out);
    if kernel.c_out == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(&mut out.data, kernel.c_out, |n, row| {
        kernel.apply(bias, row, |j| stuffed_row(input, n, j, stride));
    });
    Ok(out)
}

/// Input row feeding tap `j` at output `n` of a zero-stuffed sequence.
#[inline]
pub(crate) fn stuffed_row(input: &Sequence, n: usize, j: usize, stride: usize) -> Option<&[f32]> {
    if j > n || (n - j) % stride != 0 {
        return None;
    }
    input.get_row(((n - j) / stride) as isize)
}

/// Depthwise dilated convolution; channel `c` of the output reads only
/// channel `c` of the input.
pub fn depthwise_conv1d(
    input: &Sequence,
    kernel: &DepthwiseKernel,
    bias: Option<&[f32]>,
    dilation: usize,
    lookahead: usize,
) -> Result<Sequence> {
    if input.channels != kernel.channels {
        return Err(Error::shape(format!(
            "depthwise conv expects {} channels, got {}",
            kernel.channels, input.channels
        )));
    }
    if bias.is_some_and(|b| b.len() != kernel.channels) {
        return Err(Error::shape("depthwise bias length"));
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument("dilation must be >= 1".into()));
    }
    let mut out = Sequence::zeros(input.steps, kernel.channels);
    if kernel.channels == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(&mut out.data, kernel.channels, |t, row| {
        let base = (t + lookahead) as isize;
        kernel.apply(bias, row, |j| input.get_row(base - (j * dilation) as isize));
    });
    Ok(out)
}

/// Kernel-size-1 convolution: `op` applied independently at every step.
pub fn pointwise(input: &Sequence, op: &LinearOp, bias: Option<&[f32]>) -> Result<Sequence> {
    if input.channels != op.cols() {
        return Err(Error::shape(format!(
            "pointwise conv expects {} channels, got {}",
            op.cols(),
            input.channels
        )));
    }
    if bias.is_some_and(|b| b.len() != op.rows()) {
        return Err(Error::shape("pointwise bias length"));
    }
    let c_out = op.rows();
    let mut out = Sequence::zeros(input.steps, c_out);
    if c_out == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(&mut out.data, c_out, |t, row| {
        pointwise_step(op, bias, input.row(t), row);
    });
    Ok(out)
}

#[inline]
pub(crate) fn pointwise_step(op: &LinearOp, bias: Option<&[f32]>, x: &[f32], out: &mut [f32]) {
    match bias {
        Some(b) => out.copy_from_slice(b),
        None => out.fill(0.0),
    }
    op.matvec_add_unchecked(x, out);
}

/// The trailing rows of a layer's input, indexed by absolute position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct RowHistory {
    /// Absolute index of `rows[0]`.
    start: usize,
    keep: usize,
    rows: VecDeque<Vec<f32>>,
}

impl RowHistory {
    pub(crate) fn new(keep: usize) -> Self {
        Self {
            start: 0,
            keep: keep.max(1),
            rows: VecDeque::new(),
        }
    }

    pub(crate) fn end(&self) -> usize {
        self.start + self.rows.len()
    }

    pub(crate) fn push(&mut self, row: Vec<f32>) {
        self.rows.push_back(row);
        if self.rows.len() > self.keep {
            self.rows.pop_front();
            self.start += 1;
        }
    }

    /// Row at absolute index `t`; `None` before the start of the signal or
    /// past the rows seen so far (both are zero padding).
    pub(crate) fn get(&self, t: isize) -> Option<&[f32]> {
        if t < 0 {
            return None;
        }
        let t = t as usize;
        debug_assert!(t + self.keep >= self.end(), "history row {t} evicted");
        if t < self.start || t >= self.end() {
            return None;
        }
        Some(&self.rows[t - self.start])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(steps: usize, channels: usize) -> Sequence {
        Sequence::new(
            steps,
            channels,
            (0..steps * channels).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn width_one_identity() {
        let x = seq(9, 3);
        let y = conv1d(&x, &ConvKernel::identity(3, 1), None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn causal_pure_delay() {
        let x = seq(12, 2);
        // per-channel [0, 1] with dilation 4: y[t] = x[t - 4]
        let mut data = vec![0.0; 2 * 2 * 2];
        data[1] = 1.0; // (o 0, i 0, tap 1)
        data[7] = 1.0; // (o 1, i 1, tap 1)
        let k = ConvKernel::new(2, 2, 2, &data).unwrap();
        let y = conv1d(&x, &k, None, 4, 0).unwrap();
        for t in 0..12 {
            if t < 4 {
                assert_eq!(y.row(t), &[0.0, 0.0]);
            } else {
                assert_eq!(y.row(t), x.row(t - 4));
            }
        }
    }

    #[test]
    fn lookahead_shifts_forward() {
        let x = seq(6, 1);
        let y = conv1d(&x, &ConvKernel::identity(1, 1), None, 1, 2).unwrap();
        assert_eq!(y.row(0), x.row(2));
        assert_eq!(y.row(4), &[0.0]);
    }

    #[test]
    fn transpose_impulse_copies_kernel() {
        let mut x = Sequence::zeros(5, 1);
        x.row_mut(0)[0] = 1.0;
        let k = ConvKernel::new(1, 1, 4, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = transpose_conv1d(&x, &k, None, 2).unwrap();
        assert_eq!(y.steps(), 10);
        assert_eq!(&y.data()[..4], &[0.1, 0.2, 0.3, 0.4]);
        assert!(y.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_identity_and_delay() {
        let x = seq(8, 3);
        let id = DepthwiseKernel::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(depthwise_conv1d(&x, &id, None, 3, 0).unwrap(), x);
        // channel c delayed by c steps
        let mut d = vec![0.0; 3 * 3];
        for c in 0..3 {
            d[c * 3 + c] = 1.0;
        }
        let k = DepthwiseKernel::new(3, 3, d).unwrap();
        let y = depthwise_conv1d(&x, &k, None, 1, 0).unwrap();
        for t in 0..8 {
            for c in 0..3 {
                let want = if t >= c { x.row(t - c)[c] } else { 0.0 };
                assert_eq!(y.row(t)[c], want);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let x = seq(4, 3);
        let k = ConvKernel::identity(2, 1);
        assert!(conv1d(&x, &k, None, 1, 0).is_err());
        assert!(conv1d(&x, &ConvKernel::identity(3, 1), Some(&[0.0]), 1, 0).is_err());
        assert!(conv1d(&x, &ConvKernel::identity(3, 1), None, 0, 0).is_err());
        assert!(transpose_conv1d(&x, &k, None, 2).is_err());
        let dk = DepthwiseKernel::new(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(depthwise_conv1d(&x, &dk, None, 1, 0).is_err());
        assert!(ConvKernel::new(2, 2, 2, &[0.0; 7]).is_err());
        assert!(pointwise(&x, &LinearOp::Dense(Matrix::zeros(2, 2)), None).is_err());
    }

    #[test]
    fn kernel_layout_round_trip() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32).collect();
        let k = ConvKernel::new(2, 3, 4, &data).unwrap();
        assert_eq!(k.to_data(), data);
    }
}
