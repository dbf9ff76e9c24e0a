//! 3 kbps feature codec: KLT decorrelation, split vector quantization to 120
//! bits per frame, and the `NVC1` bitstream container.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureFrame;
use crate::kernels::{LinearOp, Matrix};
use crate::par;
use crate::rng::CounterRng;
use crate::weights::{Tensor, WeightSet};

pub const FRAME_BITS: usize = 120;
pub const BITSTREAM_MAGIC: &[u8; 4] = b"NVC1";
pub const BITSTREAM_VERSION: u8 = 1;
pub const BITSTREAM_HEADER_LEN: usize = 13;
pub const KMEANS_ITERATIONS: usize = 20;

/// Karhunen-Loève basis fitted to training features.
#[derive(Debug, Clone, PartialEq)]
pub struct KltBasis {
    mean: Vec<f32>,
    /// Rows are eigenvectors of the feature covariance, by descending eigenvalue.
    basis: Matrix,
    eigenvalues: Vec<f64>,
}

impl KltBasis {
    pub fn new(mean: Vec<f32>, basis: Matrix) -> Result<Self> {
        let d = mean.len();
        if basis.rows() != d || basis.cols() != d {
            return Err(Error::shape(format!(
                "klt basis is {}x{}, mean has {d} values",
                basis.rows(),
                basis.cols()
            )));
        }
        Ok(Self {
            mean,
            basis,
            eigenvalues: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// Covariance eigenvalues, descending (empty when loaded from weights).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `basis · (x - mean)`.
    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let centered: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .map(|(&a, &m)| a as f64 - m as f64)
            .collect();
        (0..self.dim())
            .map(|r| {
                self.basis
                    .row(r)
                    .iter()
                    .zip(&centered)
                    .map(|(&b, &c)| b as f64 * c)
                    .sum::<f64>() as f32
            })
            .collect()
    }

    /// `basisᵀ · y + mean`.
    pub fn inverse(&self, y: &[f32]) -> Vec<f32> {
        let d = self.dim();
        let mut acc: Vec<f64> = self.mean.iter().map(|&m| m as f64).collect();
        for (r, &coef) in y.iter().enumerate().take(d) {
            for (a, &b) in acc.iter_mut().zip(self.basis.row(r)) {
                *a += b as f64 * coef as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

/// Fits a KLT to `frames`. Needs more frames than dimensions; a rank-deficient
/// covariance is regularized by `1e-6 · trace / d` on the diagonal.
pub fn fit_klt(frames: &[FeatureFrame]) -> Result<KltBasis> {
    let d = frames.first().map_or(0, FeatureFrame::dim);
    if d == 0 {
        return Err(Error::InsufficientData("no frames to fit a KLT".into()));
    }
    if frames.len() <= d {
        return Err(Error::InsufficientData(format!(
            "KLT over {d} dims needs at least {} frames, got {}",
            d + 1,
            frames.len()
        )));
    }
    if let Some(f) = frames.iter().find(|f| f.dim() != d) {
        return Err(Error::shape(format!(
            "frame {} has {} dims, expected {d}",
            f.frame_index,
            f.dim()
        )));
    }
    let n = frames.len() as f64;
    let mut mean = vec![0.0f64; d];
    for f in frames {
        for (m, &v) in mean.iter_mut().zip(&f.values) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut c = vec![0.0f64; d];
    for f in frames {
        for (ci, (&v, &m)) in c.iter_mut().zip(f.values.iter().zip(&mean)) {
            *ci = v as f64 - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let reg = 1e-6 * cov.trace() / d as f64;
    for i in 0..d {
        cov[(i, i)] += reg;
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut data = Vec::with_capacity(d * d);
    for &k in &order {
        let v = eig.eigenvectors.column(k);
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        data.extend((0..d).map(|i| (sign * v[i]) as f32));
    }
    Ok(KltBasis {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        basis: Matrix::new(d, d, data)?,
        eigenvalues: order.iter().map(|&k| eig.eigenvalues[k]).collect(),
    })
}

/// Partition of the transformed frame into sub-vectors and their bit budgets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqLayout {
    pub dims: Vec<usize>,
    pub bits: Vec<u8>,
}

impl Default for VqLayout {
    /// 5 sub-vectors of 10 dims then 10 of 11 dims, 8 bits each: 160 dims,
    /// 120 bits.
    fn default() -> Self {
        let dims = std::iter::repeat_n(10, 5)
            .chain(std::iter::repeat_n(11, 10))
            .collect();
        Self {
            dims,
            bits: vec![8; 15],
        }
    }
}

impl VqLayout {
    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn total_bits(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    /// Start offset of each sub-vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.dims
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() != self.bits.len() {
            return Err(Error::InvalidArgument(
                "vq layout needs matching, non-empty dims and bits".into(),
            ));
        }
        if self.dims.contains(&0) || self.bits.iter().any(|&b| b == 0 || b > 16) {
            return Err(Error::InvalidArgument(
                "vq sub-vectors need dims >= 1 and 1..=16 bits".into(),
            ));
        }
        Ok(())
    }

    /// Serialized as `dim:bits,dim:bits,...`.
    pub fn to_metadata(&self) -> String {
        self.dims
            .iter()
            .zip(&self.bits)
            .map(|(d, b)| format!("{d}:{b}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_metadata(s: &str) -> Result<Self> {
        let mut dims = Vec::new();
        let mut bits = Vec::new();
        for part in s.split(',') {
            let (d, b) = part
                .split_once(':')
                .ok_or_else(|| Error::format("vq layout", format!("bad entry `{part}`")))?;
            dims.push(
                d.trim()
                    .parse()
                    .map_err(|_| Error::format("vq layout", format!("bad dim `{d}`")))?,
            );
            bits.push(
                b.trim()
                    .parse()
                    .map_err(|_| Error::format("vq layout", format!("bad bits `{b}`")))?,
            );
        }
        let layout = Self { dims, bits };
        layout.validate()?;
        Ok(layout)
    }
}

/// One codebook per sub-vector, each `2^bits × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitVqCodebooks {
    layout: VqLayout,
    codebooks: Vec<Matrix>,
}

impl SplitVqCodebooks {
    pub fn new(layout: VqLayout, codebooks: Vec<Matrix>) -> Result<Self> {
        layout.validate()?;
        if codebooks.len() != layout.len() {
            return Err(Error::shape(format!(
                "{} codebooks for {} sub-vectors",
                codebooks.len(),
                layout.len()
            )));
        }
        for (i, (cb, (&d, &b))) in codebooks
            .iter()
            .zip(layout.dims.iter().zip(&layout.bits))
            .enumerate()
        {
            if cb.rows() != 1 << b || cb.cols() != d {
                return Err(Error::shape(format!(
                    "codebook {i} is {}x{}, expected {}x{d}",
                    cb.rows(),
                    cb.cols(),
                    1usize << b
                )));
            }
            if cb.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(Self { layout, codebooks })
    }

    pub fn layout(&self) -> &VqLayout {
        &self.layout
    }

    pub fn codebooks(&self) -> &[Matrix] {
        &self.codebooks
    }
}

/// Concatenated codeword indices for one frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameCode(pub Vec<u32>);

/// Index of the nearest row of `codebook` to `x` (squared error), lowest
/// index on ties.
pub fn nearest_codeword(codebook: &Matrix, x: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for r in 0..codebook.rows() {
        let d: f64 = codebook
            .row(r)
            .iter()
            .zip(x)
            .map(|(&c, &v)| {
                let e = c as f64 - v as f64;
                e * e
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = r;
        }
    }
    best
}

pub fn encode_frame(frame: &FeatureFrame, klt: &KltBasis, cb: &SplitVqCodebooks) -> Result<FrameCode> {
    check_codec(klt, cb)?;
    if frame.dim() != klt.dim() {
        return Err(Error::shape(format!(
            "frame has {} dims, codec expects {}",
            frame.dim(),
            klt.dim()
        )));
    }
    let y = klt.forward(&frame.values);
    let indices = cb
        .layout
        .offsets()
        .iter()
        .zip(&cb.layout.dims)
        .zip(&cb.codebooks)
        .map(|((&o, &d), book)| nearest_codeword(book, &y[o..o + d]) as u32)
        .collect();
    Ok(FrameCode(indices))
}

pub fn decode_frame(
    code: &FrameCode,
    klt: &KltBasis,
    cb: &SplitVqCodebooks,
    frame_index: usize,
) -> Result<FeatureFrame> {
    check_codec(klt, cb)?;
    if code.0.len() != cb.layout.len() {
        return Err(Error::shape(format!(
            "code has {} indices, layout has {} sub-vectors",
            code.0.len(),
            cb.layout.len()
        )));
    }
    let mut y = Vec::with_capacity(klt.dim());
    for (i, (&idx, book)) in code.0.iter().zip(&cb.codebooks).enumerate() {
        if idx as usize >= book.rows() {
            return Err(Error::InvalidArgument(format!(
                "index {idx} out of range for sub-vector {i}"
            )));
        }
        y.extend_from_slice(book.row(idx as usize));
    }
    FeatureFrame::new(klt.inverse(&y), frame_index)
}

fn check_codec(klt: &KltBasis, cb: &SplitVqCodebooks) -> Result<()> {
    if cb.layout.total_dim() != klt.dim() {
        return Err(Error::shape(format!(
            "vq layout covers {} dims, klt has {}",
            cb.layout.total_dim(),
            klt.dim()
        )));
    }
    Ok(())
}

/// Lloyd's k-means with a fixed seed. Initial centroids are `k` distinct
/// points drawn by a seeded shuffle; a cluster left empty is re-seeded with
/// the point farthest from its centroid (each point used at most once per
/// pass).
pub fn kmeans(points: &[Vec<f32>], k: usize, iterations: usize, seed: u64) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let Some(dim) = points.first().map(Vec::len) else {
        return Err(Error::InsufficientData("k-means over no points".into()));
    };
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("k-means points of unequal dimension"));
    }
    let mut rng = CounterRng::new(seed);
    let mut perm: Vec<usize> = (0..points.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.below(i as u64 + 1) as usize);
    }
    let mut centroids: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            // With fewer points than clusters the extra centroids start empty
            // and are filled by the re-seed rule.
            let p = &points[perm[c % points.len()]];
            p.iter().map(|&v| v as f64).collect()
        })
        .collect();

    let dist2 = |p: &[f32], c: &[f64]| -> f64 {
        p.iter()
            .zip(c)
            .map(|(&a, &b)| {
                let e = a as f64 - b;
                e * e
            })
            .sum()
    };
    let assign = |centroids: &[Vec<f64>]| -> Vec<(usize, f64)> {
        par::map_slice(points, |p| {
            let mut best = (0, f64::INFINITY);
            for (i, c) in centroids.iter().enumerate() {
                let d = dist2(p, c);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best
        })
    };

    for _ in 0..iterations {
        let mut assignment = assign(&centroids);
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s / n).collect();
            } else {
                let far = assignment
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .expect("points is non-empty");
                centroids[c] = points[far].iter().map(|&v| v as f64).collect();
                assignment[far].1 = -1.0;
            }
        }
    }
    let data = centroids
        .into_iter()
        .flat_map(|c| c.into_iter().map(|v| v as f32))
        .collect();
    Matrix::new(k, dim, data)
}

/// Trains one codebook per sub-vector on the KLT coefficients of `frames`.
pub fn train_codebooks(
    frames: &[FeatureFrame],
    klt: &KltBasis,
    layout: &VqLayout,
    seed: u64,
) -> Result<SplitVqCodebooks> {
    layout.validate()?;
    if layout.total_dim() != klt.dim() {
        return Err(Error::shape(format!(
            "vq layout covers {} dims, klt has {}",
            layout.total_dim(),
            klt.dim()
        )));
    }
    let coeffs = par::map_slice(frames, |f| klt.forward(&f.values));
    let mut books = Vec::with_capacity(layout.len());
    for (s, (&o, (&d, &b))) in layout
        .offsets()
        .iter()
        .zip(layout.dims.iter().zip(&layout.bits))
        .enumerate()
    {
        let pts: Vec<Vec<f32>> = coeffs.iter().map(|y| y[o..o + d].to_vec()).collect();
        books.push(kmeans(
            &pts,
            1 << b,
            KMEANS_ITERATIONS,
            seed.wrapping_add(s as u64),
        )?);
    }
    SplitVqCodebooks::new(layout.clone(), books)
}

/// KLT plus codebooks: the complete feature codec.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCodec {
    pub klt: KltBasis,
    pub codebooks: SplitVqCodebooks,
}

impl FeatureCodec {
    pub fn new(klt: KltBasis, codebooks: SplitVqCodebooks) -> Result<Self> {
        check_codec(&klt, &codebooks)?;
        Ok(Self { klt, codebooks })
    }

    pub fn train(frames: &[FeatureFrame], layout: &VqLayout, seed: u64) -> Result<Self> {
        let klt = fit_klt(frames)?;
        let codebooks = train_codebooks(frames, &klt, layout, seed)?;
        Self::new(klt, codebooks)
    }

    pub fn layout(&self) -> &VqLayout {
        &self.codebooks.layout
    }

    pub fn encode(&self, frames: &[FeatureFrame]) -> Result<Vec<FrameCode>> {
        par::map_slice(frames, |f| encode_frame(f, &self.klt, &self.codebooks))
            .into_iter()
            .collect()
    }

    pub fn decode(&self, codes: &[FrameCode]) -> Result<Vec<FeatureFrame>> {
        par::map_range(codes.len(), |i| {
            decode_frame(&codes[i], &self.klt, &self.codebooks, i)
        })
        .into_iter()
        .collect()
    }

    /// Stores the codec as `klt.mean`, `klt.basis`, `vq.codebook{i}` and the
    /// `vq.layout` metadata key.
    pub fn to_weights(&self) -> WeightSet {
        let mut set = WeightSet::new();
        set.insert("klt.mean", Tensor::vector(self.klt.mean.clone()));
        set.insert_op("klt.basis", &LinearOp::Dense(self.klt.basis.clone()));
        for (i, cb) in self.codebooks.codebooks.iter().enumerate() {
            set.insert_op(format!("vq.codebook{i}"), &LinearOp::Dense(cb.clone()));
        }
        set.set_meta("vq.layout", self.layout().to_metadata());
        set
    }

    pub fn from_weights(set: &WeightSet) -> Result<Self> {
        let layout = match set.meta("vq.layout") {
            Some(s) => VqLayout::from_metadata(s)?,
            None => VqLayout::default(),
        };
        let d = layout.total_dim();
        let klt = KltBasis::new(set.vector("klt.mean", d)?, set.matrix("klt.basis", d, d)?)?;
        let books = layout
            .dims
            .iter()
            .zip(&layout.bits)
            .enumerate()
            .map(|(i, (&dim, &bits))| set.matrix(&format!("vq.codebook{i}"), 1 << bits, dim))
            .collect::<Result<_>>()?;
        Self::new(klt, SplitVqCodebooks::new(layout, books)?)
    }
}

/// `NVC1` coded stream: 13-byte header plus frames packed MSB-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub frame_bits: u16,
    pub frame_rate_hz: u16,
    pub n_frames: u32,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn payload_bits(&self) -> usize {
        self.n_frames as usize * self.frame_bits as usize
    }

    pub fn duration_secs(&self) -> f64 {
        self.n_frames as f64 / self.frame_rate_hz as f64
    }

    /// Payload bits per second of audio.
    pub fn bitrate_bps(&self) -> f64 {
        self.frame_bits as f64 * self.frame_rate_hz as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BITSTREAM_HEADER_LEN + self.payload.len());
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.push(BITSTREAM_VERSION);
        out.extend_from_slice(&self.frame_bits.to_le_bytes());
        out.extend_from_slice(&self.frame_rate_hz.to_le_bytes());
        out.extend_from_slice(&self.n_frames.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BITSTREAM_HEADER_LEN {
            return Err(Error::format("bitstream", "truncated header"));
        }
        if &bytes[..4] != BITSTREAM_MAGIC {
            return Err(Error::format("bitstream", "bad magic"));
        }
        if bytes[4] != BITSTREAM_VERSION {
            return Err(Error::format(
                "bitstream",
                format!("unsupported version {}", bytes[4]),
            ));
        }
        let frame_bits = u16::from_le_bytes([bytes[5], bytes[6]]);
        let frame_rate_hz = u16::from_le_bytes([bytes[7], bytes[8]]);
        let n_frames = u32::from_le_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]);
        let bs = Self {
            frame_bits,
            frame_rate_hz,
            n_frames,
            payload: bytes[BITSTREAM_HEADER_LEN..].to_vec(),
        };
        let need = bs.payload_bits().div_ceil(8);
        if bs.payload.len() < need {
            return Err(Error::format(
                "bitstream",
                format!("truncated payload: {} of {need} bytes", bs.payload.len()),
            ));
        }
        if bs.payload.len() > need {
            return Err(Error::format("bitstream", "trailing bytes after payload"));
        }
        Ok(bs)
    }
}

pub fn pack_bitstream(codes: &[FrameCode], layout: &VqLayout, frame_rate_hz: u16) -> Result<Bitstream> {
    layout.validate()?;
    let frame_bits = layout.total_bits();
    let mut w = BitWriter::default();
    for (i, code) in codes.iter().enumerate() {
        if code.0.len() != layout.len() {
            return Err(Error::shape(format!(
                "code {i} has {} indices, layout has {}",
                code.0.len(),
                layout.len()
            )));
        }
        for (&idx, &b) in code.0.iter().zip(&layout.bits) {
            if idx >> b != 0 {
                return Err(Error::InvalidArgument(format!(
                    "index {idx} does not fit in {b} bits"
                )));
            }
            w.put(idx, b);
        }
    }
    Ok(Bitstream {
        frame_bits: frame_bits as u16,
        frame_rate_hz,
        n_frames: codes.len() as u32,
        payload: w.finish(),
    })
}

pub fn unpack_bitstream(stream: &Bitstream, layout: &VqLayout) -> Result<Vec<FrameCode>> {
    layout.validate()?;
    if stream.frame_bits as usize != layout.total_bits() {
        return Err(Error::format(
            "bitstream",
            format!(
                "{} bits per frame, codec uses {}",
                stream.frame_bits,
                layout.total_bits()
            ),
        ));
    }
    if stream.payload.len() < stream.payload_bits().div_ceil(8) {
        return Err(Error::format("bitstream", "truncated payload"));
    }
    let mut r = BitReader::new(&stream.payload);
    Ok((0..stream.n_frames)
        .map(|_| FrameCode(layout.bits.iter().map(|&b| r.get(b)).collect()))
        .collect())
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    used: u8,
}

impl BitWriter {
    fn put(&mut self, value: u32, bits: u8) {
        for k in (0..bits).rev() {
            if self.used == 0 {
                self.bytes.push(0);
            }
            let bit = ((value >> k) & 1) as u8;
            *self.bytes.last_mut().expect("pushed above") |= bit << (7 - self.used);
            self.used = (self.used + 1) % 8;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn get(&mut self, bits: u8) -> u32 {
        let mut v = 0u32;
        for _ in 0..bits {
            let bit = (self.bytes[self.pos / 8] >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | bit as u32;
            self.pos += 1;
        }
        v
    }
}
