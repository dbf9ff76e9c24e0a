//! `NVW1` tensor container shared by model weights and golden test vectors.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "NVW1" | version u8 | tensor count u32
//! per tensor:
//!   name: u16 length + UTF-8 | dtype u8 (0 = f32) | rank u8 | dims u32 × rank
//!   sparsity u8: 0 dense
//!                1 block 4×4: block count u32, then that many u32 linear block
//!                  indices (block_row · cols/4 + block_col)
//!                2 block-diagonal: block count u32
//!   data: f32 × (product of dims | 16 × blocks | blocks × (dim/blocks)²)
//! metadata: entry count u32, then key (u16 length + UTF-8) and
//!           value (u32 length + UTF-8) per entry
//! ```
//!
//! Tensors and metadata are kept sorted by name so a given set always
//! serializes to the same bytes.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{
    BlockDiagonalMatrix, BlockSparseMatrix, ConvKernel, DepthwiseKernel, LinearOp, Matrix, BLOCK,
};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NVW1";
pub const WEIGHTS_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Storage {
    Dense,
    BlockSparse { block_indices: Vec<u32> },
    BlockDiagonal { n_blocks: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
    data: Vec<f32>,
}

impl Tensor {
    pub fn dense(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "tensor {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            storage: Storage::Dense,
            data,
        })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            storage: Storage::Dense,
            data,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self::vector(vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Stored values (packed blocks for sparse storage).
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sparsity(&self) -> f64 {
        match &self.storage {
            Storage::Dense => 0.0,
            _ if self.numel() == 0 => 0.0,
            _ => 1.0 - self.data.len() as f64 / self.numel() as f64,
        }
    }

    fn stored_len(shape: &[usize], storage: &Storage) -> Result<usize> {
        match storage {
            Storage::Dense => Ok(shape.iter().product()),
            Storage::BlockSparse { block_indices } => {
                let [r, c] = shape else {
                    return Err(Error::shape("block-sparse tensor must be rank 2"));
                };
                if r % BLOCK != 0 || c % BLOCK != 0 {
                    return Err(Error::shape("block-sparse dims not divisible by 4"));
                }
                Ok(block_indices.len() * BLOCK * BLOCK)
            }
            Storage::BlockDiagonal { n_blocks } => {
                let [r, c] = shape else {
                    return Err(Error::shape("block-diagonal tensor must be rank 2"));
                };
                let n = *n_blocks as usize;
                if r != c || n == 0 || r % n != 0 {
                    return Err(Error::shape("block-diagonal tensor must be square and divisible"));
                }
                Ok(n * (r / n) * (r / n))
            }
        }
    }
}

impl From<&LinearOp> for Tensor {
    fn from(op: &LinearOp) -> Self {
        match op {
            LinearOp::Dense(m) => Tensor {
                shape: vec![m.rows(), m.cols()],
                storage: Storage::Dense,
                data: m.data().to_vec(),
            },
            LinearOp::BlockSparse(m) => Tensor {
                shape: vec![m.rows(), m.cols()],
                storage: Storage::BlockSparse {
                    block_indices: m.block_indices().into_iter().map(|i| i as u32).collect(),
                },
                data: m.block_data().to_vec(),
            },
            LinearOp::BlockDiagonal(m) => Tensor {
                shape: vec![m.dim(), m.dim()],
                storage: Storage::BlockDiagonal {
                    n_blocks: m.n_blocks() as u32,
                },
                data: m.data().to_vec(),
            },
        }
    }
}

impl From<&ConvKernel> for Tensor {
    fn from(k: &ConvKernel) -> Self {
        Tensor {
            shape: vec![k.c_out(), k.c_in(), k.width()],
            storage: Storage::Dense,
            data: k.to_data(),
        }
    }
}

impl From<&DepthwiseKernel> for Tensor {
    fn from(k: &DepthwiseKernel) -> Self {
        Tensor {
            shape: vec![k.channels(), k.width()],
            storage: Storage::Dense,
            data: k.data().to_vec(),
        }
    }
}

/// Named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightSet {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_op(&mut self, name: impl Into<String>, op: &LinearOp) {
        self.insert(name, Tensor::from(op));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> impl Iterator<Item = (&str, &str)> {
        self.metadata.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copies every tensor and metadata entry of `other` into `self`.
    pub fn merge(&mut self, other: WeightSet) {
        self.tensors.extend(other.tensors);
        self.metadata.extend(other.metadata);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    fn expect_shape(&self, name: &str, expected: &[usize]) -> Result<&Tensor> {
        let t = self.tensor(name)?;
        if t.shape != expected {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: expected.to_vec(),
                actual: t.shape.clone(),
            });
        }
        Ok(t)
    }

    fn expect_dense(&self, name: &str, expected: &[usize]) -> Result<&Tensor> {
        let t = self.expect_shape(name, expected)?;
        if t.storage != Storage::Dense {
            return Err(Error::format("weights", format!("tensor `{name}` must be dense")));
        }
        Ok(t)
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        Ok(self.expect_dense(name, &[len])?.data.clone())
    }

    /// A `rows × cols` weight matrix in whatever storage it was saved with.
    pub fn linear(&self, name: &str, rows: usize, cols: usize) -> Result<LinearOp> {
        let t = self.expect_shape(name, &[rows, cols])?;
        let wrap = |e: Error| Error::format("weights", format!("tensor `{name}`: {e}"));
        Ok(match &t.storage {
            Storage::Dense => LinearOp::Dense(Matrix::new(rows, cols, t.data.clone()).map_err(wrap)?),
            Storage::BlockSparse { block_indices } => {
                let blocks = block_indices
                    .iter()
                    .zip(t.data.chunks_exact(BLOCK * BLOCK))
                    .map(|(&i, b)| (i as usize, b.try_into().expect("16-value chunk")))
                    .collect();
                LinearOp::BlockSparse(BlockSparseMatrix::from_blocks(rows, cols, blocks).map_err(wrap)?)
            }
            Storage::BlockDiagonal { n_blocks } => LinearOp::BlockDiagonal(
                BlockDiagonalMatrix::new(rows, *n_blocks as usize, t.data.clone()).map_err(wrap)?,
            ),
        })
    }

    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let t = self.expect_dense(name, &[rows, cols])?;
        Matrix::new(rows, cols, t.data.clone())
    }

    pub fn conv(&self, name: &str, c_out: usize, c_in: usize, width: usize) -> Result<ConvKernel> {
        let t = self.expect_dense(name, &[c_out, c_in, width])?;
        ConvKernel::new(c_out, c_in, width, &t.data)
    }

    pub fn depthwise(&self, name: &str, channels: usize, width: usize) -> Result<DepthwiseKernel> {
        let t = self.expect_dense(name, &[channels, width])?;
        DepthwiseKernel::new(channels, width, t.data.clone())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::MissingMetadata(key.to_string()))?;
        raw.trim()
            .parse()
            .map_err(|_| Error::format("weights metadata", format!("`{key}` = `{raw}`")))
    }

    pub fn meta_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        if self.meta(key).is_none() {
            return Ok(default);
        }
        self.meta_parse(key)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.push(WEIGHTS_VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str16(&mut out, name);
            out.push(0); // f32
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.storage {
                Storage::Dense => out.push(0),
                Storage::BlockSparse { block_indices } => {
                    out.push(1);
                    out.extend_from_slice(&(block_indices.len() as u32).to_le_bytes());
                    for &i in block_indices {
                        out.extend_from_slice(&i.to_le_bytes());
                    }
                }
                Storage::BlockDiagonal { n_blocks } => {
                    out.push(2);
                    out.extend_from_slice(&n_blocks.to_le_bytes());
                }
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str16(&mut out, k);
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::format("weights", "bad magic"));
        }
        let version = r.u8()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::format("weights", format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut set = WeightSet::new();
        for _ in 0..count {
            let name = r.str16()?;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(Error::format("weights", format!("`{name}`: unknown dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let storage = match r.u8()? {
                0 => Storage::Dense,
                1 => {
                    let n = r.u32()? as usize;
                    let block_indices = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
                    Storage::BlockSparse { block_indices }
                }
                2 => Storage::BlockDiagonal { n_blocks: r.u32()? },
                tag => {
                    return Err(Error::format(
                        "weights",
                        format!("`{name}`: unknown sparsity tag {tag}"),
                    ))
                }
            };
            let len = Tensor::stored_len(&shape, &storage)
                .map_err(|e| Error::format("weights", format!("`{name}`: {e}")))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::format("weights", "overflow"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            set.tensors.insert(
                name,
                Tensor {
                    shape,
                    storage,
                    data,
                },
            );
        }
        let n_meta = r.u32()?;
        for _ in 0..n_meta {
            let k = r.str16()?;
            let len = r.u32()? as usize;
            let v = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("weights", "metadata value is not UTF-8"))?;
            set.metadata.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("weights", "trailing bytes"));
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("weights", "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("weights", "name is not UTF-8"))
    }
}

/// A golden input/output case stored in an `NVW1` file: tensors named
/// `in.*` and `out.*`, tolerance in the `tolerance` metadata entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenCase {
    pub name: String,
    pub inputs: BTreeMap<String, Tensor>,
    pub outputs: BTreeMap<String, Tensor>,
    pub tolerance: f64,
}

impl GoldenCase {
    pub fn from_weights(set: &WeightSet) -> Result<Self> {
        let pick = |prefix: &str| -> BTreeMap<String, Tensor> {
            set.tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        Ok(Self {
            name: set.meta("name").unwrap_or_default().to_string(),
            inputs: pick("in."),
            outputs: pick("out."),
            tolerance: set.meta_parse("tolerance")?,
        })
    }

    pub fn to_weights(&self) -> WeightSet {
        let mut set = WeightSet::new();
        for (k, v) in &self.inputs {
            set.insert(format!("in.{k}"), v.clone());
        }
        for (k, v) in &self.outputs {
            set.insert(format!("out.{k}"), v.clone());
        }
        set.set_meta("name", &self.name);
        set.set_meta("tolerance", self.tolerance);
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::magnitude_prune;

    fn sample_set() -> WeightSet {
        let mut s = WeightSet::new();
        s.insert("a.vec", Tensor::vector(vec![1.0, -2.5, 3.25]));
        let dense = Matrix::from_fn(8, 8, |r, c| (r * 8 + c) as f32 * 0.1 - 3.0);
        s.insert_op("b.sparse", &LinearOp::BlockSparse(magnitude_prune(&dense, 0.5).unwrap()));
        s.insert_op(
            "c.diag",
            &LinearOp::BlockDiagonal(BlockDiagonalMatrix::from_dense(&dense, 4).unwrap()),
        );
        s.insert("d.conv", Tensor::from(&ConvKernel::identity(2, 3)));
        s.set_meta("mel.n_mels", 160);
        s.set_meta("vq.layout", "10:8,11:8");
        s
    }

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let s = sample_set();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"NVW1");
        let back = WeightSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn typed_accessors() {
        let s = sample_set();
        let op = s.linear("b.sparse", 8, 8).unwrap();
        assert!((op.sparsity() - 0.5).abs() < 1e-12);
        let diag = s.linear("c.diag", 8, 8).unwrap();
        assert_eq!(diag.sparsity(), 0.75);
        assert_eq!(s.tensor("c.diag").unwrap().sparsity(), 0.75);
        assert_eq!(s.conv("d.conv", 2, 2, 3).unwrap(), ConvKernel::identity(2, 3));
        assert_eq!(s.meta_parse::<usize>("mel.n_mels").unwrap(), 160);
        assert_eq!(s.meta_or("missing", 7u32).unwrap(), 7);
    }

    #[test]
    fn errors_name_the_tensor() {
        let s = sample_set();
        match s.vector("nope", 3) {
            Err(Error::MissingTensor(n)) => assert_eq!(n, "nope"),
            other => panic!("{other:?}"),
        }
        match s.vector("a.vec", 4) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "a.vec"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(s.meta_parse::<u32>("x"), Err(Error::MissingMetadata(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample_set().to_bytes();
        let mut bad = bytes.clone();
        bad[3] = b'0';
        assert!(WeightSet::from_bytes(&bad).is_err());
        assert!(WeightSet::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(WeightSet::from_bytes(&extra).is_err());
    }

    #[test]
    fn golden_case_round_trip() {
        let mut g = GoldenCase {
            name: "conv1d.random.0".into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            tolerance: 1e-5,
        };
        g.inputs.insert("x".into(), Tensor::vector(vec![1.0, 2.0]));
        g.outputs.insert("y".into(), Tensor::vector(vec![3.0]));
        let bytes = g.to_weights().to_bytes();
        let back = GoldenCase::from_weights(&WeightSet::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
