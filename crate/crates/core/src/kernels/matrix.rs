use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Edge length of the square blocks used by structured sparsity.
pub const BLOCK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// `y += self · x` without dimension checks.
    #[inline]
    pub(crate) fn matvec_add_unchecked(&self, x: &[f32], y: &mut [f32]) {
        for (yr, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *yr += dot(row, x);
        }
    }
}

/// Dot product with eight independent accumulators (vectorizes well).
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (pa, pb) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for k in chunks * 8..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Matrix stored as surviving 4×4 blocks, grouped by block row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSparseMatrix {
    rows: usize,
    cols: usize,
    /// `row_ptr[br]..row_ptr[br + 1]` indexes the blocks of block row `br`.
    row_ptr: Vec<usize>,
    block_cols: Vec<usize>,
    /// 16 values per block, row-major inside the block.
    data: Vec<f32>,
}

impl BlockSparseMatrix {
    /// Builds from `(linear block index, block values)` pairs, where the
    /// linear index is `block_row * (cols / 4) + block_col`.
    pub fn from_blocks(
        rows: usize,
        cols: usize,
        mut blocks: Vec<(usize, [f32; BLOCK * BLOCK])>,
    ) -> Result<Self> {
        if rows % BLOCK != 0 || cols % BLOCK != 0 {
            return Err(Error::shape(format!(
                "{rows}x{cols} is not divisible into {BLOCK}x{BLOCK} blocks"
            )));
        }
        let (brs, bcs) = (rows / BLOCK, cols / BLOCK);
        blocks.sort_by_key(|(i, _)| *i);
        if blocks.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::shape("duplicate block index"));
        }
        if let Some((i, _)) = blocks.iter().find(|(i, _)| *i >= brs * bcs) {
            return Err(Error::shape(format!("block index {i} out of range")));
        }
        let mut row_ptr = vec![0; brs + 1];
        for (i, _) in &blocks {
            row_ptr[i / bcs + 1] += 1;
        }
        for br in 0..brs {
            row_ptr[br + 1] += row_ptr[br];
        }
        let block_cols = blocks.iter().map(|(i, _)| i % bcs).collect();
        let data = blocks.iter().flat_map(|(_, b)| b.iter().copied()).collect();
        Ok(Self {
            rows,
            cols,
            row_ptr,
            block_cols,
            data,
        })
    }

    /// Keeps the blocks of `dense` whose linear index is in `keep`.
    pub fn from_dense_blocks(dense: &Matrix, keep: &[usize]) -> Result<Self> {
        let bcs = dense.cols / BLOCK;
        let blocks = keep
            .iter()
            .map(|&i| {
                let (br, bc) = (i / bcs.max(1), i % bcs.max(1));
                let mut b = [0.0; BLOCK * BLOCK];
                for r in 0..BLOCK {
                    for c in 0..BLOCK {
                        b[r * BLOCK + c] = dense.get(br * BLOCK + r, bc * BLOCK + c);
                    }
                }
                (i, b)
            })
            .collect();
        Self::from_blocks(dense.rows, dense.cols, blocks)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_blocks(&self) -> usize {
        self.block_cols.len()
    }

    pub fn total_blocks(&self) -> usize {
        (self.rows / BLOCK) * (self.cols / BLOCK)
    }

    /// Linear indices of the stored blocks, ascending.
    pub fn block_indices(&self) -> Vec<usize> {
        let bcs = self.cols / BLOCK;
        (0..self.rows / BLOCK)
            .flat_map(|br| {
                (self.row_ptr[br]..self.row_ptr[br + 1]).map(move |k| (br, k))
            })
            .map(|(br, k)| br * bcs + self.block_cols[k])
            .collect()
    }

    pub fn block_data(&self) -> &[f32] {
        &self.data
    }

    pub fn sparsity(&self) -> f64 {
        if self.rows * self.cols == 0 {
            return 0.0;
        }
        1.0 - (self.n_blocks() * BLOCK * BLOCK) as f64 / (self.rows * self.cols) as f64
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for br in 0..self.rows / BLOCK {
            for k in self.row_ptr[br]..self.row_ptr[br + 1] {
                let bc = self.block_cols[k];
                let b = &self.data[k * 16..k * 16 + 16];
                for r in 0..BLOCK {
                    for c in 0..BLOCK {
                        m.data[(br * BLOCK + r) * self.cols + bc * BLOCK + c] = b[r * BLOCK + c];
                    }
                }
            }
        }
        m
    }

    #[inline]
    fn matvec_add_unchecked(&self, x: &[f32], y: &mut [f32]) {
        for (br, yb) in y.chunks_exact_mut(BLOCK).enumerate() {
            let mut acc = [0.0f32; BLOCK];
            for k in self.row_ptr[br]..self.row_ptr[br + 1] {
                let c0 = self.block_cols[k] * BLOCK;
                let xs = &x[c0..c0 + BLOCK];
                let b = &self.data[k * 16..k * 16 + 16];
                for r in 0..BLOCK {
                    let row = &b[r * BLOCK..r * BLOCK + BLOCK];
                    acc[r] += row[0] * xs[0] + row[1] * xs[1] + row[2] * xs[2] + row[3] * xs[3];
                }
            }
            for r in 0..BLOCK {
                yb[r] += acc[r];
            }
        }
    }
}

/// Square matrix made of `n_blocks` dense diagonal blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagonalMatrix {
    dim: usize,
    n_blocks: usize,
    data: Vec<f32>,
}

impl BlockDiagonalMatrix {
    pub fn new(dim: usize, n_blocks: usize, data: Vec<f32>) -> Result<Self> {
        if n_blocks == 0 || dim % n_blocks != 0 {
            return Err(Error::shape(format!(
                "{n_blocks} blocks do not divide dimension {dim}"
            )));
        }
        let bs = dim / n_blocks;
        if data.len() != n_blocks * bs * bs {
            return Err(Error::shape(format!(
                "block-diagonal {dim}/{n_blocks} needs {} values, got {}",
                n_blocks * bs * bs,
                data.len()
            )));
        }
        Ok(Self {
            dim,
            n_blocks,
            data,
        })
    }

    pub fn identity(dim: usize, n_blocks: usize) -> Result<Self> {
        let bs = dim / n_blocks.max(1);
        let mut data = vec![0.0; n_blocks * bs * bs];
        for b in 0..n_blocks {
            for i in 0..bs {
                data[b * bs * bs + i * bs + i] = 1.0;
            }
        }
        Self::new(dim, n_blocks, data)
    }

    /// Keeps only the diagonal blocks of `dense`.
    pub fn from_dense(dense: &Matrix, n_blocks: usize) -> Result<Self> {
        if dense.rows != dense.cols {
            return Err(Error::shape("block-diagonal matrix must be square"));
        }
        let dim = dense.rows;
        if n_blocks == 0 || dim % n_blocks != 0 {
            return Err(Error::shape(format!(
                "{n_blocks} blocks do not divide dimension {dim}"
            )));
        }
        let bs = dim / n_blocks;
        let mut data = Vec::with_capacity(n_blocks * bs * bs);
        for b in 0..n_blocks {
            for r in 0..bs {
                data.extend_from_slice(&dense.row(b * bs + r)[b * bs..(b + 1) * bs]);
            }
        }
        Self::new(dim, n_blocks, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn block_size(&self) -> usize {
        self.dim / self.n_blocks
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - 1.0 / self.n_blocks as f64
    }

    pub fn to_dense(&self) -> Matrix {
        let bs = self.block_size();
        let mut m = Matrix::zeros(self.dim, self.dim);
        for b in 0..self.n_blocks {
            for r in 0..bs {
                for c in 0..bs {
                    m.data[(b * bs + r) * self.dim + b * bs + c] =
                        self.data[b * bs * bs + r * bs + c];
                }
            }
        }
        m
    }

    #[inline]
    fn matvec_add_unchecked(&self, x: &[f32], y: &mut [f32]) {
        let bs = self.block_size();
        for b in 0..self.n_blocks {
            let xs = &x[b * bs..(b + 1) * bs];
            let blk = &self.data[b * bs * bs..(b + 1) * bs * bs];
            for (yr, row) in y[b * bs..(b + 1) * bs].iter_mut().zip(blk.chunks_exact(bs)) {
                *yr += dot(row, xs);
            }
        }
    }
}

/// Any of the supported weight-matrix storages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LinearOp {
    Dense(Matrix),
    BlockSparse(BlockSparseMatrix),
    BlockDiagonal(BlockDiagonalMatrix),
}

impl LinearOp {
    pub fn rows(&self) -> usize {
        match self {
            LinearOp::Dense(m) => m.rows,
            LinearOp::BlockSparse(m) => m.rows,
            LinearOp::BlockDiagonal(m) => m.dim,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            LinearOp::Dense(m) => m.cols,
            LinearOp::BlockSparse(m) => m.cols,
            LinearOp::BlockDiagonal(m) => m.dim,
        }
    }

    /// Fraction of structurally zero entries.
    pub fn sparsity(&self) -> f64 {
        match self {
            LinearOp::Dense(_) => 0.0,
            LinearOp::BlockSparse(m) => m.sparsity(),
            LinearOp::BlockDiagonal(m) => m.sparsity(),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            LinearOp::Dense(m) => m.clone(),
            LinearOp::BlockSparse(m) => m.to_dense(),
            LinearOp::BlockDiagonal(m) => m.to_dense(),
        }
    }

    fn check(&self, x: &[f32], y: &[f32]) -> Result<()> {
        if x.len() != self.cols() || y.len() != self.rows() {
            return Err(Error::shape(format!(
                "matvec of {}x{} with x[{}] into y[{}]",
                self.rows(),
                self.cols(),
                x.len(),
                y.len()
            )));
        }
        Ok(())
    }

    /// `y += A·x`.
    pub fn matvec_add(&self, x: &[f32], y: &mut [f32]) -> Result<()> {
        self.check(x, y)?;
        self.matvec_add_unchecked(x, y);
        Ok(())
    }

    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        let mut y = vec![0.0; self.rows()];
        self.matvec_add(x, &mut y)?;
        Ok(y)
    }

    #[inline]
    pub(crate) fn matvec_add_unchecked(&self, x: &[f32], y: &mut [f32]) {
        debug_assert!(x.len() == self.cols() && y.len() == self.rows());
        match self {
            LinearOp::Dense(m) => m.matvec_add_unchecked(x, y),
            LinearOp::BlockSparse(m) => m.matvec_add_unchecked(x, y),
            LinearOp::BlockDiagonal(m) => m.matvec_add_unchecked(x, y),
        }
    }
}

impl From<Matrix> for LinearOp {
    fn from(m: Matrix) -> Self {
        LinearOp::Dense(m)
    }
}

impl From<BlockSparseMatrix> for LinearOp {
    fn from(m: BlockSparseMatrix) -> Self {
        LinearOp::BlockSparse(m)
    }
}

impl From<BlockDiagonalMatrix> for LinearOp {
    fn from(m: BlockDiagonalMatrix) -> Self {
        LinearOp::BlockDiagonal(m)
    }
}

/// One-shot block-magnitude pruning: keeps the `ceil((1 - target) · n)` 4×4
/// blocks with the largest Frobenius norm, ties going to the lower block
/// index.
pub fn magnitude_prune(dense: &Matrix, target_sparsity: f64) -> Result<BlockSparseMatrix> {
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::InvalidArgument(format!(
            "target sparsity {target_sparsity} outside [0, 1)"
        )));
    }
    if dense.rows % BLOCK != 0 || dense.cols % BLOCK != 0 {
        return Err(Error::shape(format!(
            "{}x{} is not divisible into {BLOCK}x{BLOCK} blocks",
            dense.rows, dense.cols
        )));
    }
    let bcs = dense.cols / BLOCK;
    let n = (dense.rows / BLOCK) * bcs;
    // The epsilon keeps e.g. (1 - 0.92) * 400 = 32.000000000000004 from rounding up.
    let keep = (((1.0 - target_sparsity) * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.min(n);
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            let (br, bc) = (i / bcs, i % bcs);
            let mut s = 0.0f64;
            for r in 0..BLOCK {
                for c in 0..BLOCK {
                    let v = dense.get(br * BLOCK + r, bc * BLOCK + c) as f64;
                    s += v * v;
                }
            }
            s
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    BlockSparseMatrix::from_dense_blocks(dense, &order)
}
