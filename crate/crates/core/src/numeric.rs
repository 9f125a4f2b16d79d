//! Dense numeric substrate shared by every stage: a row-major `f64` matrix,
//! stabilized softmax, cosine similarity, deterministic top-k selection, a
//! seeded RNG and a central finite-difference gradient checker.

use std::cmp::Ordering;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SpiceError};

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SpiceError::shape(
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SpiceError::InvalidInput(format!(
                "non-finite entry at row {}, col {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SpiceError::InvalidInput("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Gathers the given rows (duplicates allowed) into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy with every row scaled to unit L2 norm; zero rows stay zero.
    pub fn l2_normalized_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let norm = dot(row, row).sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    }

    /// Per-column population standard deviation.
    pub fn column_std(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        let mut mean = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.cols];
        for row in self.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.into_iter().map(|s| (s / n).sqrt()).collect()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(SpiceError::shape(
                format!("inner dimension {}", self.cols),
                format!("{}", other.rows),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out, 0.0);
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(SpiceError::shape(
                format!("shared row count {}", self.rows),
                format!("{}", other.rows),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(self, true, other, false, &mut out, 0.0);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(SpiceError::shape(
                format!("shared column count {}", self.cols),
                format!("{}", other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(self, false, other, true, &mut out, 0.0);
        Ok(out)
    }
}

/// `out = op(a) · op(b) + beta · out`. Single-threaded, so results are bit-stable.
fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, out: &mut Matrix, beta: f64) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if trans_b { b.rows } else { b.cols };
    debug_assert_eq!(out.shape(), (m, n));
    gemm_raw(
        (m, k, n),
        &a.data,
        a.cols,
        trans_a,
        &b.data,
        b.cols,
        trans_b,
        &mut out.data,
        beta,
    );
}

/// Slice-level GEMM on row-major buffers: `out (m×n) = op(a) · op(b) + beta · out`
/// where `a_cols`/`b_cols` are the stored (untransposed) row lengths.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_raw(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_cols: usize,
    trans_b: bool,
    out: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    // SAFETY: the assert above and the stride choice keep every access inside
    // `a`, `b` and `out`; `out` is a unique borrow so nothing aliases it.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stabilized softmax of a finite logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(SpiceError::InvalidInput(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(SpiceError::InvalidInput("non-finite logit".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax with max subtraction. Caller guarantees finite input.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    values.iter_mut().for_each(|v| *v /= sum);
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Backpropagates `grad_probs` (dL/dp) through a row-wise softmax whose
/// output was `probs`, giving dL/dz = p ⊙ (g − ⟨g, p⟩).
pub fn softmax_backward(probs: &Matrix, grad_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad_probs.row(r);
        let inner = dot(p, g);
        for ((o, &pi), &gi) in out.row_mut(r).iter_mut().zip(p).zip(g) {
            *o = pi * (gi - inner);
        }
    }
    out
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SpiceError::shape(a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SpiceError::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Descending order with ties broken by the lower index.
#[inline]
pub(crate) fn desc_then_index(values: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    }
}

/// Indices of the `n` largest values, largest first, ties to the lower index.
pub fn top_k_indices(values: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > values.len() {
        return Err(SpiceError::InvalidArgument(format!(
            "top-k needs 1 <= n <= {}, got n = {n}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = desc_then_index(values);
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, &cmp);
        idx.truncate(n);
    }
    idx.sort_unstable_by(&cmp);
    Ok(idx)
}

/// Position of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Central finite-difference gradient `(f(x + h e_j) − f(x − h e_j)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f(&probe)?;
        probe[j] = x[j] - h;
        let minus = f(&probe)?;
        probe[j] = x[j];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = dot(a, a).sqrt().max(dot(b, b).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Seeded ChaCha stream. The same `(seed, stream)` always yields the same sequence.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, 0)
    }

    /// Independent stream keyed on `(seed, stream)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position in the keystream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Stream ids reserved for pipeline-level randomness; per-head streams use the head index.
pub mod streams {
    pub const BATCHES: u64 = 1 << 40;
    pub const EVAL: u64 = (1 << 40) + 1;
    pub const SYNTH: u64 = (1 << 40) + 2;
    pub const SEMI: u64 = (1 << 40) + 3;
    pub const KMEANS: u64 = 1 << 41;
    pub const HEAD_BASE: u64 = 1 << 20;
}
