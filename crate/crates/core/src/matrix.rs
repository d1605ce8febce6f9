//! Dense row-major `f32` matrices and the small set of kernels the head needs.

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix of `f32`.
///
/// Used both for the output-embedding matrix (one row per token) and for
/// batches of hidden states (one row per query).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

/// Output-embedding matrix `E`, `v × d`.
pub type EmbeddingMatrix = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DimMismatch(format!(
                "matrix dims must be positive, got {rows}×{cols}"
            )));
        }
        let expected = rows.checked_mul(cols).ok_or_else(|| {
            Error::DimMismatch(format!("{rows}×{cols} overflows the address space"))
        })?;
        if data.len() != expected {
            return Err(Error::DimMismatch(format!(
                "{rows}×{cols} matrix needs {expected} values, got {}",
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

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// First row containing a NaN or infinity, if any.
    pub fn first_non_finite_row(&self) -> Option<usize> {
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|i| i / self.cols)
    }

    /// `out[i] = row_i · x` for every row.
    pub fn matvec_into(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, r) in out.iter_mut().zip(self.iter_rows()) {
            *o = dot(r, x);
        }
    }

    pub fn matvec(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }
}

/// A batch of hidden-state vectors `h`, one per row, with optional dense-head
/// reference labels (top-k token ids per query).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBatch {
    pub vectors: Matrix,
    pub oracle_top_k: Option<Vec<Vec<u32>>>,
}

impl HiddenBatch {
    pub fn new(vectors: Matrix) -> Self {
        Self {
            vectors,
            oracle_top_k: None,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn query(&self, i: usize) -> &[f32] {
        self.vectors.row(i)
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::DimMismatch(format!(
                "hidden states have d={}, embeddings have d={d}",
                self.dim()
            )));
        }
        Ok(())
    }
}

const LANES: usize = 16;

/// Dot product with independent partial sums so the loop vectorizes.
///
/// Every logit in the crate goes through this kernel, so the dense head and
/// the two-stage head produce bit-identical scores for the same token.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    // pairwise reduction of the lanes
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0] + tail
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn l2_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// `out (m × n) = a (m × k) · bᵀ` where `b` is `n × k`, all row-major.
pub fn matmul_transposed(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // `a`, `b` and `out`; `out` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Orders `(score, id)` pairs: higher score first, lower id on ties.
#[inline]
pub(crate) fn rank_cmp(a: (f32, u32), b: (f32, u32)) -> std::cmp::Ordering {
    // partial_cmp so that -0.0 and 0.0 tie; inputs are validated finite
    b.0.partial_cmp(&a.0)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Indices of the `k` largest values, highest first, ties broken by lower index.
pub fn top_k_indices(values: &[f32], k: usize) -> Vec<u32> {
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    let cmp = |&a: &u32, &b: &u32| rank_cmp((values[a as usize], a), (values[b as usize], b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_f64_reference() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..37).map(|i| (i as f32 * 0.11).cos()).collect();
        let got = dot(&a, &b) as f64;
        let want = dot_f64(&a, &b);
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn matmul_transposed_matches_rowwise_dots() {
        let a: Vec<f32> = (0..3 * 5).map(|i| i as f32 * 0.5 - 3.0).collect();
        let b: Vec<f32> = (0..4 * 5).map(|i| (i as f32).sqrt()).collect();
        let mut out = vec![0.0; 12];
        matmul_transposed(&a, &b, 3, 5, 4, &mut out);
        for i in 0..3 {
            for j in 0..4 {
                let want = dot_f64(&a[i * 5..i * 5 + 5], &b[j * 5..j * 5 + 5]);
                assert!((out[i * 4 + j] as f64 - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn top_k_breaks_ties_by_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.5; 4], 2), vec![0, 1]);
        assert_eq!(argmax(&[0.5, 0.7, 0.7]), 1);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Matrix::new(2, 3, vec![0.0; 5]).is_err());
        assert!(Matrix::new(0, 3, vec![]).is_err());
    }
}
