//! Dense `f32` kernels: matrix products, softmax, RMS norm, rotary embedding
//! and top-k selection.
//!
//! Every reduction accumulates left to right starting from `0.0`, so a value
//! computed through [`matmul`] and through [`vec_mat`] is bit-identical. The
//! prefill and decode paths rely on this.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Empty matrix with `cols` columns, ready for [`Matrix::push_row`].
    pub fn with_cols(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            data: Vec::new(),
        }
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(shape_err(format!(
                "row of length {} pushed into matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn truncate_rows(&mut self, rows: usize) {
        if rows < self.rows {
            self.rows = rows;
            self.data.truncate(rows * self.cols);
        }
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }
}

/// Borrowed row-major matrix, typically a prefix of a KV-cache slot.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f32],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f32]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "view {rows}x{cols} over {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &'a [f32] {
        self.data
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// First `rows` rows (clamped to the available count).
    pub fn prefix(&self, rows: usize) -> MatRef<'a> {
        let rows = rows.min(self.rows);
        MatRef {
            rows,
            cols: self.cols,
            data: &self.data[..rows * self.cols],
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.to_vec(),
        }
    }
}

fn accumulate_row(a_row: &[f32], b: &Matrix, out_row: &mut [f32]) {
    out_row.fill(0.0);
    for (k, &a) in a_row.iter().enumerate() {
        let b_row = b.row(k);
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += a * bv;
        }
    }
}

/// `a × b`, accumulating each output over the shared dimension in order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let (lo, hi) = (i * b.cols, (i + 1) * b.cols);
        accumulate_row(a.row(i), b, &mut out.data[lo..hi]);
    }
    Ok(out)
}

/// Row vector times matrix; bit-identical to one row of [`matmul`].
pub fn vec_mat(x: &[f32], b: &Matrix) -> Result<Vec<f32>> {
    if x.len() != b.rows {
        return Err(shape_err(format!(
            "vector of length {} times {}x{} matrix",
            x.len(),
            b.rows,
            b.cols
        )));
    }
    let mut out = vec![0.0; b.cols];
    accumulate_row(x, b, &mut out);
    Ok(out)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax (max subtraction).
pub fn softmax_row(x: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(shape_err("softmax of an empty vector"));
    }
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = x.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = 0.0f32;
    for &e in &out {
        sum += e;
    }
    for e in &mut out {
        *e /= sum;
    }
    Ok(out)
}

/// Descending by score, ties broken by the lower index.
fn rank_order(scores: &[f32], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

fn top_k_unordered(scores: &[f32], m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Budget {
            requested: 0,
            available: scores.len(),
        });
    }
    if m > scores.len() {
        return Err(Error::Budget {
            requested: m,
            available: scores.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if m < idx.len() {
        idx.select_nth_unstable_by(m - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(m);
    }
    Ok(idx)
}

/// Indices of the `m` largest scores, returned in ascending index order.
pub fn arg_top_k(scores: &[f32], m: usize) -> Result<Vec<usize>> {
    let mut idx = top_k_unordered(scores, m)?;
    idx.sort_unstable();
    Ok(idx)
}

/// Same set as [`arg_top_k`], ordered by rank (highest score first).
pub fn arg_top_k_ranked(scores: &[f32], m: usize) -> Result<Vec<usize>> {
    let mut idx = top_k_unordered(scores, m)?;
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(idx)
}

/// Greedy pick: index of the maximum, lowest index on ties.
pub fn argmax(x: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in x.iter().enumerate() {
        match best {
            Some(b) if x[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn rms_norm(x: &[f32], weight: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != weight.len() {
        return Err(shape_err(format!(
            "rms_norm input length {} vs weight length {}",
            x.len(),
            weight.len()
        )));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    Ok(x.iter().zip(weight).map(|(&v, &w)| v * inv * w).collect())
}

/// Rotary embedding over interleaved pairs `(2i, 2i+1)` of every head.
pub fn rope_apply(x: &[f32], position: usize, head_dim: usize, theta_base: f32) -> Result<Vec<f32>> {
    let mut out = x.to_vec();
    rope_in_place(&mut out, position, head_dim, theta_base)?;
    Ok(out)
}

pub fn rope_in_place(x: &mut [f32], position: usize, head_dim: usize, theta_base: f32) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(shape_err(format!("rope head_dim {head_dim} must be even and non-zero")));
    }
    if !x.len().is_multiple_of(head_dim) {
        return Err(shape_err(format!(
            "rope input length {} is not a multiple of head_dim {head_dim}",
            x.len()
        )));
    }
    if position == 0 {
        return Ok(());
    }
    let half = head_dim / 2;
    let base = theta_base as f64;
    let pos = position as f64;
    let angles: Vec<(f64, f64)> = (0..half)
        .map(|i| {
            let angle = pos * base.powf(-2.0 * i as f64 / head_dim as f64);
            (angle.cos(), angle.sin())
        })
        .collect();
    for head in x.chunks_exact_mut(head_dim) {
        for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(&angles) {
            let (a, b) = (pair[0] as f64, pair[1] as f64);
            pair[0] = (a * c - b * s) as f32;
            pair[1] = (a * s + b * c) as f32;
        }
    }
    Ok(())
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.next_symmetric_f32(2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f32;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.row_mut(i)[j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = SplitMix64::new(1);
        let m = random_matrix(&mut rng, 3, 3);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let a = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = SplitMix64::new(2);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 8, 8);
            let b = random_matrix(&mut rng, 8, 8);
            let got = matmul(&a, &b).unwrap();
            let want = triple_loop(&a, &b);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert_eq!(g.to_bits(), w.to_bits());
            }
        }
    }

    #[test]
    fn vec_mat_equals_matmul_row() {
        let mut rng = SplitMix64::new(3);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 7, 4);
        let full = matmul(&a, &b).unwrap();
        for i in 0..5 {
            assert_eq!(vec_mat(a.row(i), &b).unwrap(), full.row(i));
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_basics() {
        assert_eq!(softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(softmax_row(&[]), Err(Error::Shape(_))));
        let mut rng = SplitMix64::new(4);
        let x: Vec<f32> = (0..64).map(|_| rng.next_symmetric_f32(5.0)).collect();
        let p = softmax_row(&x).unwrap();
        let sum: f64 = p.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(arg_top_k(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(arg_top_k(&[1.0; 5], 2).unwrap(), vec![0, 1]);
        assert_eq!(arg_top_k_ranked(&[1.0, 5.0, 3.0], 3).unwrap(), vec![1, 2, 0]);
        assert!(matches!(arg_top_k(&[1.0], 2), Err(Error::Budget { .. })));
        assert!(matches!(arg_top_k(&[1.0], 0), Err(Error::Budget { .. })));
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..100 {
            let scores: Vec<f32> = (0..1000).map(|_| rng.next_symmetric_f32(1.0)).collect();
            let mut order: Vec<usize> = (0..scores.len()).collect();
            // Stable sort keeps lower indices first among equal scores.
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
            let mut want: Vec<usize> = order[..32].to_vec();
            want.sort_unstable();
            assert_eq!(arg_top_k(&scores, 32).unwrap(), want);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn rms_norm_cases() {
        let ones = vec![1.0f32; 6];
        assert_eq!(rms_norm(&ones, &ones, 0.0).unwrap(), ones);
        assert_eq!(rms_norm(&[0.0; 4], &[1.0; 4], 1e-5).unwrap(), vec![0.0; 4]);
        assert!(rms_norm(&[1.0], &[1.0, 1.0], 1e-5).is_err());

        let mut rng = SplitMix64::new(6);
        let x: Vec<f32> = (0..32).map(|_| rng.next_symmetric_f32(3.0)).collect();
        let w: Vec<f32> = (0..32).map(|_| rng.next_symmetric_f32(1.0)).collect();
        let mean_sq = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 32.0;
        let denom = (mean_sq + 1e-5).sqrt();
        let got = rms_norm(&x, &w, 1e-5).unwrap();
        for i in 0..32 {
            let want = x[i] as f64 / denom * w[i] as f64;
            assert!((got[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_cases() {
        let x = vec![0.3f32, -1.2, 0.5, 2.0];
        assert_eq!(rope_apply(&x, 0, 4, 10_000.0).unwrap(), x);
        let r = rope_apply(&[1.0, 0.0], 1, 2, 10_000.0).unwrap();
        assert!((r[0] - 1f32.cos()).abs() < 1e-7);
        assert!((r[1] - 1f32.sin()).abs() < 1e-7);
        assert!(rope_apply(&[1.0, 0.0, 0.0], 1, 3, 10_000.0).is_err());
        assert!(rope_apply(&[1.0, 0.0, 0.0], 1, 2, 10_000.0).is_err());
    }
}
