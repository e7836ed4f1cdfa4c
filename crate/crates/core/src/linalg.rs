//! Dense linear algebra used by the model and the projection memory.
//!
//! Everything is `f64`; matrices are row-major. The SVD is a one-sided
//! Jacobi sweep, which is accurate for the tall-thin and short-wide shapes
//! the projection memory produces.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Row-major dense matrix. Zero-sized shapes are allowed (an empty basis is a
/// `d x 0` matrix).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                format!("{} entries for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dims(format!("row {i} of width {cols}"), r.len()));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.as_ref().len());
        let mut m = Matrix::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            let c = c.as_ref();
            if c.len() != rows {
                return Err(Error::dims(format!("column {j} of height {rows}"), c.len()));
            }
            for (i, &v) in c.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dims(
                format!("{} rows on the right operand", self.cols),
                other.rows,
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        if m == 0 {
            return Ok(out);
        }
        par::for_each_chunk_mut(&mut out.data, m * row_block(k * m), |blk, chunk| {
            let first = blk * row_block(k * m);
            for (r, out_row) in chunk.chunks_mut(m).enumerate() {
                let a_row = self.row(first + r);
                for (p, &a) in a_row.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let b_row = other.row(p);
                    for (o, &b) in out_row.iter_mut().zip(b_row) {
                        *o += a * b;
                    }
                }
            }
        });
        Ok(out)
    }

    /// `self * other^T`; both operands share their column count.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dims(
                format!("{} columns on the right operand", self.cols),
                other.cols,
            ));
        }
        let (n, m) = (self.rows, other.rows);
        let mut out = Matrix::zeros(n, m);
        if m == 0 {
            return Ok(out);
        }
        par::for_each_chunk_mut(&mut out.data, m * row_block(self.cols * m), |blk, chunk| {
            let first = blk * row_block(self.cols * m);
            for (r, out_row) in chunk.chunks_mut(m).enumerate() {
                let a_row = self.row(first + r);
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o = dot(a_row, other.row(j));
                }
            }
        });
        Ok(out)
    }

    /// `self^T * other`; both operands share their row count.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dims(
                format!("{} rows on the right operand", self.rows),
                other.rows,
            ));
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Concatenate columns: `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dims(format!("{} rows", self.rows), other.rows));
        }
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
            out.row_mut(i)[self.cols..].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `‖self^T self − I‖_max`, the orthonormality defect of the columns.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.matmul_tn(self).expect("square gram");
        let mut worst: f64 = 0.0;
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

/// Rows per parallel block, sized so each block does roughly 64k flops.
fn row_block(flops_per_row: usize) -> usize {
    (65_536 / flops_per_row.max(1)).max(1)
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin singular value decomposition `m = U diag(s) V^T`.
///
/// For an `r x c` input with `k = min(r, c)`: `left_vectors` is `r x k`,
/// `right_vectors` is `c x k`, and `singular_values` has length `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub left_vectors: Matrix,
    pub singular_values: Vec<f64>,
    pub right_vectors: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.left_vectors.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_nt(&self.right_vectors)
            .expect("consistent svd shapes")
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidMatrix("empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entry".into()));
    }
    let mut result = if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m);
        SvdResult {
            left_vectors: u,
            singular_values: s,
            right_vectors: v,
        }
    } else {
        // m^T = U' S V'^T  =>  m = V' S U'^T
        let (u, s, v) = jacobi_tall(&m.transpose());
        SvdResult {
            left_vectors: v,
            singular_values: s,
            right_vectors: u,
        }
    };
    fix_signs(&mut result);
    Ok(result)
}

/// SVD of a matrix with `rows >= cols`. Strictly tall inputs are first reduced
/// to their `cols x cols` triangular factor by Householder QR so the Jacobi
/// sweeps run on a small square matrix; `U = Q U_r`.
fn jacobi_tall(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, n) = m.shape();
    if rows <= n {
        return jacobi_square_or_tall(m);
    }
    let mut cols = m.columns();
    let reflectors = householder_qr(&mut cols);
    let mut r = Matrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..=j {
            r[(i, j)] = c[i];
        }
    }
    let (u_r, s, v) = jacobi_square_or_tall(&r);
    let mut u_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut y = vec![0.0; rows];
            for i in 0..n {
                y[i] = u_r[(i, j)];
            }
            y
        })
        .collect();
    for (k, v_k) in reflectors.iter().enumerate().rev() {
        for y in &mut u_cols {
            apply_reflector(v_k, k, y);
        }
    }
    (Matrix::from_columns(&u_cols).expect("finite"), s, v)
}

/// In-place Householder QR over columns. On return the upper triangle of
/// `cols` holds `R`; the returned unit reflectors `v_k` (zero above index `k`)
/// satisfy `A = H_0 H_1 ... H_{n-1} R` with `H_k = I - 2 v_k v_k^T`.
fn householder_qr(cols: &mut [Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cols.len();
    let m = cols[0].len();
    let mut reflectors = Vec::with_capacity(n);
    for k in 0..n {
        let x_norm = norm(&cols[k][k..]);
        let mut v = vec![0.0; m];
        if x_norm > 0.0 {
            let alpha = if cols[k][k] >= 0.0 { -x_norm } else { x_norm };
            v[k..].copy_from_slice(&cols[k][k..]);
            v[k] -= alpha;
            let v_norm = norm(&v[k..]);
            if v_norm > 0.0 {
                v[k..].iter_mut().for_each(|x| *x /= v_norm);
                for col in cols.iter_mut().skip(k) {
                    apply_reflector(&v, k, col);
                }
            }
            cols[k][k] = alpha;
        }
        for x in cols[k][k + 1..].iter_mut() {
            *x = 0.0;
        }
        reflectors.push(v);
    }
    reflectors
}

#[inline]
fn apply_reflector(v: &[f64], k: usize, y: &mut [f64]) {
    let proj = 2.0 * dot(&v[k..], &y[k..]);
    if proj != 0.0 {
        for (yi, vi) in y[k..].iter_mut().zip(&v[k..]) {
            *yi -= proj * vi;
        }
    }
}

/// One-sided Jacobi on a matrix with `rows >= cols`. Returns `(U, s, V)` with
/// `U` of shape `rows x cols`, `V` of shape `cols x cols`, `s` sorted
/// non-increasing.
fn jacobi_square_or_tall(m: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, n) = m.shape();
    let mut cols: Vec<Vec<f64>> = m.columns();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let sigma_max = sigma[order[0]];
    let tiny = rows.max(n) as f64 * f64::EPSILON * sigma_max;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if sigma[j] > tiny && sigma[j] > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            deficient.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &deficient);

    let s: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let v_sorted: Vec<Vec<f64>> = order
        .iter()
        .map(|&j| (0..n).map(|i| v[j][i]).collect())
        .collect();
    let u = Matrix::from_columns(&u_cols).expect("finite");
    let v = Matrix::from_columns(&v_sorted).expect("finite");
    (u, s, v)
}

/// Column pair stored in `v[p]`, `v[q]`; `v` holds columns (not rows).
fn rotate_pair(v: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = v.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Replace the columns listed in `slots` with unit vectors orthogonal to all
/// other columns, drawn from the standard basis by Gram-Schmidt.
fn complete_orthonormal(cols: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut candidate = 0;
    for &slot in slots {
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (x, y) in e.iter_mut().zip(c) {
                        *x -= proj * y;
                    }
                }
            }
            let n = norm(&e);
            if n > 0.5 {
                cols[slot] = e.into_iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

/// Make the largest-magnitude entry of each left singular vector positive
/// (first such entry on ties); the matching right vector flips with it.
fn fix_signs(r: &mut SvdResult) {
    let (rows, k) = r.left_vectors.shape();
    for j in 0..k {
        let mut best = 0;
        for i in 1..rows {
            if r.left_vectors[(i, j)].abs() > r.left_vectors[(best, j)].abs() {
                best = i;
            }
        }
        if r.left_vectors[(best, j)] < 0.0 {
            for i in 0..rows {
                r.left_vectors[(i, j)] = -r.left_vectors[(i, j)];
            }
            for i in 0..r.right_vectors.rows() {
                r.right_vectors[(i, j)] = -r.right_vectors[(i, j)];
            }
        }
    }
}

/// `1 − a·b / (‖a‖‖b‖)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_distance_with_norms(a, na, b, nb))
}

/// Same as [`cosine_distance`] with precomputed non-zero norms.
#[inline]
pub fn cosine_distance_with_norms(a: &[f64], norm_a: f64, b: &[f64], norm_b: f64) -> f64 {
    (1.0 - dot(a, b) / (norm_a * norm_b)).clamp(0.0, 2.0)
}

/// `v − B B^T v` for a basis `B` with orthonormal columns.
pub fn orthonormal_project(basis: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if basis.rows() != v.len() {
        return Err(Error::dims(basis.rows(), v.len()));
    }
    let mut out = v.to_vec();
    for j in 0..basis.cols() {
        let coeff: f64 = (0..basis.rows()).map(|i| basis[(i, j)] * v[i]).sum();
        if coeff == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o -= coeff * basis[(i, j)];
        }
    }
    Ok(out)
}
