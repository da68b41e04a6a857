//! Dense and compressed-sparse-row matrices with the handful of kernels the
//! model needs.
//!
//! Every kernel that parallelizes does so over output rows and reduces each
//! row sequentially, so results are bit-identical regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Rows below this size are not worth handing to the thread pool.
const PAR_MIN_ROWS: usize = 64;

impl DenseMatrix {
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single entry of a 1x1 matrix.
    pub fn as_scalar(&self) -> Option<f64> {
        (self.rows == 1 && self.cols == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = DenseMatrix::zeros(n, m);
        if m == 0 {
            return Ok(out);
        }
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        };
        if n >= PAR_MIN_ROWS {
            out.data.par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(kernel);
        }
        Ok(out)
    }

    fn check_same(&self, other: &DenseMatrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &DenseMatrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        self.map(|v| v * factor)
    }

    pub fn relu(&self) -> DenseMatrix {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> DenseMatrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        out
    }

    /// Sum of each column, as a 1 x cols matrix.
    pub fn col_sums(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Mean over rows, as a 1 x cols matrix.
    pub fn mean_rows(&self) -> DenseMatrix {
        let n = self.rows.max(1) as f64;
        self.col_sums().scale(1.0 / n)
    }

    pub fn row_sums(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, 1);
        for i in 0..self.rows {
            out.data[i] = self.row(i).iter().sum();
        }
        out
    }
}

/// Compressed-sparse-row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a CSR matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(i, j, v) in &entries {
            if i >= rows || j >= cols {
                return Err(Error::shape(
                    "from_triplets",
                    format!("entry ({i},{j}) outside {rows}x{cols}"),
                ));
            }
            if !v.is_finite() {
                return Err(Error::Invalid(format!("non-finite value at ({i},{j})")));
            }
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = vec![0usize; rows + 1];
        let mut col_indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in entries {
            if last == Some((i, j)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((i, j));
            row_offsets[i + 1] += 1;
            col_indices.push(j);
            values.push(v);
        }
        for i in 0..rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        Ok(Self {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_offsets: vec![0; rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_dense(d: &DenseMatrix) -> Self {
        let triplets = (0..d.rows()).flat_map(|i| {
            (0..d.cols()).filter_map(move |j| {
                let v = d.get(i, j);
                (v != 0.0).then_some((i, j, v))
            })
        });
        Self::from_triplets(d.rows(), d.cols(), triplets).expect("dense entries are in range")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |p| vals[p])
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.rows && self.row(i).0.binary_search(&j).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &j in &self.col_indices {
            counts[j + 1] += 1;
        }
        for j in 0..self.cols {
            counts[j + 1] += counts[j];
        }
        let row_offsets = counts.clone();
        let mut cursor = counts;
        let mut col_indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        // Walking source rows in order keeps each output row sorted.
        for (i, j, v) in self.iter() {
            let slot = cursor[j];
            col_indices[slot] = i;
            values[slot] = v;
            cursor[j] += 1;
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (i, j, v) in self.iter() {
            out.set(i, j, v);
        }
        out
    }

    /// Row sums as a plain vector.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    /// Sparse-dense product `self * rhs`.
    pub fn spmm(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows() {
            return Err(Error::shape(
                "spmm",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let m = rhs.cols();
        let mut out = DenseMatrix::zeros(self.rows, m);
        if m == 0 {
            return Ok(out);
        }
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let (cols, vals) = self.row(i);
            for (&j, &a) in cols.iter().zip(vals) {
                for (o, &b) in out_row.iter_mut().zip(rhs.row(j)) {
                    *o += a * b;
                }
            }
        };
        if self.rows >= PAR_MIN_ROWS {
            out.data_mut().par_chunks_mut(m).enumerate().for_each(kernel);
        } else {
            out.data_mut().chunks_mut(m).enumerate().for_each(kernel);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn spmm_identity_returns_input() {
        let h = dm(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let out = SparseMatrix::identity(3).spmm(&h).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn spmm_hand_multiply() {
        let s = SparseMatrix::from_dense(&dm(&[&[0.5, 0.70711], &[0.0, 1.0]]));
        let out = s.spmm(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(out, dm(&[&[0.5, 0.70711], &[0.0, 1.0]]));
    }

    #[test]
    fn spmm_zero_annihilates() {
        let d = dm(&[&[1.0, -2.0], &[3.0, 4.0]]);
        let out = SparseMatrix::zeros(3, 2).spmm(&d).unwrap();
        assert_eq!(out, DenseMatrix::zeros(3, 2));
    }

    #[test]
    fn spmm_shape_mismatch() {
        let err = SparseMatrix::identity(3).spmm(&DenseMatrix::zeros(2, 2));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_shape_mismatch() {
        assert!(DenseMatrix::zeros(2, 3).matmul(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn relu_and_softmax() {
        assert_eq!(dm(&[&[-1.0, 2.0]]).relu(), dm(&[&[0.0, 2.0]]));
        assert_eq!(dm(&[&[0.0, 0.0]]).softmax_rows(), dm(&[&[0.5, 0.5]]));
        let big = dm(&[&[1000.0, 1000.0]]).softmax_rows();
        assert_eq!(big, dm(&[&[0.5, 0.5]]));
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let s = SparseMatrix::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 1, 1.0), (1, 0, 2.0), (1, 2, 1.0)])
            .unwrap();
        assert_eq!(s.nnz(), 3);
        assert_eq!(s.row(1).0, &[0, 2]);
        assert_eq!(s.get(1, 2), 2.0);
        assert!(SparseMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let s = SparseMatrix::from_triplets(3, 2, vec![(0, 1, 1.0), (2, 0, 3.0), (2, 1, 4.0)]).unwrap();
        let t = s.transpose();
        assert_eq!(t.shape(), (2, 3));
        assert_eq!(t.to_dense(), s.to_dense().transpose());
        assert_eq!(t.transpose(), s);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dense(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
            proptest::collection::vec(-2.0f64..2.0, rows * cols)
                .prop_map(move |d| DenseMatrix::from_vec(rows, cols, d).unwrap())
        }

        fn sparse_like(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
            proptest::collection::vec(prop_oneof![3 => Just(0.0), 1 => -2.0f64..2.0], rows * cols)
                .prop_map(move |d| DenseMatrix::from_vec(rows, cols, d).unwrap())
        }

        proptest! {
            #[test]
            fn matmul_is_associative(a in dense(8, 8), b in dense(8, 8), c in dense(8, 8)) {
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                prop_assert!(left.max_abs_diff(&right) <= 1e-9);
            }

            #[test]
            fn spmm_matches_dense(s in sparse_like(9, 7), d in dense(7, 5)) {
                let sparse = SparseMatrix::from_dense(&s);
                let got = sparse.spmm(&d).unwrap();
                let want = s.matmul(&d).unwrap();
                prop_assert!(got.max_abs_diff(&want) <= 1e-12);
            }

            #[test]
            fn softmax_rows_on_simplex(m in dense(5, 6)) {
                let p = m.scale(10.0).softmax_rows();
                for i in 0..p.rows() {
                    let total: f64 = p.row(i).iter().sum();
                    prop_assert!((total - 1.0).abs() <= 1e-12);
                    prop_assert!(p.row(i).iter().all(|&v| v > 0.0));
                }
            }
        }
    }
}
