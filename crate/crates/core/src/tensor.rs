//! Dense row-major matrices of `f64`.
//!
//! Every value in the engine is a rank-2 tensor; vectors are `1 x n` rows and
//! scalars are `1 x 1`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: [1, 1],
            data: vec![v],
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: [1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::dim(format!("row {i} has {} entries, expected {c}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor {
            shape: [rows, cols],
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Tensor::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
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
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn transpose(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: [c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape, "elementwise operand")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.rows().min(self.cols());
        (0..n).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    /// Column sums as a `1 x cols` row.
    pub fn col_sums(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Tensor {
            shape: [1, c],
            data: out,
        }
    }

    /// Row sums as a `rows x 1` column.
    pub fn row_sums(&self) -> Tensor {
        let [r, c] = self.shape;
        let data = (0..r)
            .map(|i| self.data[i * c..(i + 1) * c].iter().sum())
            .collect();
        Tensor {
            shape: [r, 1],
            data,
        }
    }

    /// Copies the given rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.shape[1];
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: [idx.len(), c],
            data,
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.shape[1];
        Tensor {
            shape: [end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        Tensor::from_fn(self.rows(), end - start, |i, j| self.get(i, start + j))
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hconcat(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(Error::dim(format!(
                "cannot concatenate {} rows with {} rows",
                self.rows(),
                other.rows()
            )));
        }
        let (ca, cb) = (self.cols(), other.cols());
        let mut data = Vec::with_capacity(self.rows() * (ca + cb));
        for i in 0..self.rows() {
            data.extend_from_slice(self.row_slice(i));
            data.extend_from_slice(other.row_slice(i));
        }
        Tensor::new(self.rows(), ca + cb, data)
    }

    /// Vertical concatenation of tensors with equal widths.
    pub fn vstack(parts: &[Tensor]) -> Result<Tensor> {
        let c = parts.first().map_or(0, Tensor::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::dim("vstack width mismatch"));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows();
        }
        Tensor::new(rows, c, data)
    }

    pub fn expect_shape(&self, shape: [usize; 2], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(format!(
                "{what}: expected {}x{}, got {}x{}",
                shape[0], shape[1], self.shape[0], self.shape[1]
            )));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        gemm(self, false, other, false)
    }
}

/// `op(a) * op(b)` where `op` optionally transposes.
pub fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {m}x{k} * {k2}x{n}"
        )));
    }
    let mut out = Tensor::zeros(m, n);
    gemm_into(a, ta, b, tb, 0.0, &mut out);
    Ok(out)
}

/// `out = beta * out + op(a) * op(b)`; shapes must already agree.
pub(crate) fn gemm_into(a: &Tensor, ta: bool, b: &Tensor, tb: bool, beta: f64, out: &mut Tensor) {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let n = if tb { b.rows() } else { b.cols() };
    debug_assert_eq!(out.shape, [m, n]);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    // SAFETY: strides describe the exact row-major layouts of `a`, `b` and `out`,
    // whose lengths were checked against their shapes at construction.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 2.0);
        let b = Tensor::from_fn(4, 2, |i, j| (i as f64 - j as f64) * 0.25);
        let want = naive(&a, &b);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&want) < 1e-12);
        let at = a.transpose();
        let bt = b.transpose();
        assert!(gemm(&at, true, &b, false).unwrap().max_abs_diff(&want) < 1e-12);
        assert!(gemm(&a, false, &bt, true).unwrap().max_abs_diff(&want) < 1e-12);
        assert!(gemm(&at, true, &bt, true).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn shape_checks() {
        assert!(Tensor::new(2, 2, vec![1.0; 3]).is_err());
        let a = Tensor::zeros(2, 3);
        assert!(a.matmul(&Tensor::zeros(2, 3)).is_err());
        assert!(a.add(&Tensor::zeros(3, 2)).is_err());
    }

    #[test]
    fn concat_and_slices() {
        let a = Tensor::from_fn(2, 2, |i, j| (i * 2 + j) as f64);
        let b = Tensor::from_fn(2, 1, |i, _| 10.0 + i as f64);
        let c = a.hconcat(&b).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 10.0, 2.0, 3.0, 11.0]);
        assert_eq!(c.slice_cols(2, 3), b);
        assert_eq!(c.slice_rows(1, 2).data(), &[2.0, 3.0, 11.0]);
        assert_eq!(Tensor::vstack(&[a.clone(), a.clone()]).unwrap().rows(), 4);
    }
}
