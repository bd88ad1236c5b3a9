//! Small dense linear algebra: LU with partial pivoting and a cyclic Jacobi
//! eigensolver for symmetric matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pivots smaller than this (relative to the largest entry) count as singular.
const SINGULAR_TOL: f64 = 1e-14;

#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Lu> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::dim(format!("LU needs a square matrix, got {}x{}", n, a.cols())));
        }
        a.ensure_finite("LU input")?;
        let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax <= SINGULAR_TOL * scale {
                return Err(Error::numeric(format!("matrix is singular (pivot {pmax:e} at column {k})")));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    /// Solves `A X = B` for a right-hand side with `n` rows.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.n;
        if b.rows() != n {
            return Err(Error::dim(format!("rhs has {} rows, system has {n}", b.rows())));
        }
        let m = b.cols();
        let mut x = Tensor::zeros(n, m);
        for col in 0..m {
            let mut y: Vec<f64> = self.perm.iter().map(|&p| b.get(p, col)).collect();
            for i in 0..n {
                let mut s = y[i];
                for j in 0..i {
                    s -= self.lu[i * n + j] * y[j];
                }
                y[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = y[i];
                for j in i + 1..n {
                    s -= self.lu[i * n + j] * y[j];
                }
                y[i] = s / self.lu[i * n + i];
            }
            for i in 0..n {
                x.set(i, col, y[i]);
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Tensor> {
        self.solve(&Tensor::eye(self.n))
    }

    /// `(sign, ln|det|)`.
    pub fn log_det(&self) -> (f64, f64) {
        let mut sign = self.sign;
        let mut acc = 0.0;
        for i in 0..self.n {
            let d = self.lu[i * self.n + i];
            if d < 0.0 {
                sign = -sign;
            }
            acc += d.abs().ln();
        }
        (sign, acc)
    }
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    Lu::factor(a)?.inverse()
}

pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Lu::factor(a)?.solve(b)
}

/// Log-determinant of a matrix with positive determinant.
pub fn log_det_positive(a: &Tensor) -> Result<f64> {
    let (sign, ld) = Lu::factor(a)?.log_det();
    if sign <= 0.0 {
        return Err(Error::Precondition("determinant is not positive".into()));
    }
    Ok(ld)
}

pub fn is_symmetric(a: &Tensor, tol: f64) -> bool {
    a.rows() == a.cols()
        && (0..a.rows()).all(|i| (0..i).all(|j| (a.get(i, j) - a.get(j, i)).abs() <= tol))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues come back in decreasing order with eigenvectors as columns.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("eigen-decomposition needs a square matrix"));
    }
    a.ensure_finite("eigen input")?;
    let mut m = a.clone();
    let mut v = Tensor::eye(n);
    let total: f64 = m.data().iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Tensor::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok((values, vectors))
}

pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(a)?.0)
}

/// Singular values in decreasing order, from the eigenvalues of `AᵀA`.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let gram = crate::tensor::gemm(a, true, a, false)?;
    let mut ev = symmetric_eigenvalues(&gram)?;
    for e in ev.iter_mut() {
        *e = e.max(0.0).sqrt();
    }
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_inverse_roundtrip() {
        let a = Tensor::from_rows(&[
            vec![0.0, 2.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![3.0, 0.0, 1.0],
        ])
        .unwrap();
        let inv = inverse(&a).unwrap();
        let prod = a.matmul(&inv).unwrap();
        assert!(prod.max_abs_diff(&Tensor::eye(3)) < 1e-14);
        let (sign, ld) = Lu::factor(&a).unwrap().log_det();
        // det = 0*(1) - 2*(1) + 1*(-3) = -5
        assert_eq!(sign, -1.0);
        assert!((ld - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(Lu::factor(&a), Err(Error::Numeric(_))));
    }

    #[test]
    fn jacobi_eigen_reconstructs() {
        let a = Tensor::from_rows(&[
            vec![4.0, 1.0, -2.0],
            vec![1.0, 2.0, 0.5],
            vec![-2.0, 0.5, 3.0],
        ])
        .unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let recon = vecs
            .matmul(&Tensor::diag(&vals))
            .unwrap()
            .matmul(&vecs.transpose())
            .unwrap();
        assert!(recon.max_abs_diff(&a) < 1e-12);
        assert!((vals.iter().sum::<f64>() - a.trace()).abs() < 1e-12);
    }

    #[test]
    fn singular_values_of_diagonal() {
        let a = Tensor::diag(&[0.3, -2.0, 1.0]);
        let s = singular_values(&a).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14 && (s[2] - 0.3).abs() < 1e-14);
    }
}
