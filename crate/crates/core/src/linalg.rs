//! Cyclic Jacobi eigen-decomposition for small dense symmetric matrices.

use nalgebra::DMatrix;
use thiserror::Error;

pub const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is {0}x{1}, expected square")]
    NotSquare(usize, usize),
    #[error("Jacobi rotations did not converge within {0} sweeps")]
    NotConverged(usize),
}

/// Eigenvalues in descending order; eigenvector `i` is column `i` of `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

fn off_diagonal_sq(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s
}

/// Eigen-decomposition of the symmetric part of `m` by cyclic Jacobi sweeps.
pub fn jacobi_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen, LinalgError> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(LinalgError::NotSquare(n, m.ncols()));
    }
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.iter().map(|x| x * x).sum::<f64>();
    let tol = (f64::EPSILON * f64::EPSILON) * scale;

    let mut converged = off_diagonal_sq(&a) <= tol;
    let mut sweep = 0;
    while !converged {
        if sweep == MAX_SWEEPS {
            return Err(LinalgError::NotConverged(MAX_SWEEPS));
        }
        sweep += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_diagonal_sq(&a) <= tol;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymmetricEigen { values, vectors })
}

/// Symmetric square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let eig = jacobi_eigen(m)?;
    let n = m.nrows();
    let roots = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n,
        eig.values.iter().map(|l| l.max(0.0).sqrt()),
    ));
    Ok(&eig.vectors * roots * eig.vectors.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn diagonal_matrix() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let e = jacobi_eigen(&m).unwrap();
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn zero_matrix() {
        let e = jacobi_eigen(&DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(e.values, vec![0.0; 4]);
    }

    #[test]
    fn reconstructs_and_matches_dense_solver() {
        let m = DMatrix::from_row_slice(4, 4, &[
            4.0, 1.0, -2.0, 0.5,
            1.0, 3.0, 0.0, 1.5,
            -2.0, 0.0, 5.0, -1.0,
            0.5, 1.5, -1.0, 2.0,
        ]);
        let e = jacobi_eigen(&m).unwrap();
        let recon = &e.vectors * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(e.values.clone())) * e.vectors.transpose();
        assert_relative_eq!(recon, m, epsilon = 1e-12);
        let mut dense: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        dense.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in e.values.iter().zip(&dense) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        let r = psd_sqrt(&m).unwrap();
        assert_relative_eq!(&r * &r, m, epsilon = 1e-14);
    }

    #[test]
    fn rejects_non_square() {
        assert_eq!(jacobi_eigen(&DMatrix::zeros(2, 3)).unwrap_err(), LinalgError::NotSquare(2, 3));
    }
}
