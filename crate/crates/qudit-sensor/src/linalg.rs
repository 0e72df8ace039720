//! Small dense linear algebra: cyclic-Jacobi eigendecomposition for real
//! symmetric matrices and Gaussian elimination for the fitter's normal
//! equations.
//!
//! Everything here targets matrices of order ≲ 150 (charge basis) where a
//! hand-rolled Jacobi sweep is plenty fast, deterministic across platforms
//! and accurate to near machine precision.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("matrix is not square or dimensions mismatch")]
    Shape,
}

const MAX_JACOBI_SWEEPS: usize = 64;

/// Eigendecomposition of a real symmetric matrix.
///
/// Returns eigenvalues sorted ascending and the matching eigenvectors as the
/// columns of the second array. Only the lower triangle of `a` is read.
pub fn eigh<T: Real>(a: &Array2<T>) -> Result<(Array1<T>, Array2<T>), LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::Shape);
    }
    let mut a = a.clone();
    // symmetrize from the lower triangle
    for i in 0..n {
        for j in 0..i {
            let v = a[[i, j]];
            a[[j, i]] = v;
        }
    }
    let mut v = Array2::<T>::eye(n);
    let eps = T::epsilon();
    let mut converged = false;
    for _sweep in 0..MAX_JACOBI_SWEEPS {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off + a[[p, q]] * a[[p, q]];
            }
        }
        let scale: T = (0..n).map(|i| a[[i, i]] * a[[i, i]]).sum::<T>() + off;
        if off <= eps * eps * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                // skip rotations that cannot change anything at working precision
                if apq.abs() <= eps * (app.abs() + aqq.abs()) * T::of(0.5e-2) {
                    a[[p, q]] = T::zero();
                    a[[q, p]] = T::zero();
                    continue;
                }
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = if theta >= T::zero() {
                    T::one() / (theta + (theta * theta + T::one()).sqrt())
                } else {
                    -T::one() / (-theta + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                let tau = s / (T::one() + c);
                a[[p, p]] = app - t * apq;
                a[[q, q]] = aqq + t * apq;
                a[[p, q]] = T::zero();
                a[[q, p]] = T::zero();
                for k in 0..n {
                    if k != p && k != q {
                        let akp = a[[k, p]];
                        let akq = a[[k, q]];
                        a[[k, p]] = akp - s * (akq + tau * akp);
                        a[[p, k]] = a[[k, p]];
                        a[[k, q]] = akq + s * (akp - tau * akq);
                        a[[q, k]] = a[[k, q]];
                    }
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = vkp - s * (vkq + tau * vkp);
                    v[[k, q]] = vkq + s * (vkp - tau * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence(MAX_JACOBI_SWEEPS));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        a[[i, i]]
            .partial_cmp(&a[[j, j]])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals = Array1::from_iter(idx.iter().map(|&i| a[[i, i]]));
    let mut vecs = Array2::<T>::zeros((n, n));
    for (col, &i) in idx.iter().enumerate() {
        for k in 0..n {
            vecs[[k, col]] = v[[k, i]];
        }
    }
    Ok((vals, vecs))
}

/// Solve `a x = b` in place by Gaussian elimination with partial pivoting.
pub fn solve<T: Real>(a: &Array2<T>, b: &[T]) -> Result<Vec<T>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(LinalgError::Shape);
    }
    let mut m = a.clone();
    let mut x: Vec<T> = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[[col, col]].abs();
        for r in (col + 1)..n {
            let v = m[[r, col]].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == T::zero() || !best.is_finite() {
            return Err(LinalgError::Singular);
        }
        if piv != col {
            for c in 0..n {
                let tmp = m[[col, c]];
                m[[col, c]] = m[[piv, c]];
                m[[piv, c]] = tmp;
            }
            x.swap(col, piv);
        }
        let d = m[[col, col]];
        for r in (col + 1)..n {
            let f = m[[r, col]] / d;
            if f == T::zero() {
                continue;
            }
            for c in col..n {
                let v = m[[col, c]];
                m[[r, c]] = m[[r, c]] - f * v;
            }
            x[r] = x[r] - f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for c in (col + 1)..n {
            s = s - m[[col, c]] * x[c];
        }
        x[col] = s / m[[col, col]];
    }
    Ok(x)
}

/// Matrix inverse via column-by-column solves. Intended for the small
/// (≤ 7×7) covariance matrices of the fitter.
pub fn inverse<T: Real>(a: &Array2<T>) -> Result<Array2<T>, LinalgError> {
    let n = a.nrows();
    let mut inv = Array2::<T>::zeros((n, n));
    let mut e = vec![T::zero(); n];
    for col in 0..n {
        e[col] = T::one();
        let x = solve(a, &e)?;
        for r in 0..n {
            inv[[r, col]] = x[r];
        }
        e[col] = T::zero();
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigh_diagonal() {
        let a = Array2::from_diag(&Array1::from(vec![3.0_f64, -1.0, 2.0]));
        let (vals, _) = eigh(&a).unwrap();
        assert_relative_eq!(vals[0], -1.0, max_relative = 1e-14);
        assert_relative_eq!(vals[1], 2.0, max_relative = 1e-14);
        assert_relative_eq!(vals[2], 3.0, max_relative = 1e-14);
    }

    #[test]
    fn eigh_known_2x2() {
        // [[2, 1], [1, 2]] has eigenvalues 1 and 3
        let mut a = Array2::<f64>::zeros((2, 2));
        a[[0, 0]] = 2.0;
        a[[1, 1]] = 2.0;
        a[[1, 0]] = 1.0;
        a[[0, 1]] = 1.0;
        let (vals, vecs) = eigh(&a).unwrap();
        assert_relative_eq!(vals[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(vals[1], 3.0, epsilon = 1e-14);
        // residual ‖A v − λ v‖
        for k in 0..2 {
            for i in 0..2 {
                let av: f64 = (0..2).map(|j| a[[i, j]] * vecs[[j, k]]).sum();
                assert_relative_eq!(av, vals[k] * vecs[[i, k]], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn eigh_residual_random_symmetric() {
        // fixed arbitrary symmetric matrix, n = 12
        let n = 12;
        let mut a = Array2::<f64>::zeros((n, n));
        let mut s = 1234567u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for i in 0..n {
            for j in 0..=i {
                let v = next();
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        let (vals, vecs) = eigh(&a).unwrap();
        for k in 0..n {
            for i in 0..n {
                let av: f64 = (0..n).map(|j| a[[i, j]] * vecs[[j, k]]).sum();
                assert!((av - vals[k] * vecs[[i, k]]).abs() < 1e-12);
            }
        }
        // eigenvalues ascending
        for k in 1..n {
            assert!(vals[k] >= vals[k - 1]);
        }
    }

    #[test]
    fn solve_known_system() {
        let mut a = Array2::<f64>::zeros((3, 3));
        let rows = [[2.0, 1.0, -1.0], [-3.0, -1.0, 2.0], [-2.0, 1.0, 2.0]];
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                a[[i, j]] = v;
            }
        }
        let x = solve(&a, &[8.0, -11.0, -3.0]).unwrap();
        assert_relative_eq!(x[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 3.0, epsilon = 1e-12);
        assert_relative_eq!(x[2], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn solve_singular_is_error() {
        let mut a = Array2::<f64>::zeros((2, 2));
        a[[0, 0]] = 1.0;
        a[[0, 1]] = 2.0;
        a[[1, 0]] = 2.0;
        a[[1, 1]] = 4.0;
        assert_eq!(solve(&a, &[1.0, 2.0]), Err(LinalgError::Singular));
    }

    #[test]
    fn inverse_round_trip() {
        let mut a = Array2::<f64>::zeros((3, 3));
        let rows = [[4.0, 1.0, 0.0], [1.0, 3.0, -1.0], [0.0, -1.0, 2.0]];
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                a[[i, j]] = v;
            }
        }
        let inv = inverse(&a).unwrap();
        let prod = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eigh_f32_smoke() {
        let mut a = Array2::<f32>::zeros((2, 2));
        a[[0, 0]] = 2.0;
        a[[1, 1]] = 2.0;
        a[[1, 0]] = 1.0;
        a[[0, 1]] = 1.0;
        let (vals, _) = eigh(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-5);
        assert!((vals[1] - 3.0).abs() < 1e-5);
    }
}
