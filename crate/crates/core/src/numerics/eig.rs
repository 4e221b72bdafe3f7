//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::Matrix;
use crate::error::{ensure, Error, Result};

pub const MAX_SWEEPS: usize = 100;
/// Convergence threshold on the off-diagonal Frobenius norm, relative to ‖S‖_F.
pub const OFF_DIAGONAL_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector paired with `eigenvalues[j]`.
    pub eigenvectors: Matrix<f64>,
}

fn off_diagonal_norm(a: &Matrix<f64>) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// Eigenvalues and eigenvectors of a symmetric matrix.
///
/// Eigenvalues come back descending; equal eigenvalues keep the order in which
/// the rotations left them. Each eigenvector is sign-fixed so its first
/// non-negligible component is positive.
pub fn sym_eig(s: &Matrix<f64>) -> Result<EigenResult> {
    let n = s.rows();
    ensure!(n == s.cols(), "sym_eig needs a square matrix, got {}x{}", n, s.cols());
    ensure!(s.is_finite(), "sym_eig input has non-finite entries");
    let scale = s.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (s.get(i, j) - s.get(j, i)).abs();
            ensure!(
                gap <= SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE),
                "sym_eig input not symmetric at ({i},{j}): gap {gap:e}"
            );
        }
    }

    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (s.get(i, j) + s.get(j, i)));
    let mut v = Matrix::<f64>::identity(n);
    let target = OFF_DIAGONAL_TOL * a.frobenius();

    let mut converged = off_diagonal_norm(&a) <= target;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                rotate(&mut a, &mut v, p, q, c, sn);
            }
        }
        converged = off_diagonal_norm(&a) <= target;
    }
    if !converged {
        return Err(Error::Convergence {
            sweeps,
            residual: off_diagonal_norm(&a),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let eigenvalues = order.iter().map(|&i| a.get(i, i)).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = v.column(src);
        let sign = col
            .iter()
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, |x| x.signum());
        for (r, x) in col.iter().enumerate() {
            eigenvectors.set(r, dst, sign * x);
        }
    }
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
    })
}

// A ← JᵀAJ, V ← VJ for the plane rotation in (p, q).
fn rotate(a: &mut Matrix<f64>, v: &mut Matrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let (akp, akq) = (a.get(k, p), a.get(k, q));
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let (apk, aqk) = (a.get(p, k), a.get(q, k));
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let (vkp, vkq) = (v.get(k, p), v.get(k, q));
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}
