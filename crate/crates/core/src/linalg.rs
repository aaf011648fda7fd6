//! Cyclic Jacobi eigendecomposition for dense symmetric matrices.

use nalgebra::DMatrix;

pub const MAX_SWEEPS: usize = 100;
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("Jacobi did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
pub struct NoConvergence {
    pub sweeps: usize,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// In the order the rotations left them on the diagonal (unsorted).
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector for `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
    pub sweeps: usize,
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[(i, j)] * a[(i, j)];
            }
        }
    }
    sum.sqrt()
}

/// Row-cyclic Jacobi. Converged when the off-diagonal Frobenius norm is at
/// most `OFF_DIAGONAL_TOL * ||A||_F`. Only the symmetric part of `a` is
/// meaningful; callers pass symmetric input.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen, NoConvergence> {
    assert!(a.is_square(), "jacobi_eigen needs a square matrix");
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let target = OFF_DIAGONAL_TOL * a.norm();

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&m);
        if off <= target {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(NoConvergence {
                sweeps,
                residual: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    Ok(SymmetricEigen {
        eigenvalues: (0..n).map(|i| m[(i, i)]).collect(),
        eigenvectors: v,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonalizes_two_by_two() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let e = jacobi_eigen(&a).unwrap();
        let mut vals = e.eigenvalues.clone();
        vals.sort_by(f64::total_cmp);
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
        let recon = &e.eigenvectors
            * DMatrix::from_diagonal(&e.eigenvalues.clone().into())
            * e.eigenvectors.transpose();
        assert!((recon - a).norm() < 1e-14);
    }

    #[test]
    fn zero_matrix_converges_immediately() {
        let e = jacobi_eigen(&DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(e.sweeps, 0);
        assert_eq!(e.eigenvalues, vec![0.0; 4]);
    }

    #[test]
    fn random_symmetric_reconstructs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 20;
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = &b + b.transpose();
        let e = jacobi_eigen(&a).unwrap();
        let d = DMatrix::from_diagonal(&e.eigenvalues.clone().into());
        let recon = &e.eigenvectors * d * e.eigenvectors.transpose();
        assert!((recon - &a).norm() / a.norm() < 1e-12);
        let gram = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((gram - DMatrix::identity(n, n)).norm() < 1e-12);
    }
}
