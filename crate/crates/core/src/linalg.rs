//! Small dense helpers on top of nalgebra.

use nalgebra::{Matrix2, Matrix3, Matrix4, SymmetricEigen, Vector4};

use crate::error::{Error, Result};

pub(crate) fn symmetrize3(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn symmetrize2(m: &Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric square root of a positive semidefinite matrix; negative
/// eigenvalues from round-off are clamped to zero.
pub(crate) fn psd_sqrt3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(symmetrize3(m));
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub(crate) fn psd_sqrt2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(symmetrize2(m));
    let d = Matrix2::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub(crate) fn inverse2(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    m.try_inverse()
        .ok_or_else(|| Error::Singular("2x2 matrix is not invertible".into()))
}

/// Solves A P + P Aᵀ + Q = 0 through the Kronecker form.
pub fn lyapunov2(a: &Matrix2<f64>, q: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    // vec is column-major: vec(A P) = (I⊗A) vec P, vec(P Aᵀ) = (A⊗I) vec P
    let mut k = Matrix4::<f64>::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for r in 0..2 {
                for c in 0..2 {
                    let row = j * 2 + i;
                    // (I⊗A): P[r, j] contributes A[i, r] when j matches
                    if c == j {
                        k[(row, c * 2 + r)] += a[(i, r)];
                    }
                    // (A⊗I): P[i, c] contributes A[j, c]
                    if r == i {
                        k[(row, c * 2 + r)] += a[(j, c)];
                    }
                }
            }
        }
    }
    let rhs = -Vector4::new(q[(0, 0)], q[(1, 0)], q[(0, 1)], q[(1, 1)]);
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Lyapunov operator is singular".into()))?;
    Ok(symmetrize2(&Matrix2::new(sol[0], sol[2], sol[1], sol[3])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lyapunov_residual_vanishes() {
        let a = Matrix2::new(0.0, 1760.0, -1760.0, -7.0);
        let q = Matrix2::new(0.0, 0.0, 0.0, 2.5e7);
        let p = lyapunov2(&a, &q).unwrap();
        let r = a * p + p * a.transpose() + q;
        assert!(r.abs().max() < 1e-6 * q.abs().max());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = Matrix3::new(4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0);
        let s = psd_sqrt3(&m);
        assert!((s * s - m).abs().max() < 1e-12);
        let z = psd_sqrt3(&Matrix3::zeros());
        assert_eq!(z, Matrix3::zeros());
    }
}
