//! Cyclic Jacobi eigen-solver for small symmetric matrices.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 50;

/// Eigenvalues and column eigenvectors of a symmetric `N×N` matrix.
///
/// Only the upper triangle is trusted to be consistent with the lower one;
/// callers check symmetry.
pub fn symmetric_eigen<const N: usize>(
    a: &SMatrix<f64, N, N>,
) -> Result<(SVector<f64, N>, SMatrix<f64, N, N>)> {
    let mut m = *a;
    let mut v = SMatrix::<f64, N, N>::identity();
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("non-finite entry in eigen-solver input".into()));
    }
    let scale = m.norm();
    if scale == 0.0 {
        return Ok((SVector::zeros(), v));
    }
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..N {
            for q in p + 1..N {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= f64::EPSILON * scale {
            let values = SVector::<f64, N>::from_fn(|i, _| m[(i, i)]);
            return Ok((values, v));
        }
        for p in 0..N {
            for q in p + 1..N {
                let apq = m[(p, q)];
                let g = 100.0 * apq.abs();
                let negligible = (m[(p, p)].abs() + g == m[(p, p)].abs()
                    && m[(q, q)].abs() + g == m[(q, q)].abs())
                    || apq.abs() <= f64::EPSILON * scale;
                if negligible {
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J the (p, q) plane rotation.
                for k in 0..N {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..N {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..N {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi eigen-solver did not converge in {MAX_SWEEPS} sweeps"
    )))
}
