//! Truncated SVD projection of embedding tables.
//!
//! The right singular vectors of a `|V| x d` table are the eigenvectors of
//! its `d x d` Gram matrix, found with a cyclic Jacobi solver. The
//! projected table is `W * basis`, i.e. the `U_k * S_k` coordinates of each row
//! in the retained subspace, which keeps inner products exact there.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;
const REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `|V| x k` row coordinates.
    pub projected: Tensor<f64>,
    /// `d x k` orthonormal right singular vectors.
    pub basis: Tensor<f64>,
    /// All `d` singular values, nonincreasing.
    pub singular_values: Vec<f64>,
    /// Sum of squares of the discarded singular values.
    pub residual: f64,
}

/// Eigen-decomposition of a symmetric `n x n` row-major matrix.
///
/// Returns eigenvalues and the eigenvector matrix (eigenvectors in columns),
/// unsorted.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) > REL_TOL * norm {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "Jacobi eigensolver did not converge after {sweeps} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| a[i * n + i]).collect(), v))
}

/// Project the rows of `w` (`|V| x d`) onto its top `k` right singular
/// vectors.
///
/// Each basis column is signed so that its largest-magnitude entry is
/// positive (the first such entry on ties).
pub fn svd_project<T: Real>(w: &Tensor<T>, k: usize) -> Result<SvdResult> {
    if w.rank() != 2 {
        return Err(Error::contract(format!(
            "svd_project needs a matrix, got shape {:?}",
            w.shape()
        )));
    }
    let (rows, d) = (w.shape()[0], w.shape()[1]);
    if k == 0 || k > d || rows == 0 {
        return Err(Error::contract(format!(
            "svd_project needs a nonempty table and 1 <= k <= d, got k={k}, shape {:?}",
            w.shape()
        )));
    }
    if !w.all_finite() {
        return Err(Error::Numeric("embedding table has non-finite entries".into()));
    }
    let x = w.to_f64_vec();
    let mut gram = vec![0.0; d * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        for i in 0..d {
            let ri = row[i];
            for j in i..d {
                gram[i * d + j] += ri * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[i * d + j] = gram[j * d + i];
        }
    }
    let (vals, vecs) = jacobi_eigen(gram, d)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));

    let mut basis = vec![0.0; d * k];
    for (c, &src) in order.iter().take(k).enumerate() {
        let col: Vec<f64> = (0..d).map(|i| vecs[i * d + src]).collect();
        let lead = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[i * k + c] = sign * col[i];
        }
    }
    let mut projected = vec![0.0; rows * k];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let out = &mut projected[r * k..(r + 1) * k];
        for (i, &ri) in row.iter().enumerate() {
            for c in 0..k {
                out[c] += ri * basis[i * k + c];
            }
        }
    }
    let eig: Vec<f64> = order.iter().map(|&i| vals[i].max(0.0)).collect();
    Ok(SvdResult {
        projected: Tensor::new(vec![rows, k], projected)?,
        basis: Tensor::new(vec![d, k], basis)?,
        singular_values: eig.iter().map(|l| l.sqrt()).collect(),
        residual: eig[k..].iter().sum(),
    })
}

/// Projected table only, in the caller's precision.
pub fn adapt_embeddings<T: Real>(table: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    Ok(svd_project(table, k)?.projected.cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_rank_two() {
        let mut w = Tensor::<f64>::zeros(&[4, 4]);
        w.data_mut()[0] = 3.0;
        w.data_mut()[5] = 2.0;
        let r = svd_project(&w, 2).unwrap();
        assert_eq!(r.residual, 0.0);
        assert_eq!(&r.singular_values[..2], &[3.0, 2.0]);
        let norms: Vec<f64> = (0..4)
            .map(|i| r.projected.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        assert_eq!(norms, [3.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn range_checks() {
        let w = Tensor::<f64>::zeros(&[3, 4]);
        assert!(matches!(svd_project(&w, 5), Err(Error::Contract(_))));
        let w = Tensor::<f64>::zeros(&[5, 4]);
        assert!(svd_project(&w, 0).is_err());
        assert!(svd_project(&w, 5).is_err());
        let mut w = Tensor::<f64>::zeros(&[5, 4]);
        w.data_mut()[3] = f64::NAN;
        assert!(matches!(svd_project(&w, 2), Err(Error::Numeric(_))));
    }

    #[test]
    fn sign_convention() {
        let w = Tensor::<f64>::from_f64(&[3, 2], &[-1.0, 0.0, 0.0, -2.0, 0.0, 0.0]).unwrap();
        let r = svd_project(&w, 2).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..2).map(|i| r.basis.data()[i * 2 + c]).collect();
            let lead = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn adapt_keeps_shape() {
        let w = Tensor::<f32>::from_fn(&[7, 4], |i| ((i * 7 % 5) as f32) - 2.0);
        assert_eq!(adapt_embeddings(&w, 3).unwrap().shape(), [7, 3]);
    }
}
