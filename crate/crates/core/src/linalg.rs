//! Small dense eigen/singular-value routines (Jacobi rotations) used by the
//! metrics. Matrices are row-major `n×n` / `m×n` slices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (ascending) and the matching eigenvectors as the
/// columns of an `n×n` matrix.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let &[n, m] = a.shape() else {
        return Err(Error::dim("symmetric_eigen", a.shape(), &[0, 0]));
    };
    if n != m {
        return Err(Error::dim("symmetric_eigen", a.shape(), &[n, n]));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("symmetric_eigen input".into()));
    }
    let mut w = a.data().to_vec();
    // symmetrize
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (w[i * n + j] + w[j * n + i]);
            w[i * n + j] = s;
            w[j * n + i] = s;
        }
    }
    let mut v = Tensor::eye(n).into_data();
    let scale: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| w[i * n + j] * w[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = w[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = w[p * n + p];
                let aqq = w[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = w[k * n + p];
                    let akq = w[k * n + q];
                    w[k * n + p] = c * akp - s * akq;
                    w[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = w[p * n + k];
                    let aqk = w[q * n + k];
                    w[p * n + k] = c * apk - s * aqk;
                    w[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[i * n + i].total_cmp(&w[j * n + j]));
    let vals = order.iter().map(|&i| w[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + new] = v[k * n + old];
        }
    }
    Ok((vals, Tensor::from_parts(vec![n, n], vecs)))
}

/// Singular values (descending) of an `m×n` matrix by one-sided Jacobi.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let &[m, n] = a.shape() else {
        return Err(Error::dim("singular_values", a.shape(), &[0, 0]));
    };
    if !a.is_finite() {
        return Err(Error::NonFinite("singular_values input".into()));
    }
    // Orthogonalize the columns of the taller orientation.
    let (rows, cols, mut cm) = if m >= n {
        (m, n, column_major(a.data(), m, n))
    } else {
        let t = a.transpose2d()?;
        (n, m, column_major(t.data(), n, m))
    };
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (cp, cq) = (&cm[p * rows..(p + 1) * rows], &cm[q * rows..(q + 1) * rows]);
                let alpha: f64 = cp.iter().map(|x| x * x).sum();
                let beta: f64 = cq.iter().map(|x| x * x).sum();
                let gamma: f64 = cp.iter().zip(cq).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let x = cm[p * rows + k];
                    let y = cm[q * rows + k];
                    cm[p * rows + k] = c * x - s * y;
                    cm[q * rows + k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|p| cm[p * rows..(p + 1) * rows].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

fn column_major(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}
