//! Small dense symmetric linear algebra on row-major `f64` buffers.

use super::MetricsError;

/// Off-diagonal Frobenius norm below which Jacobi iteration stops, relative
/// to the matrix norm (absolute for the zero matrix).
pub const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
/// `vectors[k]` is the unit eigenvector for `values[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

fn off_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition. The input is symmetrized first so tiny
/// asymmetries from floating-point accumulation do not matter.
pub fn sym_eigen(a: &[f64], n: usize) -> Result<SymEigen, MetricsError> {
    if a.len() != n * n {
        return Err(MetricsError::Shape(format!("expected {n}x{n} matrix, got {} values", a.len())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    // v holds eigenvectors as columns
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_TOL * norm.max(1.0);
    let mut converged = off_norm(&m, n) <= tol;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(MetricsError::NoConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&m, n) <= tol;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    Ok(SymEigen {
        values: order.iter().map(|&i| m[i * n + i]).collect(),
        vectors: order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect(),
    })
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// (numerical noise) are clamped to zero.
pub fn sqrtm_psd(a: &[f64], n: usize) -> Result<Vec<f64>, MetricsError> {
    let e = sym_eigen(a, n)?;
    let mut out = vec![0.0; n * n];
    for (lambda, u) in e.values.iter().zip(&e.vectors) {
        let r = lambda.max(0.0).sqrt();
        if r == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += r * u[i] * u[j];
            }
        }
    }
    Ok(out)
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

pub fn trace(a: &[f64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}

/// Column means and unbiased covariance of `n` rows of width `d`.
pub fn mean_cov(rows: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; d];
    for r in rows.chunks_exact(d) {
        for (m, x) in mu.iter_mut().zip(r) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut cov = vec![0.0; d * d];
    for r in rows.chunks_exact(d) {
        for i in 0..d {
            let di = r[i] - mu[i];
            for j in i..d {
                cov[i * d + j] += di * (r[j] - mu[j]);
            }
        }
    }
    let denom = n.saturating_sub(1).max(1) as f64;
    for i in 0..d {
        for j in i..d {
            let c = cov[i * d + j] / denom;
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }
    (mu, cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_is_already_converged() {
        let e = sym_eigen(&[1.0, 0.0, 0.0, 3.0], 2).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(e.vectors[0], vec![0.0, 1.0]);
    }

    #[test]
    fn two_by_two_by_hand() {
        // [[2,1],[1,2]] has eigenpairs 3 ↦ (1,1)/√2 and 1 ↦ (1,−1)/√2
        let e = sym_eigen(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12 && (e.values[1] - 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[0][0].abs() - h).abs() < 1e-12);
        assert!((e.vectors[0][0] - e.vectors[0][1]).abs() < 1e-12);
    }

    #[test]
    fn sqrt_of_diagonal() {
        let s = sqrtm_psd(&[4.0, 0.0, 0.0, 9.0], 2).unwrap();
        assert_eq!(s, vec![2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn negative_eigenvalues_are_clamped() {
        let s = sqrtm_psd(&[-1e-12, 0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(s, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn unbiased_covariance() {
        // rows (0,0), (2,0), (0,1): mean (2/3, 1/3)
        let (mu, cov) = mean_cov(&[0.0, 0.0, 2.0, 0.0, 0.0, 1.0], 3, 2);
        assert!((mu[0] - 2.0 / 3.0).abs() < 1e-15 && (mu[1] - 1.0 / 3.0).abs() < 1e-15);
        // Σ(x−x̄)² = 4/9+16/9+4/9 = 24/9, over n−1 = 2
        assert!((cov[0] - 4.0 / 3.0).abs() < 1e-12);
        // Σ(x−x̄)(y−ȳ) = (−2/3)(−1/3)+(4/3)(−1/3)+(−2/3)(2/3) = −6/9
        assert!((cov[1] + 1.0 / 3.0).abs() < 1e-12);
        assert!((cov[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(sym_eigen(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(sym_eigen(&[f64::NAN, 0.0, 0.0, 1.0], 2).is_err());
    }
}
