//! Frechet distance between Gaussian moment summaries:
//! `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`,
//! with matrix square roots via symmetric (Jacobi) eigendecomposition and
//! eigenvalues floored at zero.

use crate::metrics::features::FeatureEmbedding;
use crate::{Error, Result};

/// Mean and covariance of a feature set.
#[derive(Clone, Debug)]
pub struct MomentSummary {
    pub mean: Vec<f64>,
    /// Row-major d x d symmetric matrix.
    pub cov: Vec<Vec<f64>>,
}

/// Sample mean and unbiased covariance of an embedding.
pub fn moments(e: &FeatureEmbedding) -> Result<MomentSummary> {
    let n = e.vectors.len();
    if n < 2 {
        return Err(Error::InvalidRange(
            "need at least 2 vectors for a covariance".into(),
        ));
    }
    let d = e.dim;
    let mut mean = vec![0.0; d];
    for v in &e.vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for v in &e.vectors {
        for i in 0..d {
            let di = v[i] - mean[i];
            for j in i..d {
                cov[i][j] += di * (v[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    Ok(MomentSummary { mean, cov })
}

const SYM_TOL: f64 = 1e-10;

fn check_summary(s: &MomentSummary) -> Result<()> {
    let d = s.mean.len();
    if s.cov.len() != d || s.cov.iter().any(|r| r.len() != d) {
        return Err(Error::Format("covariance shape mismatch".into()));
    }
    let scale = s
        .cov
        .iter()
        .flat_map(|r| r.iter())
        .fold(1.0f64, |a, &v| a.max(v.abs()));
    for i in 0..d {
        for j in 0..d {
            if (s.cov[i][j] - s.cov[j][i]).abs() > SYM_TOL * scale {
                return Err(Error::Format(format!(
                    "covariance not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(1.0f64, |acc, &x| acc.max(x.abs()));
    let tol = 1e-14 * scale;
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in i + 1..d {
                off = off.max(m[i][j].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if m[p][q].abs() <= tol {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..d).map(|i| m[i][i]).collect();
    (eigenvalues, v)
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = a.len();
    let mut out = vec![vec![0.0; d]; d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition with flooring.
fn sqrt_psd(a: &[Vec<f64>], psd_tol: f64) -> Result<Vec<Vec<f64>>> {
    let d = a.len();
    let (eig, vecs) = jacobi_eigen(a);
    let scale = eig.iter().fold(1.0f64, |acc, &x| acc.max(x.abs()));
    for &l in &eig {
        if l < -psd_tol * scale {
            return Err(Error::NotPsd(l));
        }
    }
    // V * sqrt(L) * V^T
    let mut scaled = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            scaled[i][j] = vecs[i][j] * eig[j].max(0.0).sqrt();
        }
    }
    let vt: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| vecs[j][i]).collect()).collect();
    Ok(matmul(&scaled, &vt))
}

const PSD_TOL: f64 = 1e-8;

/// Frechet distance between two Gaussian moment summaries.
pub fn frechet_distance(a: &MomentSummary, b: &MomentSummary) -> Result<f64> {
    check_summary(a)?;
    check_summary(b)?;
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimMismatch(a.mean.len(), b.mean.len()));
    }
    let d = a.mean.len();
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let trace = |m: &[Vec<f64>]| (0..d).map(|i| m[i][i]).sum::<f64>();
    let sqrt_a = sqrt_psd(&a.cov, PSD_TOL)?;
    // M = Sa^1/2 Sb Sa^1/2 is symmetric PSD; only its eigenvalues matter.
    let m = matmul(&matmul(&sqrt_a, &b.cov), &sqrt_a);
    // Symmetrize against rounding before the eigen solve.
    let mut m_sym = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            m_sym[i][j] = 0.5 * (m[i][j] + m[j][i]);
        }
    }
    let (eig_m, _) = jacobi_eigen(&m_sym);
    let cross: f64 = eig_m.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let value = mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * cross;
    // Clamp tiny negative rounding residue.
    Ok(value.max(0.0))
}
