//! CCA-family and CKA similarity measures on representation matrices.

use nalgebra::DMatrix;

use crate::ndgrad::NdError;

/// Ridge added to covariance diagonals on the degenerate path.
pub const CCA_RIDGE: f64 = 1e-3;

/// Fraction of squared singular mass SVCCA keeps before comparing.
pub const SVCCA_VARIANCE_KEEP: f64 = 0.99;

/// Subtract each column's mean.
pub fn center_columns(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    let mut out = z.clone();
    for c in 0..z.ncols() {
        let mean = z.column(c).sum() / n as f64;
        for r in 0..n {
            out[(r, c)] -= mean;
        }
    }
    out
}

fn check_finite(name: &str, z: &DMatrix<f64>) -> Result<(), NdError> {
    if z.nrows() == 0 || z.ncols() == 0 {
        return Err(NdError::Invalid(format!("{name} must be non-empty")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(NdError::Invalid(format!("{name} contains non-finite entries")));
    }
    Ok(())
}

/// A whitened copy of a centered matrix: columns form an (approximately)
/// orthonormal basis of the column space, so canonical correlations between
/// two representations are the singular values of `Ya^T * Yb`.
struct Whitened {
    y: DMatrix<f64>,
    /// True when the exact QR path was unusable (n <= d or rank-deficient)
    /// and the ridge fallback was taken.
    degenerate: bool,
}

fn whiten(centered: &DMatrix<f64>) -> Whitened {
    let (n, d) = (centered.nrows(), centered.ncols());
    if n > d {
        let qr = centered.clone().qr();
        let r = qr.r();
        let max_diag = (0..d).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
        let tol = max_diag * 1e-12 * n.max(d) as f64;
        let full_rank = max_diag > 0.0 && (0..d).all(|k| r[(k, k)].abs() > tol);
        if full_rank {
            return Whitened { y: qr.q(), degenerate: false };
        }
    }
    // Ridge fallback: Y = Zc * (Sigma + eps I)^(-1/2) / sqrt(n-1).
    let denom = (n.max(2) - 1) as f64;
    let mut cov = centered.transpose() * centered / denom;
    for k in 0..d {
        cov[(k, k)] += CCA_RIDGE;
    }
    let inv_sqrt = sym_inv_sqrt(&cov);
    let y = centered * inv_sqrt / denom.sqrt();
    Whitened { y, degenerate: true }
}

/// (A)^(-1/2) for a symmetric positive-definite matrix.
fn sym_inv_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let d = a.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(f64::MIN_POSITIVE);
        let f = 1.0 / lam.sqrt();
        for r in 0..d {
            scaled[(r, k)] *= f;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Outcome of a CCA-family measure.
#[derive(Debug, Clone, Copy)]
pub struct CcaOutcome {
    pub value: f64,
    pub degenerate: bool,
}

/// Mean canonical correlation: (1/d) * nuclear norm of Q_zj^T Q_zi with Q
/// from reduced QR of the column-centered matrices. Falls back to
/// ridge-regularized covariance whitening when a matrix is rank deficient or
/// has n <= d, and flags that.
pub fn cca_measure(zi: &DMatrix<f64>, zj: &DMatrix<f64>) -> Result<CcaOutcome, NdError> {
    check_finite("Zi", zi)?;
    check_finite("Zj", zj)?;
    if zi.nrows() != zj.nrows() {
        return Err(NdError::Invalid(format!(
            "sample counts differ: {} vs {}",
            zi.nrows(),
            zj.nrows()
        )));
    }
    let wi = whiten(&center_columns(zi));
    let wj = whiten(&center_columns(zj));
    let m = wj.y.transpose() * &wi.y;
    let sv = m.svd(false, false).singular_values;
    let d = zi.ncols().min(zj.ncols());
    let value = sv.iter().sum::<f64>() / d as f64;
    Ok(CcaOutcome { value, degenerate: wi.degenerate || wj.degenerate })
}

/// Linear CKA on column-centered matrices:
/// ||Zj^T Zi||_F^2 / (||Zi^T Zi||_F * ||Zj^T Zj||_F).
/// Returns NaN when either matrix is identically zero after centering.
pub fn cka_linear(zi: &DMatrix<f64>, zj: &DMatrix<f64>) -> Result<f64, NdError> {
    check_finite("Zi", zi)?;
    check_finite("Zj", zj)?;
    if zi.nrows() != zj.nrows() {
        return Err(NdError::Invalid(format!(
            "sample counts differ: {} vs {}",
            zi.nrows(),
            zj.nrows()
        )));
    }
    let ci = center_columns(zi);
    let cj = center_columns(zj);
    let cross = cj.transpose() * &ci;
    let gi = ci.transpose() * &ci;
    let gj = cj.transpose() * &cj;
    let num = cross.iter().map(|v| v * v).sum::<f64>();
    let ni = gi.iter().map(|v| v * v).sum::<f64>();
    let nj = gj.iter().map(|v| v * v).sum::<f64>();
    // Single square root so CKA(Z, Z) is exactly 1: sqrt(x*x) recovers x,
    // while sqrt(x)*sqrt(x) may not.
    let den = (ni * nj).sqrt();
    if den == 0.0 {
        return Ok(f64::NAN);
    }
    Ok(num / den)
}

/// Project a centered matrix onto its top singular directions keeping at
/// least `keep` of the squared singular mass (always at least one).
fn svcca_project(centered: &DMatrix<f64>, keep: f64) -> DMatrix<f64> {
    let svd = centered.clone().svd(false, true);
    let sv = &svd.singular_values;
    let v_t = svd.v_t.expect("svd with v requested");
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut rank = 1;
    if total > 0.0 {
        let mut cum = 0.0;
        for (k, s) in sv.iter().enumerate() {
            cum += s * s;
            if cum / total >= keep {
                rank = k + 1;
                break;
            }
            rank = k + 1;
        }
    }
    let v_keep = v_t.rows(0, rank).transpose();
    centered * v_keep
}

/// SVCCA: SVD-truncate each centered matrix to `variance_keep` squared
/// singular mass, then run the CCA measure on the projections.
pub fn svcca(zi: &DMatrix<f64>, zj: &DMatrix<f64>, variance_keep: f64) -> Result<CcaOutcome, NdError> {
    if !(0.0..=1.0).contains(&variance_keep) || variance_keep <= 0.0 {
        return Err(NdError::Invalid(format!("variance_keep must be in (0, 1], got {variance_keep}")));
    }
    check_finite("Zi", zi)?;
    check_finite("Zj", zj)?;
    let pi = svcca_project(&center_columns(zi), variance_keep);
    let pj = svcca_project(&center_columns(zj), variance_keep);
    cca_measure(&pi, &pj)
}

/// PWCCA internals: the measure plus the projection weights and canonical
/// correlations it combined.
#[derive(Debug, Clone)]
pub struct PwccaDetail {
    pub value: f64,
    pub weights: Vec<f64>,
    pub correlations: Vec<f64>,
    pub degenerate: bool,
}

/// Projection-weighted CCA, oriented: canonical directions come from `zi`,
/// and each correlation rho_k is weighted by how much of Zi's data mass its
/// canonical variable h_k explains: alpha_k ∝ sum_c |<h_k, Zi[:,c]>|.
pub fn pwcca(zi: &DMatrix<f64>, zj: &DMatrix<f64>) -> Result<PwccaDetail, NdError> {
    check_finite("Zi", zi)?;
    check_finite("Zj", zj)?;
    if zi.nrows() != zj.nrows() {
        return Err(NdError::Invalid(format!(
            "sample counts differ: {} vs {}",
            zi.nrows(),
            zj.nrows()
        )));
    }
    let ci = center_columns(zi);
    let cj = center_columns(zj);
    let wi = whiten(&ci);
    let wj = whiten(&cj);
    let m = wj.y.transpose() * &wi.y;
    let svd = m.svd(false, true);
    let rho: Vec<f64> = svd.singular_values.iter().copied().collect();
    let v_t = svd.v_t.expect("svd with v requested");
    // Canonical variables of Zi: h_k = Y_i * v_k.
    let h = &wi.y * v_t.transpose();
    // Data-mass weights: |H^T * Ci| row sums.
    let proj = h.transpose() * &ci;
    let mut weights: Vec<f64> = (0..rho.len())
        .map(|k| proj.row(k).iter().map(|v| v.abs()).sum::<f64>())
        .collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    } else {
        // Zero data mass: fall back to uniform weights.
        let u = 1.0 / weights.len() as f64;
        weights.iter_mut().for_each(|w| *w = u);
    }
    let value = weights.iter().zip(&rho).map(|(w, r)| w * r).sum();
    Ok(PwccaDetail { value, weights, correlations: rho, degenerate: wi.degenerate || wj.degenerate })
}

/// Brute-force mean canonical correlation for cross-checking `cca_measure`:
/// eigendecompose the covariances directly, form
/// T = Sii^(-1/2) Sij Sjj^(-1/2), and read singular values off the
/// eigenvalues of T T^T. Intended for small, full-rank problems (d <= 4,
/// n <= 50).
pub fn cca_oracle(zi: &DMatrix<f64>, zj: &DMatrix<f64>) -> Result<f64, NdError> {
    check_finite("Zi", zi)?;
    check_finite("Zj", zj)?;
    let n = zi.nrows();
    if zj.nrows() != n {
        return Err(NdError::Invalid("sample counts differ".into()));
    }
    let ci = center_columns(zi);
    let cj = center_columns(zj);
    let denom = (n - 1) as f64;
    let sii = ci.transpose() * &ci / denom;
    let sjj = cj.transpose() * &cj / denom;
    let sij = ci.transpose() * &cj / denom;
    let t = sym_inv_sqrt(&sii) * sij * sym_inv_sqrt(&sjj);
    let gram = &t * t.transpose();
    let eig = gram.symmetric_eigen();
    let sum: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok(sum / zi.ncols().min(zj.ncols()) as f64)
}

/// Zero-mean orthonormal columns, handy for constructing exact test cases.
pub fn orthonormal_centered_columns(n: usize, count: usize, seed: u64) -> DMatrix<f64> {
    use rand::Rng;
    let mut rng = crate::rng::seeded(seed, crate::rng::stream::GRADCHECK);
    assert!(count < n, "need count < n for zero-mean orthonormal columns");
    // Random columns, centered, then orthonormalized by QR.
    let raw = DMatrix::from_fn(n, count, |_, _| rng.gen_range(-1.0..1.0f64));
    let centered = center_columns(&raw);
    let q = centered.qr().q();
    // Columns of Q stay zero-mean because centering is a projection and QR
    // spans the same column space.
    q
}
