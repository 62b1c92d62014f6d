//! Exact and approximate statistical leverage scores.
//!
//! The leverage of row `i` is `‖Uᵢ‖²`, where `U` is an orthonormal basis for the
//! column space of `K`. Rather than taking an `N×d` SVD, the basis is recovered from
//! the small Gram matrix: if `KᵀK = V Σ² Vᵀ` then `U = K V Σ⁻¹`, which costs one
//! `d×d` decomposition and two GEMMs. Approximate scores apply the same recipe to a
//! right sketch `K̂ = K·Φ`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::kvstore::{ScoreKind, ScoreVector};
use crate::sketch::{apply_sketch, SketchSpec};
use crate::{Error, Result};

/// Default relative floor on singular values.
pub const DEFAULT_SIGMA_CLAMP: f64 = 1e-6;

/// Relative reconstruction error above which a Gram SVD is rejected.
const GRAM_SVD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// SVD of the Gram matrix `K̂ᵀK̂`.
    SvdGram,
    /// Column-pivoted reduced QR of `K̂`.
    Qr,
    /// Symmetric eigendecomposition of the Gram matrix.
    EigGram,
}

/// How the orthonormal row basis is computed.
///
/// Directions whose singular value falls below `sigma_clamp · σ_max` are treated as
/// numerically absent: they are excluded from the basis and from the effective rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisMethod {
    pub kind: BasisKind,
    pub sigma_clamp: f64,
}

impl Default for BasisMethod {
    fn default() -> Self {
        Self::new(BasisKind::SvdGram)
    }
}

impl BasisMethod {
    pub fn new(kind: BasisKind) -> Self {
        Self {
            kind,
            sigma_clamp: DEFAULT_SIGMA_CLAMP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_clamp > 0.0 && self.sigma_clamp < 1.0 {
            Ok(())
        } else {
            Err(Error::param(format!(
                "sigma_clamp {} not in (0, 1)",
                self.sigma_clamp
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeverageResult {
    pub scores: ScoreVector,
    pub effective_rank: usize,
    pub method: BasisMethod,
    pub sketch: SketchSpec,
}

/// Orthonormal basis `U` (`N×rank`) for the column space of `khat`.
pub fn row_basis(khat: &DMatrix<f64>, method: &BasisMethod) -> DMatrix<f64> {
    match method.kind {
        BasisKind::Qr => qr_basis(khat, method.sigma_clamp),
        BasisKind::SvdGram | BasisKind::EigGram => {
            let mixing = gram_mixing(khat, method);
            khat * mixing
        }
    }
}

/// `V Σ⁻¹` restricted to the retained directions, from the Gram matrix of `khat`.
fn gram_mixing(khat: &DMatrix<f64>, method: &BasisMethod) -> DMatrix<f64> {
    let k = khat.ncols();
    let gram = khat.tr_mul(khat);
    let (vecs, eigvals) = match method.kind {
        BasisKind::EigGram => {
            let eig = gram.symmetric_eigen();
            (eig.eigenvectors, eig.eigenvalues)
        }
        _ => {
            // For a symmetric PSD matrix the left singular vectors are its eigenvectors.
            // nalgebra's SVD occasionally returns an inaccurate factorization of
            // rank-deficient Gram matrices; those fall back to the eigensolver.
            let svd = gram.clone().svd(true, true);
            let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
            let recon = &u * DMatrix::from_diagonal(&svd.singular_values) * v_t;
            if (recon - &gram).amax() <= GRAM_SVD_TOL * gram.amax() {
                (u, svd.singular_values)
            } else {
                let eig = gram.symmetric_eigen();
                (eig.eigenvectors, eig.eigenvalues)
            }
        }
    };
    let sigmas: Vec<f64> = eigvals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let sigma_max = sigmas.iter().copied().fold(0.0, f64::max);
    let floor = method.sigma_clamp * sigma_max;
    let keep: Vec<usize> = (0..k)
        .filter(|&j| sigma_max > 0.0 && sigmas[j] > floor)
        .collect();
    let mut mixing = DMatrix::zeros(k, keep.len());
    for (c, &j) in keep.iter().enumerate() {
        let inv = 1.0 / sigmas[j];
        mixing.set_column(c, &(vecs.column(j) * inv));
    }
    mixing
}

fn qr_basis(khat: &DMatrix<f64>, clamp: f64) -> DMatrix<f64> {
    let (n, k) = khat.shape();
    let m = n.min(k);
    if m == 0 {
        return DMatrix::zeros(n, 0);
    }
    // Pivoting orders |R_jj| decreasingly, so the leading columns of Q span the
    // numerically significant part of the column space.
    let qr = khat.clone().col_piv_qr();
    let r = qr.r();
    let diag_max = r[(0, 0)].abs();
    let rank = (0..m)
        .take_while(|&j| diag_max > 0.0 && r[(j, j)].abs() > clamp * diag_max)
        .count();
    qr.q().columns(0, rank).into_owned()
}

/// Squared Euclidean norm of each row.
pub(crate) fn row_norms_sq(u: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; u.nrows()];
    for col in u.column_iter() {
        for (o, v) in out.iter_mut().zip(col.iter()) {
            *o += v * v;
        }
    }
    out
}

fn check_finite(k: &DMatrix<f64>) -> Result<()> {
    if k.nrows() == 0 || k.ncols() == 0 {
        return Err(Error::Data("leverage input must be at least 1x1".into()));
    }
    if k.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Data("non-finite entry in key matrix".into()))
    }
}

/// Exact leverage scores via the Gram identity.
///
/// An all-zero matrix yields all-zero scores and rank 0.
pub fn exact_leverage(k: &DMatrix<f64>) -> Result<LeverageResult> {
    approx_leverage(k, &SketchSpec::none(), &BasisMethod::default())
}

/// Leverage scores of the sketched matrix `K·Φ`.
pub fn approx_leverage(
    k: &DMatrix<f64>,
    sketch: &SketchSpec,
    method: &BasisMethod,
) -> Result<LeverageResult> {
    check_finite(k)?;
    method.validate()?;
    let khat = apply_sketch(k, sketch)?;
    let basis = row_basis(&khat, method);
    let effective_rank = basis.ncols();
    let scores = row_norms_sq(&basis);
    Ok(LeverageResult {
        scores: ScoreVector::new(scores, ScoreKind::Outlier),
        effective_rank,
        method: *method,
        sketch: *sketch,
    })
}
