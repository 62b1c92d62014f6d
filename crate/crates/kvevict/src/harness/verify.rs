use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::synth::{gaussian_matrix, random_orthonormal};
use crate::leverage::{approx_leverage, exact_leverage, BasisMethod};
use crate::sketch::SketchSpec;
use crate::{derive_seed, par, Error, Result};

/// Relative slack on the semidefinite checks, scaled by `λ_max(KᵀK)`.
const PSD_TOL: f64 = 1e-9;

/// Sample size `⌈C·d·ln(d/δ)/ε²⌉`.
pub fn spectral_sample_size(c: f64, d: usize, delta: f64, epsilon: f64) -> usize {
    (c * d as f64 * (d as f64 / delta).ln() / (epsilon * epsilon))
        .ceil()
        .max(1.0) as usize
}

/// Reweighted Gram of the sampled rows: each draw of row `i` contributes
/// `rank/(m·ℓᵢ)·kᵢkᵢᵀ` where `m = rows.len()`.
pub fn sampled_gram(
    k: &DMatrix<f64>,
    leverage: &[f64],
    rank: usize,
    rows: &[usize],
) -> DMatrix<f64> {
    let d = k.ncols();
    let mut g = DMatrix::zeros(d, d);
    let m = rows.len() as f64;
    for &i in rows {
        let w = rank as f64 / (m * leverage[i]);
        let r = k.row(i);
        g.ger(w, &r.transpose(), &r.transpose(), 1.0);
    }
    g
}

/// Smallest eigenvalues of `Ĝ − (1−ε)G` and `(1+ε)G − Ĝ`. The sandwich holds when
/// both are non-negative.
pub fn sandwich_margins(full: &DMatrix<f64>, sampled: &DMatrix<f64>, epsilon: f64) -> (f64, f64) {
    let lo = (sampled - full * (1.0 - epsilon))
        .symmetric_eigenvalues()
        .min();
    let hi = (full * (1.0 + epsilon) - sampled)
        .symmetric_eigenvalues()
        .min();
    (lo, hi)
}

/// Largest `|μ − 1|` over the generalized eigenvalues of `(Ĝ, G)`: the smallest ε
/// for which the sandwich holds. Infinite when `G` is singular.
fn tightest_spectral_epsilon(full: &DMatrix<f64>, sampled: &DMatrix<f64>) -> f64 {
    let Some(chol) = full.clone().cholesky() else {
        return f64::INFINITY;
    };
    let l = chol.l();
    let Some(linv) = l.clone().try_inverse() else {
        return f64::INFINITY;
    };
    let m = &linv * sampled * linv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigenvalues()
        .iter()
        .map(|mu| (mu - 1.0).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub c: Option<f64>,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub median_tightest_epsilon: f64,
}

fn draw_trial_matrix(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // Log-normal row scales give a non-uniform leverage profile.
    let mut k = gaussian_matrix(rng, n, d);
    for i in 0..n {
        let s = (rng.sample::<f64, _>(StandardNormal)).exp();
        k.row_mut(i).scale_mut(s);
    }
    k
}

/// Leverage-sampling check of the spectral sandwich on random `N×d` matrices.
pub fn verify_spectral(
    n: usize,
    d: usize,
    k: usize,
    trials: usize,
    epsilon: f64,
    delta: f64,
    seed: u64,
) -> Result<SpectralReport> {
    if n == 0 || d == 0 || k == 0 || trials == 0 {
        return Err(Error::param("n, d, k and trials must all be >= 1"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::param(format!(
            "epsilon {epsilon} must lie in (0, 1)"
        )));
    }
    let outcomes = par::try_map_range(trials, |t| -> Result<(bool, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t, 0));
        let km = draw_trial_matrix(n, d, &mut rng);
        let lev = exact_leverage(&km)?;
        let rank = lev.effective_rank;
        let weights = WeightedIndex::new(&lev.scores.scores)
            .map_err(|e| Error::Data(format!("leverage weights: {e}")))?;
        let rows: Vec<usize> = (0..k).map(|_| weights.sample(&mut rng)).collect();
        let full = km.transpose() * &km;
        let sampled = sampled_gram(&km, &lev.scores.scores, rank, &rows);
        let (lo, hi) = sandwich_margins(&full, &sampled, epsilon);
        let tol = -PSD_TOL * full.symmetric_eigenvalues().max();
        Ok((
            lo >= tol && hi >= tol,
            tightest_spectral_epsilon(&full, &sampled),
        ))
    })?;
    let successes = outcomes.iter().filter(|o| o.0).count();
    let mut eps: Vec<f64> = outcomes.iter().map(|o| o.1).collect();
    Ok(SpectralReport {
        c: None,
        n,
        d,
        k,
        epsilon,
        delta,
        trials,
        successes,
        success_rate: successes as f64 / trials as f64,
        median_tightest_epsilon: super::median(&mut eps),
    })
}

/// Runs [`verify_spectral`] once per constant `C`, with `k` from
/// [`spectral_sample_size`].
pub fn verify_spectral_sweep(
    n: usize,
    d: usize,
    trials: usize,
    epsilon: f64,
    delta: f64,
    cs: &[f64],
    seed: u64,
) -> Result<Vec<SpectralReport>> {
    cs.iter()
        .map(|&c| {
            let k = spectral_sample_size(c, d, delta, epsilon);
            let mut rep = verify_spectral(n, d, k, trials, epsilon, delta, seed)?;
            rep.c = Some(c);
            Ok(rep)
        })
        .collect()
}

/// Elementwise `ℓ̃ᵢ/ℓᵢ` for rows with non-negligible exact leverage.
pub fn leverage_ratios(k: &DMatrix<f64>, sketch: &SketchSpec) -> Result<Vec<f64>> {
    let exact = exact_leverage(k)?;
    let approx = approx_leverage(k, sketch, &BasisMethod::default())?;
    Ok(exact
        .scores
        .scores
        .iter()
        .zip(&approx.scores.scores)
        .filter(|(e, _)| **e > 1e-12)
        .map(|(e, a)| a / e)
        .collect())
}

/// Smallest ε with `κ⁻¹(1−ε)/(1+ε) ≤ ρ ≤ κ(1+ε)/(1−ε)` for every ratio `ρ`.
/// Returns 1.0 when some ratio is zero or non-finite.
pub fn tightest_sandwich_epsilon(ratios: &[f64], kappa: f64) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &r in ratios {
        if !r.is_finite() || r <= 0.0 {
            return 1.0;
        }
        lo = lo.min(r);
        hi = hi.max(r);
    }
    if ratios.is_empty() {
        return 0.0;
    }
    let g = (1.0 / (kappa * lo)).max(hi / kappa).max(1.0);
    (g - 1.0) / (g + 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub kappa: f64,
    pub target_epsilon: f64,
    pub trials: usize,
    pub within_target: usize,
    pub fraction_within_target: f64,
    pub max_tightest_epsilon: f64,
    #[serde(skip)]
    pub per_trial_epsilon: Vec<f64>,
}

/// `N×d` matrix with singular values spaced linearly from `kappa` down to 1.
fn conditioned_matrix(n: usize, d: usize, kappa: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let u = random_orthonormal(rng, n, d);
    let v = random_orthonormal(rng, d, d);
    let s = DMatrix::from_fn(d, d, |i, j| {
        if i != j {
            0.0
        } else if d == 1 {
            1.0
        } else {
            kappa - (kappa - 1.0) * i as f64 / (d - 1) as f64
        }
    });
    u * s * v.transpose()
}

/// Gaussian-sketch leverage against the exact oracle on matrices with condition
/// number `kappa`.
pub fn verify_thm2(
    n: usize,
    d: usize,
    k: usize,
    trials: usize,
    kappa: f64,
    target_epsilon: f64,
    seed: u64,
) -> Result<SandwichReport> {
    if n < d || d == 0 || k == 0 || trials == 0 {
        return Err(Error::param("need n >= d >= 1, k >= 1 and trials >= 1"));
    }
    if !(kappa >= 1.0 && kappa.is_finite()) {
        return Err(Error::param(format!(
            "kappa {kappa} must be finite and >= 1"
        )));
    }
    let eps = par::try_map_range(trials, |t| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t, 0));
        let km = conditioned_matrix(n, d, kappa, &mut rng);
        let ratios = leverage_ratios(&km, &SketchSpec::gaussian(k, derive_seed(seed, t, 1)))?;
        Ok(tightest_sandwich_epsilon(&ratios, kappa))
    })?;
    let within = eps.iter().filter(|&&e| e <= target_epsilon).count();
    Ok(SandwichReport {
        n,
        d,
        k,
        kappa,
        target_epsilon,
        trials,
        within_target: within,
        fraction_within_target: within as f64 / trials as f64,
        max_tightest_epsilon: eps.iter().copied().fold(0.0, f64::max),
        per_trial_epsilon: eps,
    })
}
