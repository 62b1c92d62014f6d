use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::kvstore::{HeadKV, KVBundle, RowMatrix};
use crate::{derive_seed, par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    GaussianIid,
    LowRankPlusNoise,
    /// `needle_count` key rows orthogonal to the span of all other rows.
    Needle,
    /// Rows scattered around `rank` centres (8 when `rank` is 0).
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthProfile {
    pub kind: SynthKind,
    pub n: usize,
    pub d: usize,
    pub rank: usize,
    pub needle_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            kind: SynthKind::GaussianIid,
            n: 1024,
            d: 64,
            rank: 8,
            needle_count: 1,
            noise_sigma: 0.1,
            seed: 0,
            n_layers: 1,
            n_heads: 1,
        }
    }
}

impl SynthProfile {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Parameter(m));
        if self.n == 0 || self.d == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return fail("n, d, n_layers and n_heads must all be >= 1".into());
        }
        if self.rank > self.d {
            return fail(format!("rank {} exceeds d {}", self.rank, self.d));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            ));
        }
        match self.kind {
            SynthKind::LowRankPlusNoise if self.rank == 0 => {
                fail("low-rank profile needs rank >= 1".into())
            }
            SynthKind::Needle if self.needle_count == 0 || self.needle_count >= self.n => fail(
                format!("needle_count {} must be in [1, n)", self.needle_count),
            ),
            SynthKind::Needle if self.needle_count >= self.d => fail(format!(
                "needle_count {} must be below d {} to leave room for the background",
                self.needle_count, self.d
            )),
            _ => Ok(()),
        }
    }
}

pub fn gaussian_matrix(rng: &mut impl Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
}

/// `n×d` matrix with orthonormal columns (`n ≥ d`).
pub fn random_orthonormal(rng: &mut impl Rng, n: usize, d: usize) -> DMatrix<f64> {
    gaussian_matrix(rng, n, d).qr().q()
}

/// Token positions of the planted needles, ascending. Shared by every head.
pub fn needle_positions(profile: &SynthProfile) -> Vec<usize> {
    if profile.kind != SynthKind::Needle {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    rng.set_stream(u64::MAX);
    let mut pos = rand::seq::index::sample(&mut rng, profile.n, profile.needle_count).into_vec();
    pos.sort_unstable();
    pos
}

fn synth_keys(profile: &SynthProfile, rng: &mut ChaCha8Rng, needles: &[usize]) -> DMatrix<f64> {
    let (n, d) = (profile.n, profile.d);
    let sigma = profile.noise_sigma;
    match profile.kind {
        SynthKind::GaussianIid => gaussian_matrix(rng, n, d),
        SynthKind::LowRankPlusNoise => {
            let a = gaussian_matrix(rng, n, profile.rank);
            let b = gaussian_matrix(rng, profile.rank, d) / (profile.rank as f64).sqrt();
            a * b + gaussian_matrix(rng, n, d) * sigma
        }
        SynthKind::Clustered => {
            let clusters = if profile.rank == 0 { 8 } else { profile.rank }.min(n);
            let centres = gaussian_matrix(rng, clusters, d) * 3.0;
            let mut k = gaussian_matrix(rng, n, d) * sigma;
            for i in 0..n {
                let c = rng.random_range(0..clusters);
                let mut row = k.row_mut(i);
                row += centres.row(c);
            }
            k
        }
        SynthKind::Needle => {
            // Background rows live in the first d-m coordinates, needles in the last m;
            // a shared random rotation hides the split.
            let m = profile.needle_count;
            let mut k = DMatrix::zeros(n, d);
            let bg = gaussian_matrix(rng, n, d - m);
            k.columns_mut(0, d - m).copy_from(&bg);
            let boost = (d as f64 / m as f64).sqrt();
            for &p in needles {
                k.row_mut(p).fill(0.0);
                for j in d - m..d {
                    k[(p, j)] = boost * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let rot = random_orthonormal(rng, d, d);
            k * rot
        }
    }
}

/// Deterministic synthetic bundle. Post-embedding keys equal the pre-embedding
/// keys; queries and values are i.i.d. standard normal.
pub fn synth_bundle(profile: &SynthProfile) -> Result<KVBundle> {
    profile.validate()?;
    let needles = needle_positions(profile);
    let heads = par::map_range(profile.n_layers * profile.n_heads, |i| {
        let (layer, head) = (i / profile.n_heads, i % profile.n_heads);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, layer, head));
        let keys = RowMatrix::from_dmatrix(&synth_keys(profile, &mut rng, &needles));
        let queries = RowMatrix::from_dmatrix(&gaussian_matrix(&mut rng, profile.n, profile.d));
        let values = RowMatrix::from_dmatrix(&gaussian_matrix(&mut rng, profile.n, profile.d));
        HeadKV {
            keys_prerope: Some(keys.clone()),
            keys,
            values,
            queries: Some(queries),
        }
    });
    KVBundle::new(profile.n_layers, profile.n_heads, profile.d, heads)
}
