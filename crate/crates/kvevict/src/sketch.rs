//! Right-sketching transforms `K ↦ K·Φ`.
//!
//! Two constructions are provided: a dense Gaussian sketch with entries drawn from
//! `N(0, 1/k)`, and a subsampled randomized Hadamard transform (SRHT) applied with a
//! fast Walsh–Hadamard butterfly. Both are fully determined by their [`SketchSpec`].

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchKind {
    Gaussian,
    Srht,
    None,
}

/// A right sketch: its kind, target dimension `k` and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchSpec {
    pub kind: SketchKind,
    #[serde(rename = "k")]
    pub target_dim: usize,
    pub seed: u64,
}

impl Default for SketchSpec {
    fn default() -> Self {
        Self::gaussian(64, 0)
    }
}

impl SketchSpec {
    pub fn gaussian(k: usize, seed: u64) -> Self {
        Self {
            kind: SketchKind::Gaussian,
            target_dim: k,
            seed,
        }
    }

    pub fn srht(k: usize, seed: u64) -> Self {
        Self {
            kind: SketchKind::Srht,
            target_dim: k,
            seed,
        }
    }

    pub fn none() -> Self {
        Self {
            kind: SketchKind::None,
            target_dim: 0,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Checks the spec against an input column dimension `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        match self.kind {
            SketchKind::None => Ok(()),
            _ if self.target_dim == 0 => {
                Err(Error::param("sketch target dimension k must be >= 1"))
            }
            SketchKind::Srht if self.target_dim > padded_dim(d) => Err(Error::param(format!(
                "SRHT target dimension {} exceeds padded dimension {}",
                self.target_dim,
                padded_dim(d)
            ))),
            _ => Ok(()),
        }
    }
}

/// `d` rounded up to the next power of two.
pub fn padded_dim(d: usize) -> usize {
    d.max(1).next_power_of_two()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Dense `d×k` Gaussian sketch with i.i.d. `N(0, 1/k)` entries.
///
/// Column `j` is drawn from its own ChaCha stream, so the matrix does not depend on
/// generation order.
pub fn gaussian_sketch(d: usize, spec: &SketchSpec) -> Result<DMatrix<f64>> {
    let k = spec.target_dim;
    if k == 0 {
        return Err(Error::param("sketch target dimension k must be >= 1"));
    }
    let std = (1.0 / k as f64).sqrt();
    let cols = par::map_range(k, |j| {
        let mut rng = stream_rng(spec.seed, j as u64);
        (0..d)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect::<Vec<_>>()
    });
    Ok(DMatrix::from_iterator(d, k, cols.into_iter().flatten()))
}

/// In-place unnormalized fast Walsh–Hadamard transform. `x.len()` must be a power
/// of two.
pub fn fwht(x: &mut [f64]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
}

/// The random pieces of an SRHT: `Φ = √(d_pad/k) · D · (H/√d_pad) · Rᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Srht {
    d: usize,
    d_pad: usize,
    signs: Vec<f64>,
    columns: Vec<usize>,
}

impl Srht {
    pub fn new(d: usize, spec: &SketchSpec) -> Result<Self> {
        if spec.kind != SketchKind::Srht {
            return Err(Error::param("spec is not an SRHT sketch"));
        }
        spec.validate(d)?;
        let d_pad = padded_dim(d);
        let mut rng = stream_rng(spec.seed, 0);
        let signs = (0..d_pad)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut rng = stream_rng(spec.seed, 1);
        let mut perm: Vec<usize> = (0..d_pad).collect();
        let (chosen, _) = perm.partial_shuffle(&mut rng, spec.target_dim);
        Ok(Self {
            d,
            d_pad,
            signs,
            columns: chosen.to_vec(),
        })
    }

    pub fn padded_dim(&self) -> usize {
        self.d_pad
    }

    /// Rademacher diagonal of `D`, length `d_pad`.
    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    /// Hadamard columns kept by `R`, in output order.
    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    /// Overall scale applied after the unnormalized butterfly: `1/√k`.
    pub fn scale(&self) -> f64 {
        (1.0 / self.columns.len() as f64).sqrt()
    }

    /// Sketches the rows of `k_mat` without materializing `H`.
    pub fn apply(&self, k_mat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if k_mat.ncols() != self.d {
            return Err(Error::param(format!(
                "SRHT built for d={}, input has {} columns",
                self.d,
                k_mat.ncols()
            )));
        }
        let n = k_mat.nrows();
        let k = self.columns.len();
        let scale = self.scale();
        const BLOCK: usize = 1024;
        let blocks = par::map_range(n.div_ceil(BLOCK), |b| {
            let start = b * BLOCK;
            let end = (start + BLOCK).min(n);
            let mut buf = vec![0.0; self.d_pad];
            let mut out = Vec::with_capacity((end - start) * k);
            for i in start..end {
                buf.fill(0.0);
                for j in 0..self.d {
                    buf[j] = k_mat[(i, j)] * self.signs[j];
                }
                fwht(&mut buf);
                out.extend(self.columns.iter().map(|&c| buf[c] * scale));
            }
            out
        });
        Ok(DMatrix::from_row_iterator(
            n,
            k,
            blocks.into_iter().flatten(),
        ))
    }
}

/// SRHT sketch of `k_mat`, `O(N·d_pad·log d_pad)`.
pub fn srht_apply(k_mat: &DMatrix<f64>, spec: &SketchSpec) -> Result<DMatrix<f64>> {
    Srht::new(k_mat.ncols(), spec)?.apply(k_mat)
}

/// Applies the sketch described by `spec`; `SketchKind::None` returns `k_mat` unchanged.
pub fn apply_sketch(k_mat: &DMatrix<f64>, spec: &SketchSpec) -> Result<DMatrix<f64>> {
    spec.validate(k_mat.ncols())?;
    match spec.kind {
        SketchKind::None => Ok(k_mat.clone()),
        SketchKind::Gaussian => Ok(k_mat * gaussian_sketch(k_mat.ncols(), spec)?),
        SketchKind::Srht => srht_apply(k_mat, spec),
    }
}
