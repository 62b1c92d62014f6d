//! Attention-derived importance scores.
//!
//! [`noncausal_scores`] drops the causal mask and sums attention columns inside
//! fixed-size chunks, so no `N×N` matrix is ever formed. [`h2o_scores`] and
//! [`snapkv_scores`] are the causal baselines. All softmaxes subtract the row max.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::kvstore::{ScoreKind, ScoreVector};
use crate::{par, Error, Result};

/// Query rows processed together by the causal scorers.
const CAUSAL_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnScoreConfig {
    /// Chunk length `C` for non-causal scoring.
    pub chunk_size: usize,
    /// Mean-pooling kernel, odd.
    pub pool_window: usize,
    /// Logit scale; `None` means `1/√d`.
    pub scale: Option<f64>,
    /// Multiply scores by value-row norms after pooling.
    pub value_norm: bool,
    /// Observation window `W` of the SnapKV baseline.
    pub baseline_window: usize,
    /// SnapKV baseline always keeps its final `W` tokens.
    pub force_window: bool,
}

impl Default for AttnScoreConfig {
    fn default() -> Self {
        Self {
            chunk_size: 256,
            pool_window: 7,
            scale: None,
            value_norm: true,
            baseline_window: 32,
            force_window: true,
        }
    }
}

impl AttnScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::param("chunk_size must be >= 1"));
        }
        if self.pool_window == 0 || self.pool_window.is_multiple_of(2) {
            return Err(Error::param(format!(
                "pool_window must be odd and >= 1, got {}",
                self.pool_window
            )));
        }
        if self.baseline_window == 0 {
            return Err(Error::param("baseline_window must be >= 1"));
        }
        if let Some(s) = self.scale {
            if !s.is_finite() {
                return Err(Error::param("scale must be finite"));
            }
        }
        Ok(())
    }

    pub fn effective_scale(&self, head_dim: usize) -> f64 {
        self.scale.unwrap_or_else(|| 1.0 / (head_dim as f64).sqrt())
    }
}

fn check_shapes(q: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(Error::param(format!(
            "query shape {:?} differs from key shape {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if q.nrows() == 0 {
        return Err(Error::param("attention scoring needs at least one token"));
    }
    Ok(())
}

/// In-place softmax of `col[..len]`, zeroing the tail.
fn softmax_prefix(col: &mut [f64], len: usize) {
    let (live, masked) = col.split_at_mut(len);
    masked.fill(0.0);
    let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in live.iter_mut() {
        *v *= inv;
    }
}

/// Column sums of the row-softmax of `scale·Q_cKᵀ_c` for one chunk.
fn chunk_column_sums(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    start: usize,
    len: usize,
    scale: f64,
) -> Vec<f64> {
    let qc = q.rows(start, len);
    let kc = k.rows(start, len);
    // Column i of the transposed logits is query row i, contiguous in memory.
    let mut logits_t = kc * qc.transpose();
    logits_t *= scale;
    let mut acc = vec![0.0; len];
    for mut col in logits_t.column_iter_mut() {
        let col = col.as_mut_slice();
        softmax_prefix(col, len);
        for (a, p) in acc.iter_mut().zip(col.iter()) {
            *a += p;
        }
    }
    acc
}

/// Chunked non-causal attention scores.
///
/// Chunk `i` covers rows `[iC, min((i+1)C, N))`; within it each query attends to
/// every key of the same chunk, and each key's score is the attention mass it
/// receives. The final chunk may be shorter than `C`.
pub fn noncausal_scores(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    cfg: &AttnScoreConfig,
) -> Result<ScoreVector> {
    check_shapes(q, k)?;
    cfg.validate()?;
    let n = q.nrows();
    let c = cfg.chunk_size;
    let scale = cfg.effective_scale(q.ncols());
    let chunks = par::map_range(n.div_ceil(c), |i| {
        let start = i * c;
        chunk_column_sums(q, k, start, c.min(n - start), scale)
    });
    Ok(ScoreVector::new(chunks.concat(), ScoreKind::Attention))
}

/// Total causal attention received by each key from query rows `first_query..N`.
fn causal_column_sums(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    first_query: usize,
    scale: f64,
) -> Vec<f64> {
    let n = q.nrows();
    let n_blocks = (n - first_query).div_ceil(CAUSAL_BLOCK);
    let partial = par::map_range(n_blocks, |b| {
        let start = first_query + b * CAUSAL_BLOCK;
        let end = (start + CAUSAL_BLOCK).min(n);
        // Keys visible to the last query of this block.
        let kv = k.rows(0, end);
        let mut logits_t = kv * q.rows(start, end - start).transpose();
        logits_t *= scale;
        let mut acc = vec![0.0; end];
        for (j, mut col) in logits_t.column_iter_mut().enumerate() {
            let col = col.as_mut_slice();
            softmax_prefix(col, start + j + 1);
            for (a, p) in acc.iter_mut().zip(col.iter()) {
                *a += p;
            }
        }
        acc
    });
    let mut out = vec![0.0; n];
    for acc in partial {
        for (o, a) in out.iter_mut().zip(acc) {
            *o += a;
        }
    }
    out
}

/// H₂O scores: column sums of the causally masked attention over all queries.
pub fn h2o_scores(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    cfg: &AttnScoreConfig,
) -> Result<ScoreVector> {
    check_shapes(q, k)?;
    cfg.validate()?;
    let scale = cfg.effective_scale(q.ncols());
    Ok(ScoreVector::new(
        causal_column_sums(q, k, 0, scale),
        ScoreKind::Baseline,
    ))
}

/// SnapKV scores: causal attention from the last `W` queries only.
pub fn snapkv_scores(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    cfg: &AttnScoreConfig,
) -> Result<ScoreVector> {
    check_shapes(q, k)?;
    cfg.validate()?;
    let n = q.nrows();
    let w = cfg.baseline_window;
    if w > n {
        return Err(Error::param(format!(
            "window W={w} exceeds sequence length {n}"
        )));
    }
    let scale = cfg.effective_scale(q.ncols());
    Ok(ScoreVector::new(
        causal_column_sums(q, k, n - w, scale),
        ScoreKind::Baseline,
    ))
}

/// Centered moving average; windows are truncated at the edges.
pub fn mean_pool(scores: &ScoreVector, window: usize) -> Result<ScoreVector> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::param(format!(
            "pool window must be odd and >= 1, got {window}"
        )));
    }
    let s = &scores.scores;
    let n = s.len();
    let half = window / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in s {
        prefix.push(prefix.last().unwrap() + v);
    }
    let pooled = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();
    Ok(ScoreVector::new(pooled, scores.kind))
}

/// Multiplies each score by the Euclidean norm of the matching value row.
pub fn value_norm_scale(scores: &ScoreVector, v: &DMatrix<f64>) -> Result<ScoreVector> {
    if v.nrows() != scores.len() {
        return Err(Error::param(format!(
            "{} scores but {} value rows",
            scores.len(),
            v.nrows()
        )));
    }
    let norms = crate::leverage::row_norms_sq(v);
    let out = scores
        .scores
        .iter()
        .zip(norms)
        .map(|(s, n2)| s * n2.sqrt())
        .collect();
    Ok(ScoreVector::new(out, scores.kind))
}

/// Pooling followed by optional value-norm scaling, as configured.
pub fn postprocess(
    scores: &ScoreVector,
    v: &DMatrix<f64>,
    cfg: &AttnScoreConfig,
) -> Result<ScoreVector> {
    let pooled = mean_pool(scores, cfg.pool_window)?;
    if cfg.value_norm {
        value_norm_scale(&pooled, v)
    } else {
        Ok(pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    fn cfg(chunk: usize) -> AttnScoreConfig {
        AttnScoreConfig {
            chunk_size: chunk,
            ..Default::default()
        }
    }

    /// Dense attention with an optional causal mask, rows `first..N` only.
    fn dense(
        q: &DMatrix<f64>,
        k: &DMatrix<f64>,
        scale: f64,
        causal: bool,
        first: usize,
    ) -> Vec<f64> {
        let n = q.nrows();
        let mut out = vec![0.0; n];
        for i in first..n {
            let visible = if causal { i + 1 } else { n };
            let logits: Vec<f64> = (0..visible)
                .map(|j| scale * q.row(i).dot(&k.row(j)))
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..visible {
                out[j] += (logits[j] - m).exp() / z;
            }
        }
        out
    }

    #[test]
    fn chunk_mass_equals_length() {
        let q = random(10, 4, 1);
        let k = random(10, 4, 2);
        let s = noncausal_scores(&q, &k, &cfg(4)).unwrap().scores;
        let sums: Vec<f64> = s.chunks(4).map(|c| c.iter().sum()).collect();
        assert!((sums[0] - 4.0).abs() < 1e-12);
        assert!((sums[1] - 4.0).abs() < 1e-12);
        assert!((sums[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_pair() {
        let z = DMatrix::zeros(2, 1);
        let c = AttnScoreConfig {
            chunk_size: 2,
            scale: Some(1.0),
            ..Default::default()
        };
        assert_eq!(noncausal_scores(&z, &z, &c).unwrap().scores, vec![1.0, 1.0]);
    }

    #[test]
    fn full_chunk_matches_dense() {
        let q = random(4, 2, 0);
        let k = random(4, 2, 100);
        let full = noncausal_scores(&q, &k, &cfg(4)).unwrap().scores;
        let half = noncausal_scores(&q, &k, &cfg(2)).unwrap().scores;
        let oracle = dense(&q, &k, 1.0 / 2f64.sqrt(), false, 0);
        for i in 0..4 {
            assert!((full[i] - oracle[i]).abs() < 1e-6);
        }
        assert!(full.iter().zip(&half).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn shape_mismatch() {
        let c = AttnScoreConfig::default();
        assert!(noncausal_scores(&random(3, 2, 0), &random(4, 2, 0), &c).is_err());
        assert!(h2o_scores(&random(3, 2, 0), &random(3, 3, 0), &c).is_err());
    }

    #[test]
    fn h2o_uniform() {
        let n = 6;
        let z = DMatrix::zeros(n, 3);
        let s = h2o_scores(&z, &z, &AttnScoreConfig::default())
            .unwrap()
            .scores;
        let harmonic: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
        assert!((s[0] - harmonic).abs() < 1e-12);
        assert!((s[n - 1] - 1.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn h2o_single_token() {
        let q = random(1, 3, 0);
        assert_eq!(
            h2o_scores(&q, &q, &AttnScoreConfig::default())
                .unwrap()
                .scores,
            vec![1.0]
        );
    }

    #[test]
    fn h2o_small_oracle() {
        let q = DMatrix::from_column_slice(3, 1, &[1., 2., 3.]);
        let c = AttnScoreConfig {
            scale: Some(1.0),
            ..Default::default()
        };
        let s = h2o_scores(&q, &q, &c).unwrap().scores;
        let oracle = dense(&q, &q, 1.0, true, 0);
        for i in 0..3 {
            assert!((s[i] - oracle[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn h2o_spans_blocks() {
        let q = random(150, 4, 5);
        let k = random(150, 4, 6);
        let s = h2o_scores(&q, &k, &AttnScoreConfig::default())
            .unwrap()
            .scores;
        let oracle = dense(&q, &k, 0.5, true, 0);
        for i in 0..150 {
            assert!((s[i] - oracle[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn snapkv_cases() {
        let q = random(4, 2, 0);
        let k = random(4, 2, 1);
        let mut c = AttnScoreConfig {
            baseline_window: 4,
            ..Default::default()
        };
        assert_eq!(snapkv_scores(&q, &k, &c).unwrap(), {
            let mut h = h2o_scores(&q, &k, &c).unwrap();
            h.kind = ScoreKind::Baseline;
            h
        });
        c.baseline_window = 1;
        let last = snapkv_scores(&q, &k, &c).unwrap().scores;
        let row = dense(&q, &k, c.effective_scale(2), true, 3);
        for i in 0..4 {
            assert!((last[i] - row[i]).abs() < 1e-12);
        }
        c.baseline_window = 2;
        let s = snapkv_scores(&q, &k, &c).unwrap().scores;
        let oracle = dense(&q, &k, c.effective_scale(2), true, 2);
        for i in 0..4 {
            assert!((s[i] - oracle[i]).abs() < 1e-6);
        }
        c.baseline_window = 5;
        assert!(snapkv_scores(&q, &k, &c).is_err());
    }

    #[test]
    fn pooling() {
        let sv = |v: Vec<f64>| ScoreVector::new(v, ScoreKind::Attention);
        let x = sv(vec![1., 2., 3., 4., 5.]);
        assert_eq!(mean_pool(&x, 1).unwrap(), x);
        assert_eq!(
            mean_pool(&sv(vec![0., 3., 0.]), 3).unwrap().scores,
            vec![1.5, 1.0, 1.5]
        );
        assert_eq!(mean_pool(&x, 3).unwrap().scores, vec![1.5, 2., 3., 4., 4.5]);
        assert!(mean_pool(&x, 2).is_err());
        assert!(mean_pool(&x, 0).is_err());
    }

    #[test]
    fn value_norms() {
        let s = ScoreVector::new(vec![1., 1.], ScoreKind::Attention);
        let v = DMatrix::from_row_slice(2, 2, &[3., 4., 0., 0.]);
        assert_eq!(value_norm_scale(&s, &v).unwrap().scores, vec![5., 0.]);
        let unit = DMatrix::from_row_slice(2, 2, &[0.6, 0.8, 1.0, 0.0]);
        assert_eq!(value_norm_scale(&s, &unit).unwrap().scores, vec![1., 1.]);
        assert!(value_norm_scale(&s, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn value_norms_random() {
        let v = random(20, 5, 3);
        let s = ScoreVector::new(
            (0..20).map(|i| i as f64 * 0.1).collect(),
            ScoreKind::Attention,
        );
        let out = value_norm_scale(&s, &v).unwrap().scores;
        for i in 0..20 {
            let norm = (0..5).map(|j| v[(i, j)] * v[(i, j)]).sum::<f64>().sqrt();
            assert!((out[i] - s.scores[i] * norm).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = AttnScoreConfig {
            pool_window: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = AttnScoreConfig {
            chunk_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
