use std::time::Instant;

use serde::Serialize;

use super::synth::{synth_bundle, SynthKind, SynthProfile};
use crate::evict::{compress_bundle, EvictionPolicy};
use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    /// Untimed runs before measurement at each N.
    pub warmup: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 2,
            heads: 1,
            head_dim: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub policy: String,
    pub n: usize,
    pub repeats: usize,
    pub median_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub loglog_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub policy: String,
    pub rows: Vec<ScalingRow>,
    pub slope: f64,
}

/// Median of a non-empty slice (mean of the middle pair for even lengths). NaN
/// for an empty slice.
pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares slope of `ln t` against `ln n`.
pub fn loglog_slope(ns: &[usize], times: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Median wall-clock of scoring plus selection on a single synthetic layer for
/// each N. Runs on one thread so timings are not skewed by contention.
pub fn bench_scaling(
    policy: &EvictionPolicy,
    n_list: &[usize],
    repeats: usize,
    opts: &BenchOptions,
) -> Result<ScalingReport> {
    if n_list.is_empty() || repeats == 0 {
        return Err(Error::param("bench needs at least one N and repeats >= 1"));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) || n_list[0] == 0 {
        return Err(Error::param(
            "N list must be positive and strictly ascending",
        ));
    }
    let profile = SynthProfile {
        kind: SynthKind::GaussianIid,
        n: *n_list.last().unwrap(),
        d: opts.head_dim,
        seed: opts.seed,
        n_layers: 1,
        n_heads: opts.heads,
        ..Default::default()
    };
    let full = synth_bundle(&profile)?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let bundle = full.truncate(n)?;
        let mut times = par::run_sequential(|| -> Result<Vec<f64>> {
            for _ in 0..opts.warmup {
                compress_bundle(&bundle, policy)?;
            }
            (0..repeats)
                .map(|_| {
                    let t0 = Instant::now();
                    let plan = compress_bundle(&bundle, policy)?;
                    let dt = t0.elapsed().as_secs_f64();
                    std::hint::black_box(plan);
                    Ok(dt)
                })
                .collect()
        })?;
        let (min, max) = times.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &t| {
            (lo.min(t), hi.max(t))
        });
        rows.push(ScalingRow {
            policy: policy.kind.name().to_string(),
            n,
            repeats,
            median_seconds: median(&mut times),
            min_seconds: min,
            max_seconds: max,
            loglog_slope: f64::NAN,
        });
    }
    let slope = if rows.len() >= 2 {
        let ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
        let ts: Vec<f64> = rows.iter().map(|r| r.median_seconds).collect();
        loglog_slope(&ns, &ts)
    } else {
        f64::NAN
    };
    for r in &mut rows {
        r.loglog_slope = slope;
    }
    Ok(ScalingReport {
        policy: policy.kind.name().to_string(),
        rows,
        slope,
    })
}
