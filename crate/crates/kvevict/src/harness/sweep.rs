use std::collections::HashSet;

use serde::Serialize;

use crate::evict::{plan_from_scores, score_bundle, EvictionPolicy, Retention};
use crate::kvstore::{retained_count, KVBundle};
use crate::leverage::exact_leverage;
use crate::{par, Result};

/// Summary of one (policy, r) point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub policy: String,
    pub seed: u64,
    pub r: f64,
    /// Mean fraction of tokens kept per head.
    pub retained_fraction: f64,
    /// Mean overlap with the exact-leverage top-k of the same size.
    pub overlap_exact: f64,
    /// Fraction of (head, needle) pairs retained; empty without needles.
    pub needle_recall: Option<f64>,
    pub score_min: Option<f64>,
    pub score_q25: Option<f64>,
    pub score_median: Option<f64>,
    pub score_q75: Option<f64>,
    pub score_max: Option<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Runs every policy at every retention level. `policies` pairs a report label
/// with a policy; the retention inside each policy is overridden by `r_list`.
pub fn sweep_policies(
    bundle: &KVBundle,
    policies: &[(String, EvictionPolicy)],
    r_list: &[f64],
    needles: Option<&[usize]>,
) -> Result<Vec<SweepRow>> {
    // Exact-leverage ranking per head, shared by all points.
    let reference = par::try_map_range(bundle.heads().len(), |i| -> Result<Vec<usize>> {
        let h = &bundle.heads()[i];
        let k = h.keys_prerope.as_ref().unwrap_or(&h.keys).to_dmatrix();
        let s = exact_leverage(&k)?.scores.scores;
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        Ok(order)
    })?;

    let mut rows = Vec::new();
    for (label, base) in policies {
        let scores = score_bundle(bundle, base)?;
        let mut all: Vec<f64> = scores
            .iter()
            .filter_map(|h| h.blended.as_ref())
            .flat_map(|s| s.scores.iter().copied().filter(|x| x.is_finite()))
            .collect();
        all.sort_by(f64::total_cmp);
        let q = |p: f64| (!all.is_empty()).then(|| quantile(&all, p));

        for &r in r_list {
            let policy = base.with_retention(Retention::Uniform(r));
            let plan = plan_from_scores(bundle, &policy, &scores)?;
            let (mut kept, mut overlap, mut hits, mut total) = (0.0, 0.0, 0usize, 0usize);
            for (i, h) in bundle.heads().iter().enumerate() {
                let (l, hd) = (i / bundle.n_kv_heads(), i % bundle.n_kv_heads());
                let sel = plan.retained(l, hd);
                let n = h.seq_len();
                kept += sel.len() as f64 / n as f64;
                let kref = retained_count(n, r);
                let set: HashSet<usize> = sel.iter().copied().collect();
                let common = reference[i][..kref]
                    .iter()
                    .filter(|t| set.contains(t))
                    .count();
                overlap += common as f64 / kref as f64;
                if let Some(nd) = needles {
                    hits += nd.iter().filter(|t| set.contains(t)).count();
                    total += nd.len();
                }
            }
            let heads = bundle.heads().len() as f64;
            rows.push(SweepRow {
                policy: label.clone(),
                seed: policy.seed,
                r,
                retained_fraction: kept / heads,
                overlap_exact: overlap / heads,
                needle_recall: needles.map(|_| {
                    if total == 0 {
                        0.0
                    } else {
                        hits as f64 / total as f64
                    }
                }),
                score_min: q(0.0),
                score_q25: q(0.25),
                score_median: q(0.5),
                score_q75: q(0.75),
                score_max: q(1.0),
            });
        }
    }
    Ok(rows)
}
