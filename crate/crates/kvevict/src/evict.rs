//! Score blending, per-head top-k selection and full-bundle compression.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attnscore::{self, AttnScoreConfig};
use crate::kvstore::{retained_count, HeadKV, KVBundle, RetentionPlan, ScoreKind, ScoreVector};
use crate::leverage::{approx_leverage, BasisMethod};
use crate::sketch::SketchSpec;
use crate::{derive_seed, par, Error, Result};

/// Guard added to the standard deviation when z-scoring.
pub const ZSCORE_EPS: f64 = 1e-8;

pub const DEFAULT_LAMBDA: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Blended leverage and chunked non-causal attention.
    Compactor,
    Snapkv,
    H2o,
    Random,
    /// Approximate leverage scores alone.
    LeverageOnly,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Compactor => "compactor",
            PolicyKind::Snapkv => "snapkv",
            PolicyKind::H2o => "h2o",
            PolicyKind::Random => "random",
            PolicyKind::LeverageOnly => "leverage_only",
        }
    }

    fn needs_queries(self) -> bool {
        matches!(
            self,
            PolicyKind::Compactor | PolicyKind::Snapkv | PolicyKind::H2o
        )
    }

    fn needs_prerope(self) -> bool {
        matches!(self, PolicyKind::Compactor | PolicyKind::LeverageOnly)
    }
}

/// Fraction of tokens to keep: one value for every layer, or one per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Retention {
    Uniform(f64),
    PerLayer(Vec<f64>),
}

impl Retention {
    fn for_layer(&self, layer: usize) -> f64 {
        match self {
            Retention::Uniform(r) => *r,
            Retention::PerLayer(v) => v[layer],
        }
    }

    fn validate(&self, n_layers: usize) -> Result<()> {
        let values: &[f64] = match self {
            Retention::Uniform(r) => std::slice::from_ref(r),
            Retention::PerLayer(v) => {
                if v.len() != n_layers {
                    return Err(Error::param(format!(
                        "per-layer retention has {} entries for {n_layers} layers",
                        v.len()
                    )));
                }
                v
            }
        };
        match values.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            Some(r) => Err(Error::param(format!("retention {r} not in (0, 1]"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvictionPolicy {
    pub kind: PolicyKind,
    pub lambda: f64,
    pub retention: Retention,
    /// Root sketch; each (layer, head) uses a seed derived from `sketch.seed`.
    pub sketch: SketchSpec,
    #[serde(rename = "attn")]
    pub attn_cfg: AttnScoreConfig,
    pub basis: BasisMethod,
    pub seed: u64,
}

impl Default for EvictionPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Compactor,
            lambda: DEFAULT_LAMBDA,
            retention: Retention::Uniform(0.5),
            sketch: SketchSpec::default(),
            attn_cfg: AttnScoreConfig::default(),
            basis: BasisMethod::default(),
            seed: 0,
        }
    }
}

impl EvictionPolicy {
    pub fn new(kind: PolicyKind, retention: f64) -> Self {
        Self {
            kind,
            retention: Retention::Uniform(retention),
            ..Default::default()
        }
    }

    pub fn with_retention(&self, retention: Retention) -> Self {
        Self {
            retention,
            ..self.clone()
        }
    }

    fn validate(&self, n_layers: usize) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::param(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        self.retention.validate(n_layers)?;
        self.attn_cfg.validate()?;
        self.basis.validate()
    }
}

/// `(v − mean(v)) / (std(v) + 1e-8)` with the population standard deviation.
pub fn zscore(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + ZSCORE_EPS;
    v.iter().map(|x| (x - mean) / denom).collect()
}

/// `zscore(a) + λ·zscore(o)`.
pub fn blend_scores(a: &ScoreVector, o: &ScoreVector, lambda: f64) -> Result<ScoreVector> {
    if a.len() != o.len() {
        return Err(Error::param(format!(
            "attention scores have length {}, outlier scores {}",
            a.len(),
            o.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::param("cannot blend empty score vectors"));
    }
    let s = zscore(&a.scores)
        .into_iter()
        .zip(zscore(&o.scores))
        .map(|(x, y)| x + lambda * y)
        .collect();
    Ok(ScoreVector::new(s, ScoreKind::Blended))
}

fn check_fraction(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("retention {r} not in (0, 1]")))
    }
}

/// Indices of the `max(1, ⌈r·N⌉)` largest scores, ascending. Ties favour the smaller
/// index.
pub fn select_topk(s: &ScoreVector, r: f64) -> Result<Vec<usize>> {
    check_fraction(r)?;
    if s.is_empty() {
        return Err(Error::param("cannot select from an empty score vector"));
    }
    let k = retained_count(s.len(), r);
    let mut idx: Vec<usize> = (0..s.len()).collect();
    let order = |&a: &usize, &b: &usize| s.scores[b].total_cmp(&s.scores[a]).then(a.cmp(&b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Uniform sample of `max(1, ⌈r·N⌉)` distinct indices, ascending.
pub fn random_eviction(n: usize, r: f64, seed: u64) -> Result<Vec<usize>> {
    check_fraction(r)?;
    if n == 0 {
        return Err(Error::param("cannot sample from zero tokens"));
    }
    let k = retained_count(n, r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Intermediate and final scores for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScores {
    pub layer: usize,
    pub head: usize,
    pub outlier: Option<ScoreVector>,
    pub attention: Option<ScoreVector>,
    /// Ranking signal; `None` for the random policy.
    pub blended: Option<ScoreVector>,
}

fn check_inputs(bundle: &KVBundle, policy: &EvictionPolicy) -> Result<()> {
    policy.validate(bundle.n_layers())?;
    if policy.kind.needs_queries() && !bundle.has_queries() {
        return Err(Error::Input(format!(
            "policy {} needs queries but the bundle has none",
            policy.kind.name()
        )));
    }
    if policy.kind.needs_prerope() && !bundle.has_prerope_keys() {
        return Err(Error::Input(format!(
            "policy {} needs pre-position-embedding keys but the bundle has none",
            policy.kind.name()
        )));
    }
    Ok(())
}

fn score_head(
    head: &HeadKV,
    layer: usize,
    h: usize,
    policy: &EvictionPolicy,
) -> Result<HeadScores> {
    let outlier = if policy.kind.needs_prerope() {
        let keys = head.keys_prerope.as_ref().expect("checked").to_dmatrix();
        let sketch = policy
            .sketch
            .with_seed(derive_seed(policy.sketch.seed, layer, h));
        Some(approx_leverage(&keys, &sketch, &policy.basis)?.scores)
    } else {
        None
    };

    let attention = if policy.kind.needs_queries() {
        let q = head.queries.as_ref().expect("checked").to_dmatrix();
        let k = head.keys.to_dmatrix();
        let cfg = &policy.attn_cfg;
        let raw = match policy.kind {
            PolicyKind::Compactor => attnscore::noncausal_scores(&q, &k, cfg)?,
            PolicyKind::Snapkv => {
                let w = cfg.baseline_window.min(q.nrows());
                let cfg = AttnScoreConfig {
                    baseline_window: w,
                    ..*cfg
                };
                attnscore::snapkv_scores(&q, &k, &cfg)?
            }
            _ => attnscore::h2o_scores(&q, &k, cfg)?,
        };
        Some(attnscore::postprocess(
            &raw,
            &head.values.to_dmatrix(),
            cfg,
        )?)
    } else {
        None
    };

    let blended = match (policy.kind, &attention, &outlier) {
        (PolicyKind::Compactor, Some(a), Some(o)) => Some(blend_scores(a, o, policy.lambda)?),
        (PolicyKind::LeverageOnly, _, Some(o)) => Some(o.clone()),
        (PolicyKind::Random, _, _) => None,
        (_, Some(a), _) => Some(a.clone()),
        _ => unreachable!("policy inputs checked"),
    };
    Ok(HeadScores {
        layer,
        head: h,
        outlier,
        attention,
        blended,
    })
}

/// Scores every head of `bundle` under `policy`, in layer-major order.
pub fn score_bundle(bundle: &KVBundle, policy: &EvictionPolicy) -> Result<Vec<HeadScores>> {
    check_inputs(bundle, policy)?;
    let n_heads = bundle.n_kv_heads();
    par::try_map_range(bundle.heads().len(), |i| {
        score_head(&bundle.heads()[i], i / n_heads, i % n_heads, policy)
    })
}

fn select_head(
    scores: &HeadScores,
    n: usize,
    r: f64,
    policy: &EvictionPolicy,
) -> Result<Vec<usize>> {
    match (&scores.blended, policy.kind) {
        (None, _) => random_eviction(n, r, derive_seed(policy.seed, scores.layer, scores.head)),
        (Some(s), PolicyKind::Snapkv) if policy.attn_cfg.force_window => {
            let w = policy.attn_cfg.baseline_window.min(n);
            let mut forced = s.clone();
            forced.scores[n - w..].fill(f64::INFINITY);
            select_topk(&forced, r)
        }
        (Some(s), _) => select_topk(s, r),
    }
}

/// Retained token set for every head, from scores already computed.
pub fn plan_from_scores(
    bundle: &KVBundle,
    policy: &EvictionPolicy,
    scores: &[HeadScores],
) -> Result<RetentionPlan> {
    check_inputs(bundle, policy)?;
    if scores.len() != bundle.heads().len() {
        return Err(Error::Mismatch(format!(
            "{} score sets for {} heads",
            scores.len(),
            bundle.heads().len()
        )));
    }
    let kept = par::try_map_range(scores.len(), |i| {
        let s = &scores[i];
        let n = bundle.head(s.layer, s.head).seq_len();
        select_head(s, n, policy.retention.for_layer(s.layer), policy)
    })?;
    let layers: Vec<Vec<Vec<usize>>> = kept
        .chunks(bundle.n_kv_heads())
        .map(|c| c.to_vec())
        .collect();
    let (target, layer_retention) = match &policy.retention {
        Retention::Uniform(r) => (*r, None),
        Retention::PerLayer(v) => (v.iter().copied().fold(0.0, f64::max), Some(v.clone())),
    };
    let mut plan = RetentionPlan::new(target, policy.kind.name(), Some(policy.seed), layers)?;
    plan.layer_retention = layer_retention;
    plan.metadata = Some(serde_json::json!({ "policy": policy }));
    Ok(plan)
}

/// Scores and selects tokens for every (layer, head).
pub fn compress_bundle(bundle: &KVBundle, policy: &EvictionPolicy) -> Result<RetentionPlan> {
    let scores = score_bundle(bundle, policy)?;
    plan_from_scores(bundle, policy, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvstore::RowMatrix;

    fn sv(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.to_vec(), ScoreKind::Attention)
    }

    #[test]
    fn blend_lambda_zero() {
        let a = sv(&[1., 4., 2., 8.]);
        let o = sv(&[3., 1., 2., 0.]);
        assert_eq!(blend_scores(&a, &o, 0.0).unwrap().scores, zscore(&a.scores));
    }

    #[test]
    fn blend_constant_attention() {
        let a = sv(&[5., 5., 5.]);
        let o = sv(&[1., 2., 3.]);
        let s = blend_scores(&a, &o, 1.0).unwrap().scores;
        let z = zscore(&o.scores);
        for i in 0..3 {
            assert!((s[i] - z[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn blend_cancels() {
        let s = blend_scores(&sv(&[1., 2., 3.]), &sv(&[3., 2., 1.]), 1.0).unwrap();
        assert!(s.scores.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn blend_length_mismatch() {
        assert!(blend_scores(&sv(&[1., 2.]), &sv(&[1.]), 1.0).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk(&sv(&[3., 1., 2.]), 0.34).unwrap(), vec![0, 2]);
        assert_eq!(
            select_topk(&sv(&[1., 1., 1., 1.]), 0.5).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            select_topk(&sv(&[0.2, 5., 1.]), 1.0).unwrap(),
            vec![0, 1, 2]
        );
        assert_eq!(select_topk(&sv(&[0.2, 5., 1.]), 0.01).unwrap(), vec![1]);
        assert!(select_topk(&sv(&[1.]), 0.0).is_err());
        assert!(select_topk(&sv(&[1.]), 1.5).is_err());
    }

    #[test]
    fn random_examples() {
        assert_eq!(
            random_eviction(7, 1.0, 3).unwrap(),
            (0..7).collect::<Vec<_>>()
        );
        assert_eq!(
            random_eviction(100, 0.2, 5).unwrap(),
            random_eviction(100, 0.2, 5).unwrap()
        );
        let big = random_eviction(10_000, 0.3, 11).unwrap();
        assert_eq!(big.len(), 3000);
        assert!(big.windows(2).all(|w| w[0] < w[1]));
        assert!(*big.last().unwrap() < 10_000);
        assert!(random_eviction(10, 0.0, 1).is_err());
    }

    fn tiny_bundle(layers: usize, queries: bool) -> KVBundle {
        let heads = (0..layers * 2)
            .map(|h| {
                let m = |s: f32| {
                    RowMatrix::from_fn(12, 4, |i, j| ((i * 7 + j * 3 + h) as f32 * s).sin())
                };
                HeadKV {
                    keys_prerope: Some(m(0.37)),
                    keys: m(0.41),
                    values: m(0.53),
                    queries: queries.then(|| m(0.29)),
                }
            })
            .collect();
        KVBundle::new(layers, 2, 4, heads).unwrap()
    }

    #[test]
    fn random_full_retention() {
        let b = tiny_bundle(2, false);
        let plan = compress_bundle(&b, &EvictionPolicy::new(PolicyKind::Random, 1.0)).unwrap();
        for layer in &plan.layers {
            for idx in layer {
                assert_eq!(idx, &(0..12).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn missing_queries() {
        let b = tiny_bundle(1, false);
        for kind in [PolicyKind::Compactor, PolicyKind::Snapkv, PolicyKind::H2o] {
            let err = compress_bundle(&b, &EvictionPolicy::new(kind, 0.5)).unwrap_err();
            assert!(matches!(err, Error::Input(_)));
        }
        assert!(compress_bundle(&b, &EvictionPolicy::new(PolicyKind::LeverageOnly, 0.5)).is_ok());
    }

    #[test]
    fn per_layer_retention() {
        let b = tiny_bundle(2, true);
        let mut p = EvictionPolicy::new(PolicyKind::Compactor, 0.5);
        p.sketch = SketchSpec::gaussian(4, 1);
        p.retention = Retention::PerLayer(vec![0.25, 0.5]);
        let plan = compress_bundle(&b, &p).unwrap();
        assert_eq!(plan.layers[0][0].len(), 3);
        assert_eq!(plan.layers[1][1].len(), 6);
        assert_eq!(plan.layer_retention, Some(vec![0.25, 0.5]));
        p.retention = Retention::PerLayer(vec![0.5]);
        assert!(matches!(compress_bundle(&b, &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn lambda_zero_is_attention_only() {
        let b = tiny_bundle(1, true);
        let mut p = EvictionPolicy::new(PolicyKind::Compactor, 0.4);
        p.sketch = SketchSpec::gaussian(4, 2);
        p.lambda = 0.0;
        p.attn_cfg.chunk_size = 5;
        let plan = compress_bundle(&b, &p).unwrap();
        for h in 0..2 {
            let head = b.head(0, h);
            let q = head.queries.as_ref().unwrap().to_dmatrix();
            let a = attnscore::noncausal_scores(&q, &head.keys.to_dmatrix(), &p.attn_cfg).unwrap();
            let a = attnscore::postprocess(&a, &head.values.to_dmatrix(), &p.attn_cfg).unwrap();
            assert_eq!(plan.layers[0][h], select_topk(&a, 0.4).unwrap());
        }
    }

    #[test]
    fn snapkv_keeps_window() {
        let b = tiny_bundle(1, true);
        let mut p = EvictionPolicy::new(PolicyKind::Snapkv, 0.5);
        p.attn_cfg.baseline_window = 3;
        let plan = compress_bundle(&b, &p).unwrap();
        for idx in &plan.layers[0] {
            assert_eq!(idx.len(), 6);
            assert!([9, 10, 11].iter().all(|t| idx.contains(t)));
        }
    }

    #[test]
    fn policy_json_shape() {
        let p = EvictionPolicy::default();
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["kind"], "compactor");
        assert_eq!(v["lambda"], 0.3);
        assert_eq!(v["sketch"]["k"], 64);
        assert_eq!(v["attn"]["chunk_size"], 256);
        let back: EvictionPolicy = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
        let partial: EvictionPolicy =
            serde_json::from_str(r#"{"kind":"h2o","retention":[0.2,0.4],"seed":3}"#).unwrap();
        assert_eq!(partial.retention, Retention::PerLayer(vec![0.2, 0.4]));
        assert_eq!(partial.lambda, DEFAULT_LAMBDA);
    }
}
