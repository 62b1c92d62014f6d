use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PLAN_VERSION: u32 = 1;

/// Number of tokens kept out of `n` at retention `r`: `max(1, ⌈r·n⌉)`.
///
/// A relative slack of 1e-12 absorbs products such as `0.35 * 20 = 7.000000000000001`
/// that would otherwise round up one token too far.
pub fn retained_count(n: usize, r: f64) -> usize {
    let x = r * n as f64;
    let k = (x - 1e-12 * x.max(1.0)).ceil();
    (k.max(1.0) as usize).min(n.max(1))
}

/// Token indices to keep for every (layer, head), plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPlan {
    pub version: u32,
    pub retention_target: f64,
    pub policy_name: String,
    pub seed: Option<u64>,
    /// `layers[l][h]` is the sorted list of kept token indices.
    pub layers: Vec<Vec<Vec<usize>>>,
    /// Per-layer retention when the policy used a layer schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_retention: Option<Vec<f64>>,
    /// Serialized policy and any other provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

impl RetentionPlan {
    pub fn new(
        retention_target: f64,
        policy_name: impl Into<String>,
        seed: Option<u64>,
        layers: Vec<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        let plan = Self {
            version: PLAN_VERSION,
            retention_target,
            policy_name: policy_name.into(),
            seed,
            layers,
            layer_retention: None,
            metadata: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Checks the structural invariants: retention in (0, 1], every head keeps at
    /// least one token, indices strictly increasing.
    pub fn validate(&self) -> Result<()> {
        let in_range = |r: f64| r > 0.0 && r <= 1.0;
        if !in_range(self.retention_target) {
            return Err(Error::param(format!(
                "retention_target {} not in (0, 1]",
                self.retention_target
            )));
        }
        if let Some(lr) = &self.layer_retention {
            if lr.len() != self.layers.len() || !lr.iter().all(|&r| in_range(r)) {
                return Err(Error::param(
                    "layer_retention must hold one value in (0, 1] per layer",
                ));
            }
        }
        if self.layers.is_empty() {
            return Err(Error::param("plan has no layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.is_empty() {
                return Err(Error::param(format!("layer {l} has no heads")));
            }
            for (h, idx) in layer.iter().enumerate() {
                if idx.is_empty() {
                    return Err(Error::param(format!(
                        "layer {l} head {h} retains no tokens"
                    )));
                }
                if idx.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::param(format!(
                        "layer {l} head {h}: indices must be strictly increasing"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn retained(&self, layer: usize, head: usize) -> &[usize] {
        &self.layers[layer][head]
    }
}

pub fn save_plan(plan: &RetentionPlan, path: impl AsRef<Path>) -> Result<()> {
    plan.validate()?;
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(plan).expect("plan serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<RetentionPlan> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let plan: RetentionPlan =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("plan json: {e}")))?;
    if plan.version != PLAN_VERSION {
        return Err(Error::Format(format!(
            "unsupported plan version {}",
            plan.version
        )));
    }
    plan.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(retained_count(3, 0.34), 2);
        assert_eq!(retained_count(10_000, 0.3), 3000);
        assert_eq!(retained_count(20, 0.35), 7);
        assert_eq!(retained_count(10, 0.01), 1);
        assert_eq!(retained_count(7, 1.0), 7);
        assert_eq!(retained_count(1000, 0.1), 100);
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        let plan =
            RetentionPlan::new(0.3, "compactor", Some(9), vec![vec![vec![0, 2, 5]]]).unwrap();
        save_plan(&plan, &path).unwrap();
        assert_eq!(load_plan(&path).unwrap(), plan);
    }

    #[test]
    fn duplicate_rejected() {
        assert!(RetentionPlan::new(0.3, "x", None, vec![vec![vec![0, 0, 5]]]).is_err());
    }

    #[test]
    fn empty_head_rejected() {
        assert!(RetentionPlan::new(0.3, "x", None, vec![vec![vec![]]]).is_err());
        let mut plan = RetentionPlan::new(0.3, "x", None, vec![vec![vec![1]]]).unwrap();
        plan.layers[0][0].clear();
        let dir = tempfile::tempdir().unwrap();
        assert!(save_plan(&plan, dir.path().join("p.json")).is_err());
    }

    #[test]
    fn malformed_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        fs::write(&path, "{\"version\": 1, \"layers\": 3}").unwrap();
        assert!(matches!(load_plan(&path), Err(Error::Format(_))));
        fs::write(
            &path,
            r#"{"version":1,"retention_target":0.5,"policy_name":"x","seed":null,"layers":[[[3,1]]]}"#,
        )
        .unwrap();
        assert!(matches!(load_plan(&path), Err(Error::Format(_))));
    }

    #[test]
    fn unwritable_path() {
        let plan = RetentionPlan::new(0.3, "x", None, vec![vec![vec![1]]]).unwrap();
        let err = save_plan(&plan, "/nonexistent-dir/for/sure/plan.json").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
