//! Context-calibrated compression.
//!
//! The expected NLL ratio at retention `r` is modelled as
//!
//! ```text
//! k = α·nll(c) + β
//! f(r) = (exp(rk − k) − exp(−k)) / (1 − exp(−k))
//! ```
//!
//! which runs from `f(0) = 0` to `f(1) = 1` and is strictly increasing for `k > 0`.
//! `(α, β)` are fitted by an asymmetrically weighted least-squares fit, and the
//! smallest retention meeting a quality budget `τ` has the closed form
//! `r* = 1 + ln(τ(1 − e^{−k}) + e^{−k}) / k`.

use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_K_MIN: f64 = 1e-3;
pub const DEFAULT_UNDER_PENALTY: f64 = 4.0;
pub const DEFAULT_TAU: f64 = 0.95;
pub const MAX_ITERATIONS: usize = 200;

/// One observation: retention `r`, context NLL `nll_c` (nats/token) and the
/// measured NLL ratio `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibTriple {
    pub r: f64,
    pub nll_c: f64,
    pub y: f64,
}

impl CalibTriple {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::Data(format!("r={} not in (0, 1]", self.r)));
        }
        if !(self.nll_c.is_finite() && self.nll_c >= 0.0) {
            return Err(Error::Data(format!(
                "nll_c={} must be finite and >= 0",
                self.nll_c
            )));
        }
        if !(self.y.is_finite() && self.y > 0.0) {
            return Err(Error::Data(format!("y={} must be finite and > 0", self.y)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub alpha: f64,
    pub beta: f64,
    pub k_min: f64,
    pub fit_rmse: f64,
    pub n_points: usize,
}

impl CalibrationModel {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            k_min: DEFAULT_K_MIN,
            fit_rmse: 0.0,
            n_points: 0,
        }
    }

    /// Curve steepness for a context, floored at `k_min`.
    pub fn k(&self, nll_c: f64) -> f64 {
        (self.alpha * nll_c + self.beta).max(self.k_min)
    }
}

/// `f(r)` for a given steepness `k > 0`.
pub fn curve(r: f64, k: f64) -> f64 {
    if r >= 1.0 {
        return 1.0;
    }
    if r <= 0.0 {
        return 0.0;
    }
    // e^{(r−1)k} − e^{−k} = e^{(r−1)k}·(1 − e^{−rk}); both factors are stable.
    let num = ((r - 1.0) * k).exp() * -(-r * k).exp_m1();
    num / -(-k).exp_m1()
}

/// `∂f/∂k` at fixed `r`.
fn curve_dk(r: f64, k: f64) -> f64 {
    if r <= 0.0 || r >= 1.0 {
        return 0.0;
    }
    let a = ((r - 1.0) * k).exp();
    let e = (-k).exp();
    let den = -(-k).exp_m1();
    let num = a * -(-r * k).exp_m1();
    ((r - 1.0) * a + e) / den - num * e / (den * den)
}

/// The calibrated curve `f_{α,β}(r, c)`; exact at both endpoints.
pub fn calib_value(r: f64, nll_c: f64, model: &CalibrationModel) -> f64 {
    curve(r, model.k(nll_c))
}

/// Smallest retention whose predicted NLL ratio reaches `tau`.
pub fn invert_retention(nll_c: f64, tau: f64, model: &CalibrationModel) -> f64 {
    if tau >= 1.0 {
        return 1.0;
    }
    let k = model.k(nll_c);
    let e = (-k).exp();
    let r = 1.0 + (tau * -(-k).exp_m1() + e).ln() / k;
    r.clamp(f64::MIN_POSITIVE, 1.0)
}

fn residuals(
    triples: &[CalibTriple],
    alpha: f64,
    beta: f64,
    k_min: f64,
) -> impl Iterator<Item = f64> + '_ {
    triples
        .iter()
        .map(move |t| curve(t.r, (alpha * t.nll_c + beta).max(k_min)) - t.y)
}

fn weight(e: f64, under_penalty: f64) -> f64 {
    if e > 0.0 {
        under_penalty
    } else {
        1.0
    }
}

fn objective(triples: &[CalibTriple], p: Vector2<f64>, k_min: f64, under_penalty: f64) -> f64 {
    residuals(triples, p[0], p[1], k_min)
        .map(|e| weight(e, under_penalty) * e * e)
        .sum()
}

struct Run {
    params: Vector2<f64>,
    objective: f64,
    converged: bool,
    iterations: usize,
}

/// Levenberg-damped Gauss–Newton from one starting point. Weights are refreshed
/// from the residual signs at every iterate.
fn damped_gauss_newton(
    triples: &[CalibTriple],
    start: Vector2<f64>,
    k_min: f64,
    under_penalty: f64,
) -> Run {
    let mut p = start;
    let mut obj = objective(triples, p, k_min, under_penalty);
    let mut mu = 1e-3;
    for it in 0..MAX_ITERATIONS {
        let mut jtj = Matrix2::zeros();
        let mut jte = Vector2::zeros();
        for t in triples {
            let raw_k = p[0] * t.nll_c + p[1];
            let k = raw_k.max(k_min);
            let e = curve(t.r, k) - t.y;
            let w = weight(e, under_penalty);
            let dk = if raw_k > k_min { curve_dk(t.r, k) } else { 0.0 };
            let g = Vector2::new(dk * t.nll_c, dk);
            jtj += w * g * g.transpose();
            jte += w * e * g;
        }
        if jte.norm() < 1e-15 {
            return Run {
                params: p,
                objective: obj,
                converged: true,
                iterations: it,
            };
        }
        let mut accepted = false;
        while mu < 1e12 {
            let damped = jtj + Matrix2::from_diagonal(&(jtj.diagonal().map(|d| d.max(1e-12)) * mu));
            let Some(step) = damped.lu().solve(&-jte) else {
                mu *= 10.0;
                continue;
            };
            let cand = p + step;
            let cand_obj = objective(triples, cand, k_min, under_penalty);
            if cand_obj <= obj {
                let small_step = step.norm() <= 1e-12 * (1.0 + p.norm());
                let small_gain = obj - cand_obj <= 1e-15 * (1.0 + obj);
                p = cand;
                obj = cand_obj;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if small_step || (small_gain && step.norm() <= 1e-9 * (1.0 + p.norm())) {
                    return Run {
                        params: p,
                        objective: obj,
                        converged: true,
                        iterations: it + 1,
                    };
                }
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            // No descent direction left at any damping: a stationary point.
            return Run {
                params: p,
                objective: obj,
                converged: true,
                iterations: it + 1,
            };
        }
    }
    Run {
        params: p,
        objective: obj,
        converged: false,
        iterations: MAX_ITERATIONS,
    }
}

/// Fits `(α, β)` by minimising `Σ w(eᵢ)·eᵢ²` with `eᵢ = f(rᵢ) − yᵢ`, where
/// `w = under_penalty` when the curve over-predicts quality (`eᵢ > 0`) and 1
/// otherwise. Multi-start over a coarse grid; the best converged run wins.
pub fn fit_calibration(triples: &[CalibTriple], under_penalty: f64) -> Result<CalibrationModel> {
    if !(under_penalty.is_finite() && under_penalty >= 1.0) {
        return Err(Error::param(format!(
            "under_penalty {under_penalty} must be >= 1"
        )));
    }
    for t in triples {
        t.validate()?;
    }
    let mut rs: Vec<f64> = triples.iter().map(|t| t.r).collect();
    rs.sort_by(f64::total_cmp);
    rs.dedup();
    if triples.len() < 2 || rs.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least 2 triples with 2 distinct r values, got {} triples / {} distinct r",
            triples.len(),
            rs.len()
        )));
    }

    let k_min = DEFAULT_K_MIN;
    let mut best: Option<Run> = None;
    let mut last: Option<Run> = None;
    for &a0 in &[-1.0, 0.0, 0.5, 2.0] {
        for &b0 in &[0.1, 1.0, 3.0, 10.0] {
            let run = damped_gauss_newton(triples, Vector2::new(a0, b0), k_min, under_penalty);
            if run.converged {
                if best.as_ref().is_none_or(|b| run.objective < b.objective) {
                    best = Some(run);
                }
            } else if last.as_ref().is_none_or(|b| run.objective < b.objective) {
                last = Some(run);
            }
        }
    }
    let Some(run) = best else {
        let run = last.expect("at least one start");
        return Err(Error::Convergence {
            alpha: run.params[0],
            beta: run.params[1],
            iterations: run.iterations,
        });
    };
    let (alpha, beta) = (run.params[0], run.params[1]);
    let sq: f64 = residuals(triples, alpha, beta, k_min).map(|e| e * e).sum();
    Ok(CalibrationModel {
        alpha,
        beta,
        k_min,
        fit_rmse: (sq / triples.len() as f64).sqrt(),
        n_points: triples.len(),
    })
}

/// Parses `r,nll_c,y` CSV with a header row.
pub fn read_triples<R: Read>(reader: R) -> Result<Vec<CalibTriple>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["r", "nll_c", "y"] {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header r,nll_c,y, found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<CalibTriple>() {
        let t = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

pub fn load_triples(path: impl AsRef<Path>) -> Result<Vec<CalibTriple>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_triples(file)
}

/// One row of a retention query: per-context NLL in, retention out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionQuery {
    pub nll_c: f64,
    #[serde(default)]
    pub r_star: Option<f64>,
}

/// Reads the `nll_c` column of a CSV with a header row. Other columns are ignored.
pub fn read_contexts<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = headers
        .iter()
        .position(|h| h == "nll_c")
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing nll_c column".into(),
        })?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let v: f64 = rec
            .get(col)
            .unwrap_or("")
            .parse()
            .map_err(|e| Error::Parse {
                line,
                message: format!("nll_c: {e}"),
            })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                line,
                message: "nll_c must be finite".into(),
            });
        }
        out.push(v);
    }
    Ok(out)
}

/// Smallest retention per context meeting `tau`.
pub fn plan_retention(nlls: &[f64], tau: f64, model: &CalibrationModel) -> Vec<RetentionQuery> {
    nlls.iter()
        .map(|&nll_c| RetentionQuery {
            nll_c,
            r_star: Some(invert_retention(nll_c, tau, model)),
        })
        .collect()
}

pub fn save_model(model: &CalibrationModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(model).expect("model serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CalibrationModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model: CalibrationModel =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("model json: {e}")))?;
    if model.k_min.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        || !model.alpha.is_finite()
        || !model.beta.is_finite()
    {
        return Err(Error::Format(
            "model parameters must be finite with k_min > 0".into(),
        ));
    }
    Ok(model)
}
