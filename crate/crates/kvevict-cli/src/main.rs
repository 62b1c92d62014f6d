//! `kvc`: synthesize bundles, score and evict tokens, calibrate retention, and run
//! verification, benchmark and sweep reports.
//!
//! Exit codes: 0 on success, 2 on invalid input, 3 after a verification report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kvevict::calibrate::{
    fit_calibration, invert_retention, load_model, load_triples, plan_retention, read_contexts,
    save_model, DEFAULT_TAU, DEFAULT_UNDER_PENALTY,
};
use kvevict::evict::{plan_from_scores, score_bundle, EvictionPolicy, PolicyKind, Retention};
use kvevict::harness::{
    self, bench_scaling, needle_positions, sweep_policies, synth_bundle, verify_spectral,
    verify_spectral_sweep, verify_thm2, BenchOptions, SynthKind, SynthProfile,
};
use kvevict::kvstore::{apply_plan, load_bundle, load_plan, save_bundle, save_plan};

#[derive(Parser)]
#[command(name = "kvc", version, about = "KV-cache token eviction toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a deterministic synthetic bundle.
    Synth {
        #[command(flatten)]
        profile: ProfileArgs,
        #[arg(long, env = "KVC_OUT")]
        out: PathBuf,
    },
    /// Dump per-token scores as CSV.
    Score {
        #[arg(long, env = "KVC_BUNDLE")]
        bundle: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Output CSV; stdout when omitted.
        #[arg(long, env = "KVC_OUT")]
        out: Option<PathBuf>,
    },
    /// Compute a retention plan.
    Evict {
        #[arg(long, env = "KVC_BUNDLE")]
        bundle: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, env = "KVC_OUT")]
        out: PathBuf,
    },
    /// Apply a retention plan to a bundle.
    Apply {
        #[arg(long, env = "KVC_BUNDLE")]
        bundle: PathBuf,
        #[arg(long, env = "KVC_PLAN")]
        plan: PathBuf,
        #[arg(long, env = "KVC_OUT")]
        out: PathBuf,
    },
    /// Fit or query the retention calibration model.
    Calib {
        #[command(subcommand)]
        cmd: CalibCmd,
    },
    /// Empirical checks of the leverage bounds. Always exits with status 3.
    Verify {
        #[command(subcommand)]
        cmd: VerifyCmd,
    },
    /// Median scoring time per sequence length, as CSV.
    Bench {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, env = "KVC_NS", value_delimiter = ',', default_values_t = [16384usize, 32768, 65536, 131072, 262144])]
        ns: Vec<usize>,
        #[arg(long, env = "KVC_REPEATS", default_value_t = 9)]
        repeats: usize,
        #[arg(long, env = "KVC_WARMUP", default_value_t = 2)]
        warmup: usize,
        #[arg(long, env = "KVC_HEADS", default_value_t = 1)]
        heads: usize,
        #[arg(long, env = "KVC_HEAD_DIM", default_value_t = 64)]
        head_dim: usize,
        #[arg(long, env = "KVC_OUT")]
        out: Option<PathBuf>,
    },
    /// Compare policies across retention levels, as CSV.
    Sweep {
        /// Bundle to sweep; a synthetic one is generated from the profile flags otherwise.
        #[arg(long, env = "KVC_BUNDLE")]
        bundle: Option<PathBuf>,
        #[command(flatten)]
        profile: ProfileArgs,
        #[arg(long, env = "KVC_POLICIES", value_delimiter = ',', default_values_t = ["compactor".to_string(), "random".to_string()])]
        policies: Vec<String>,
        #[arg(long, env = "KVC_RS", value_delimiter = ',', default_values_t = [0.1f64])]
        rs: Vec<f64>,
        /// Number of seeds; each one regenerates the synthetic bundle and reseeds the policy.
        #[arg(long, env = "KVC_SEEDS", default_value_t = 1)]
        seeds: u64,
        #[arg(long, env = "KVC_OUT")]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CalibCmd {
    /// Fit (α, β) to `r,nll_c,y` triples.
    Fit {
        #[arg(long, env = "KVC_TRIPLES")]
        triples: PathBuf,
        #[arg(long, env = "KVC_UNDER_PENALTY", default_value_t = DEFAULT_UNDER_PENALTY)]
        under_penalty: f64,
        #[arg(long, env = "KVC_OUT")]
        out: PathBuf,
    },
    /// Smallest retention that meets `tau`, for one NLL or a CSV of them.
    Plan {
        #[arg(long, env = "KVC_MODEL")]
        model: PathBuf,
        #[arg(
            long,
            env = "KVC_NLL",
            conflicts_with = "input",
            required_unless_present = "input"
        )]
        nll: Option<f64>,
        /// CSV with an `nll_c` column.
        #[arg(long, env = "KVC_INPUT")]
        input: Option<PathBuf>,
        #[arg(long, env = "KVC_TAU", default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, env = "KVC_OUT")]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Leverage-sampling spectral sandwich.
    Thm1 {
        #[arg(long, env = "KVC_N", default_value_t = 2000)]
        n: usize,
        #[arg(long, env = "KVC_D", default_value_t = 16)]
        d: usize,
        /// Explicit sample size; overrides `--c`.
        #[arg(long, env = "KVC_K")]
        k: Option<usize>,
        #[arg(long, env = "KVC_C", value_delimiter = ',', default_values_t = [1.0f64, 2.0, 4.0, 8.0])]
        c: Vec<f64>,
        #[arg(long, env = "KVC_EPSILON", default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, env = "KVC_DELTA", default_value_t = 0.1)]
        delta: f64,
        #[arg(long, env = "KVC_TRIALS", default_value_t = 50)]
        trials: usize,
        #[arg(long, env = "KVC_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "KVC_OUT")]
        out: Option<PathBuf>,
    },
    /// Sketched-leverage sandwich on matrices with a fixed condition number.
    Thm2 {
        #[arg(long, env = "KVC_N", default_value_t = 1024)]
        n: usize,
        #[arg(long, env = "KVC_D", default_value_t = 64)]
        d: usize,
        #[arg(long, env = "KVC_K", default_value_t = 64)]
        k: usize,
        #[arg(long, env = "KVC_TRIALS", default_value_t = 100)]
        trials: usize,
        #[arg(long, env = "KVC_KAPPA", default_value_t = 2.0)]
        kappa: f64,
        #[arg(long, env = "KVC_EPSILON", default_value_t = 0.9)]
        epsilon: f64,
        #[arg(long, env = "KVC_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "KVC_OUT")]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ProfileArgs {
    /// gaussian_iid, low_rank_plus_noise, needle or clustered.
    #[arg(long, env = "KVC_KIND", default_value = "needle")]
    kind: String,
    #[arg(long, env = "KVC_N", default_value_t = 1000)]
    n: usize,
    #[arg(long, env = "KVC_D", default_value_t = 64)]
    d: usize,
    #[arg(long, env = "KVC_RANK", default_value_t = 8)]
    rank: usize,
    #[arg(long, env = "KVC_NEEDLES", default_value_t = 1)]
    needles: usize,
    #[arg(long, env = "KVC_NOISE", default_value_t = 0.1)]
    noise: f64,
    #[arg(long, env = "KVC_LAYERS", default_value_t = 1)]
    layers: usize,
    #[arg(long, env = "KVC_HEADS", default_value_t = 1)]
    heads: usize,
    #[arg(long, env = "KVC_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PolicyArgs {
    /// Policy JSON file, or a policy name (compactor, snapkv, h2o, random, leverage_only).
    #[arg(long, env = "KVC_POLICY", default_value = "compactor")]
    policy: String,
    /// Overrides the policy's retention ratio.
    #[arg(long, env = "KVC_R")]
    r: Option<f64>,
    #[arg(long, env = "KVC_LAMBDA")]
    lambda: Option<f64>,
    #[arg(long = "policy-seed", env = "KVC_POLICY_SEED")]
    seed: Option<u64>,
}

fn parse_name<T: serde::de::DeserializeOwned>(what: &str, name: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .with_context(|| format!("unknown {what} '{name}'"))
}

impl ProfileArgs {
    fn profile(&self) -> Result<SynthProfile> {
        Ok(SynthProfile {
            kind: parse_name::<SynthKind>("profile kind", &self.kind)?,
            n: self.n,
            d: self.d,
            rank: self.rank,
            needle_count: self.needles,
            noise_sigma: self.noise,
            seed: self.seed,
            n_layers: self.layers,
            n_heads: self.heads,
        })
    }
}

impl PolicyArgs {
    fn policy(&self) -> Result<EvictionPolicy> {
        let mut p = if Path::new(&self.policy).is_file() {
            let text = std::fs::read_to_string(&self.policy)
                .with_context(|| format!("reading {}", self.policy))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing policy {}", self.policy))?
        } else {
            EvictionPolicy::new(parse_name::<PolicyKind>("policy", &self.policy)?, 0.5)
        };
        if let Some(r) = self.r {
            p.retention = Retention::Uniform(r);
        }
        if let Some(l) = self.lambda {
            p.lambda = l;
        }
        if let Some(s) = self.seed {
            p.seed = s;
        }
        Ok(p)
    }
}

fn emit<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => harness::write_csv_file(rows, p)?,
        None => harness::write_csv(rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Synth { profile, out } => {
            let b = synth_bundle(&profile.profile()?)?;
            save_bundle(&b, &out)?;
        }
        Cmd::Score {
            bundle,
            policy,
            out,
        } => {
            let b = load_bundle(&bundle)?;
            let scores = score_bundle(&b, &policy.policy()?)?;
            emit(&harness::score_rows(&scores), out.as_deref())?;
        }
        Cmd::Evict {
            bundle,
            policy,
            out,
        } => {
            let b = load_bundle(&bundle)?;
            let p = policy.policy()?;
            let scores = score_bundle(&b, &p)?;
            save_plan(&plan_from_scores(&b, &p, &scores)?, &out)?;
        }
        Cmd::Apply { bundle, plan, out } => {
            let compact = apply_plan(&load_bundle(&bundle)?, &load_plan(&plan)?)?;
            save_bundle(&compact, &out)?;
        }
        Cmd::Calib {
            cmd:
                CalibCmd::Fit {
                    triples,
                    under_penalty,
                    out,
                },
        } => {
            let model = fit_calibration(&load_triples(&triples)?, under_penalty)?;
            save_model(&model, &out)?;
        }
        Cmd::Calib {
            cmd:
                CalibCmd::Plan {
                    model,
                    nll,
                    input,
                    tau,
                    out,
                },
        } => {
            if !(tau > 0.0 && tau <= 1.0) {
                bail!("tau {tau} must lie in (0, 1]");
            }
            let m = load_model(&model)?;
            match (nll, input) {
                (Some(x), _) => println!("{}", invert_retention(x, tau, &m)),
                (None, Some(path)) => {
                    let file = std::fs::File::open(&path)
                        .with_context(|| format!("opening {}", path.display()))?;
                    emit(
                        &plan_retention(&read_contexts(file)?, tau, &m),
                        out.as_deref(),
                    )?;
                }
                (None, None) => bail!("one of --nll or --input is required"),
            }
        }
        Cmd::Verify { cmd } => {
            match cmd {
                VerifyCmd::Thm1 {
                    n,
                    d,
                    k,
                    c,
                    epsilon,
                    delta,
                    trials,
                    seed,
                    out,
                } => {
                    let rows = match k {
                        Some(k) => vec![verify_spectral(n, d, k, trials, epsilon, delta, seed)?],
                        None => verify_spectral_sweep(n, d, trials, epsilon, delta, &c, seed)?,
                    };
                    emit(&rows, out.as_deref())?;
                }
                VerifyCmd::Thm2 {
                    n,
                    d,
                    k,
                    trials,
                    kappa,
                    epsilon,
                    seed,
                    out,
                } => {
                    emit(
                        &[verify_thm2(n, d, k, trials, kappa, epsilon, seed)?],
                        out.as_deref(),
                    )?;
                }
            }
            return Ok(ExitCode::from(3));
        }
        Cmd::Bench {
            policy,
            ns,
            repeats,
            warmup,
            heads,
            head_dim,
            out,
        } => {
            let opts = BenchOptions {
                warmup,
                heads,
                head_dim,
                seed: policy.seed.unwrap_or(0),
            };
            let rep = bench_scaling(&policy.policy()?, &ns, repeats, &opts)?;
            emit(&rep.rows, out.as_deref())?;
        }
        Cmd::Sweep {
            bundle,
            profile,
            policies,
            rs,
            seeds,
            out,
        } => {
            let base = profile.profile()?;
            let mut rows = Vec::new();
            for s in 0..seeds.max(1) {
                let (b, needles) = match &bundle {
                    Some(path) => (load_bundle(path)?, None),
                    None => {
                        let p = SynthProfile {
                            seed: base.seed + s,
                            ..base
                        };
                        let nd = needle_positions(&p);
                        (synth_bundle(&p)?, (!nd.is_empty()).then_some(nd))
                    }
                };
                let pols = policies
                    .iter()
                    .map(|name| {
                        let mut p = PolicyArgs {
                            policy: name.clone(),
                            r: None,
                            lambda: None,
                            seed: None,
                        }
                        .policy()?;
                        p.seed = s;
                        Ok((p.kind.name().to_string(), p))
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.extend(sweep_policies(&b, &pols, &rs, needles.as_deref())?);
            }
            emit(&rows, out.as_deref())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
