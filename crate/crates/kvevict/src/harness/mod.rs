//! Experiment harness: synthetic fixtures, bound verification sweeps, policy
//! sweeps, scaling benchmarks and CSV reports.

mod bench;
mod report;
mod sweep;
mod synth;
mod verify;

pub use bench::{bench_scaling, loglog_slope, median, BenchOptions, ScalingReport, ScalingRow};
pub use report::{score_rows, write_csv, write_csv_file, ScoreRow};
pub use sweep::{sweep_policies, SweepRow};
pub use synth::{
    gaussian_matrix, needle_positions, random_orthonormal, synth_bundle, SynthKind, SynthProfile,
};
pub use verify::{
    leverage_ratios, sampled_gram, sandwich_margins, spectral_sample_size,
    tightest_sandwich_epsilon, verify_spectral, verify_spectral_sweep, verify_thm2, SandwichReport,
    SpectralReport,
};
