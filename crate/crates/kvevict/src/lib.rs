//! Query-agnostic KV-cache token eviction.
//!
//! Tokens are ranked per (layer, KV head) by blending two signals:
//!
//! * outlier scores: approximate statistical leverage of the pre-position-embedding
//!   keys, computed from a right sketch `K·Φ` ([`sketch`], [`leverage`]);
//! * attention scores: column sums of chunked, non-causal attention, mean pooled and
//!   scaled by value norms ([`attnscore`]).
//!
//! The blended scores drive a per-head top-`⌈r·N⌉` selection ([`evict`]). The
//! [`calibrate`] module fits a two-parameter degradation curve to observed NLL
//! ratios and inverts it to choose the smallest retention a context supports.
//!
//! Per-head scoring, attention chunks and verification trials run on rayon when the
//! `parallel` feature (on by default) is enabled, and sequentially otherwise.

pub mod attnscore;
pub mod calibrate;
pub mod error;
pub mod evict;
pub mod harness;
pub mod kvstore;
pub mod leverage;
pub mod par;
pub mod sketch;

mod seed;

pub use error::{Error, Result};
pub use kvstore::{HeadKV, KVBundle, RetentionPlan, RowMatrix, ScoreKind, ScoreVector};
pub use seed::derive_seed;
