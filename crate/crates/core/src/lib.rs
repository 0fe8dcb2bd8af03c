//! Trace-driven model of a secure branch prediction unit built from a
//! three-skew encrypted pattern history table and a decoupled two-skew branch
//! target buffer with load-balancing indexing and global replacement.
//!
//! Alongside the predictor structures the crate carries the analysis and
//! attack harness used to evaluate them: a bins-and-balls Monte Carlo engine,
//! closed-form attack-cost and steady-state occupancy evaluation, executable
//! attacker strategies, and trace ingestion.

pub mod analytics;
pub mod attacks;
pub mod baseline;
pub mod binsballs;
pub mod cibtb;
pub mod cipht;
pub mod config;
pub mod error;
pub mod keying;
pub mod metrics;
pub mod selftest;
pub mod trace;

pub use config::SimConfig;
pub use error::{Error, Result};
pub use keying::{KeyBundle, MappingMode};
pub use metrics::RunMetrics;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed used whenever the caller does not supply one.
pub const DEFAULT_SEED: u64 = 0x00C1_B9D0_5EED_0001;

/// Device secret standing in for the per-chip PUF response.
pub const DEFAULT_DEVICE_SECRET: u64 = 0x9E37_79B9_7F4A_7C15;

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
