//! Context-aware multi-agent deep Q-learning for multi-stakeholder EV charging
//! coordination, together with the simulator, baselines and metrics used to
//! evaluate it.

pub mod agent;
pub mod baselines;
pub mod context;
pub mod environment;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// SplitMix64 finaliser over `a ^ rotate(b)`; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
