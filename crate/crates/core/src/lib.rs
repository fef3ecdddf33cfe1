//! Neural construction of routes on real-world, asymmetric road data.
//!
//! The crate is organised bottom-up:
//!
//! - [`geodata`]: geographic primitives, the base-map model and its binary container.
//! - [`ingest`]: base maps from an OSRM table service or a synthetic topology.
//! - [`instancegen`]: millisecond-scale subsampling of routing instances.
//! - [`envs`]: exact ATSP / ACVRP / ACVRPTW state machines.
//! - [`numerics`]: a small reverse-mode tensor tape and gradient checking.
//! - [`model`]: the policy (gated initial embedding, neural adaptive bias,
//!   attention-free encoder, log-distance decoder).
//! - [`trainer`]: REINFORCE with the shared multi-start baseline.
//! - [`baselines`]: exact and heuristic reference solvers.
//! - [`eval`]: gap reports shared by the CLI and the desk suite.

pub mod baselines;
pub mod envs;
pub mod eval;
pub mod geodata;
pub mod ingest;
pub mod instancegen;
pub mod matrix;
pub mod model;
pub mod numerics;
pub mod suite;
pub mod trainer;

pub use envs::{EnvError, EnvState, Solution};
pub use geodata::{BBox, BaseMap, GeoPoint};
pub use instancegen::{RoutingInstance, Sampler, Task};
pub use matrix::Matrix;
pub use model::{ModelConfig, Policy, Trajectory};
pub use numerics::{ParamStore, Tensor};
pub use trainer::TrainConfig;

/// Derives an independent 64-bit stream seed from a base seed and a counter.
///
/// SplitMix64 finaliser; used wherever per-item RNG streams must be
/// reproducible regardless of iteration order or thread count.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
