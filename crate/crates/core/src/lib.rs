//! Learning discrete mode families from a handful of demonstrations.
//!
//! The pipeline replays demonstrations with counterfactual perturbations,
//! labels the replays by task success, and trains a classifier whose mode
//! beliefs explain those labels through a feasibility matrix over mode
//! transitions. The learned modes then drive per-mode imitation policies
//! and planners.

pub mod error;
pub mod envs;
pub mod geometry;
pub mod nnet;
pub mod trajectory;
pub mod grounding;
pub mod llmclient;
pub mod policy;
pub mod demos;
pub mod perturb;
pub mod evalkit;

/// Independent seed for stream `stream` of a master seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
