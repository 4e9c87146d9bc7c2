//! Dataset distillation by progressive trajectory matching.
//!
//! The pipeline has three stages:
//!
//! 1. [`buffer`]: train teacher networks on the real data and record their
//!    parameter trajectories.
//! 2. [`distill`]: learn a small synthetic set whose student trajectories,
//!    always started from a teacher's initialization and matched over a
//!    growing number of steps, land where the teacher's did. A class-masked
//!    kernel MMD term keeps the two halves of the synthetic set apart, and
//!    scheduled rollbacks of one half keep that term from running away.
//! 3. [`evaldata`]: train fresh networks on the synthetic set and measure
//!    them on real test data.
//!
//! Everything is built on the small second-order autograd engine in
//! [`tensor`].

pub mod augment;
pub mod binio;
pub mod buffer;
pub mod distill;
pub mod error;
pub mod evaldata;
pub mod gradcheck;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};

/// Independent child seed for `stream` under `master` (splitmix64 finalizer),
/// so per-expert, per-run and per-iteration generators never share state.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
