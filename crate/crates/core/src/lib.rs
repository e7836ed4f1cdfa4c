// NaN-rejecting range checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod par;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod gpm;
pub mod memory;
pub mod nn;
pub mod owl;
pub mod sscl;

pub type SoulRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SoulRng {
    use rand::SeedableRng;
    SoulRng::seed_from_u64(seed)
}
