//! Dense matrices, small fully connected networks with analytic gradients,
//! AdamW and a finite-difference gradient checker.

pub mod adamw;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod par;
pub mod params;

pub use adamw::{adamw_step, AdamWConfig, OptState};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, FD_STEP};
pub use matrix::Matrix;
pub use mlp::{Activation, Dense, Mlp, MlpCache};
pub use par::Exec;
pub use params::Params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used everywhere randomness is needed.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for a named sub-stream of a run seed, so that e.g. per-epoch
/// shuffles do not depend on how many draws earlier stages consumed.
pub fn derived_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
