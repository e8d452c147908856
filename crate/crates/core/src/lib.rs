//! Recurrent language models with parallel cells.
//!
//! Each recurrent layer replaces one cell of `m` hidden units with `n`
//! independent cells of `m / n` units whose outputs are concatenated. The
//! crate provides the cells (naive RNN and LSTM) with exact analytic
//! gradients, the parallel-cell layer, a stacked language model trained with
//! truncated BPTT and SGD, a binary checkpoint format, and the analysis tools
//! used to study trained models (cell masking, ensembling, parameter counts).

pub mod analysis;
pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pc_layer;
pub mod training;

pub use error::{CheckpointError, Error, Result};

/// The generator used for every random draw (initialisation and dropout).
/// ChaCha with 8 rounds: portable and bit-reproducible across platforms.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Generator seeded from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
