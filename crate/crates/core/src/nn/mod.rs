//! Minimal dense neural-network toolkit: tensors, parameters, Adam, and two
//! evaluation backends (forward-mode tangents and a reverse-mode tape).

mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Dual, DualGraph, Graph, NodeId, Tape};
pub use params::{Adam, Grads, Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Seeds a ChaCha8 stream; all stochastic components derive from this.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
