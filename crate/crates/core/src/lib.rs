//! Meta-learned neighbor dictionaries.
//!
//! A parametric estimator `f_phi` is fine-tuned for every query by a few
//! gradient steps on a loss over a learnable dictionary of `(key, value)`
//! neighbors, weighted by soft attention between the query and the keys. The
//! estimator's starting point, the dictionary, the inner step size and an
//! optional feature extractor are trained end-to-end through that inner step.
//! With a constant estimator and keys drawn from the training set the scheme
//! reduces to k-nearest-neighbor averaging (see [`knn`]).
//!
//! Module map:
//! - [`diff`]: reverse-mode autodiff with gradients of gradients
//! - [`dictionary`]: the neighbor dictionary and attention
//! - [`estimator`]: MLP extractors, dot and cosine output heads, losses
//! - [`meta`]: inner fine-tuning, outer/total losses, training, prediction
//! - [`knn`]: exact kNN baselines and the constant-estimator solution
//! - [`optim`]: AdamW and SGD
//! - [`data`]: synthetic spirals, delimited-file loading, splits, normalization

pub mod data;
pub mod diff;
pub mod dictionary;
pub mod error;
pub mod estimator;
pub mod knn;
pub mod meta;
pub mod optim;

pub use diff::{gradient, Tensor};
pub use dictionary::{Metric, NeighborDictionary, ValueMode};
pub use error::{Error, Result};
pub use estimator::{HeadSpec, MlpSpec, OutputLayer, Task};
pub use meta::{AlphaMode, MetaModel, ModelSpec};

/// Seeded generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
