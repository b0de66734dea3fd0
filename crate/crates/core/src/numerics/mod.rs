//! Dense tensors, tanh MLPs with hand-derived backprop, Adam, and seeded sampling.

mod adam;
pub mod checkpoint;
mod embed;
mod mlp;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use embed::{sinusoidal_embed, sinusoidal_embed_into};
pub use mlp::{ForwardTrace, Layer, Mlp};
pub use rng::{derive_seed, SeededRng};
pub use tensor::Tensor;
