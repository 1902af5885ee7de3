//! Small dense networks with hand-written reverse mode and Adam.
//!
//! Every actor and critic in the crate is an [`Mlp`]: `hidden_layers` dense
//! layers of width `hidden_dim` with a shared activation, followed by a linear
//! output layer. Parameters live in one flat [`ParameterBlock`] so that
//! optimizer state, Polyak averaging and checkpointing operate on plain slices.

mod activation;
mod adam;
mod mlp;

pub use activation::Activation;
pub use adam::{adam_step, AdamConfig};
pub use mlp::{backward, forward, init_params, Mlp, MlpSpec, ParameterBlock, Tape};
