//! Neural building blocks: GRU stacks, Transformer encoder blocks, windowed
//! local attention and fully connected heads.
//!
//! Layers own only [`ParamId`]s; the tensors live in a [`ParamSet`] and are
//! bound onto a [`Graph`](crate::Graph) once per step.

mod attention;
mod gru;
mod linear;
mod params;

pub use attention::{
    add_positional_encoding, attention_weights, local_window_mask, positional_encoding,
    scaled_dot_attention, LocalAttention, TransformerBlock, TransformerConfig,
};
pub use gru::{Gru, GruLayer};
pub use linear::{linear_forward, Linear};
pub use params::{Bound, ParamId, ParamInit, ParamSet};
