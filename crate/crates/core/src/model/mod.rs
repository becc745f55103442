//! Triple-tower convolutional matching models.
//!
//! Three variants share one pipeline: each of the query, title and answer is
//! embedded, passed through `L` convolution blocks whose filters are shared
//! by all towers, and summarized per level by column averaging. The per-level
//! query/title and query/answer cosines feed a logistic-regression output.
//!
//! * [`Variant::Tcnn`] convolves each representation on its own.
//! * [`Variant::Atcnn1`] adds one attention feature map per tower and pools
//!   with attention weights.
//! * [`Variant::Atcnn2`] gives the query two attention maps and pads the
//!   title and answer stacks with a zero channel.

mod attention;
mod block;
mod config;
pub mod gradcheck;
mod network;
mod params;

pub use attention::{
    atcnn1_attention_maps, atcnn2_attention_maps, attention_matrix, attention_matrix_backward,
    pooling_weights, pooling_weights_backward, AttentionWeights,
};
pub use block::{block_forward, BlockOutput};
pub use config::{ModelConfig, Variant};
pub use network::{
    features, gradients, gradients_masked, score, EncodedTriple, LossConfig, Score, TowerMask,
};
pub use params::{BlockParams, ModelParams};

/// Tower positions inside per-tower arrays.
pub const QUERY: usize = 0;
pub const TITLE: usize = 1;
pub const ANSWER: usize = 2;
