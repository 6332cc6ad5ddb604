//! Overfitted image codec: a per-image latent pyramid and spatial
//! hyperprior decoded by small learned networks, with an autoregressive
//! Laplace entropy model and a range coder.

pub mod coder;
pub mod context;
pub mod decoder;
pub mod diffgraph;
pub mod encoder;
pub mod entropy;
pub mod eval;
pub mod pyramid;
pub mod quantize;
