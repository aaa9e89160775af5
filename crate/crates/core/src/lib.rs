//! Graph contrastive collaborative filtering with an SVD-reconstructed view.
//!
//! A parameter-free GCN propagates user and item embeddings over the
//! degree-normalized interaction graph, while a rank-`r` randomized SVD of
//! the same graph supplies a second, globally-smoothed view. Training
//! combines a BPR ranking loss with per-layer InfoNCE between the two views
//! and L2 regularization; gradients are hand-derived.

pub mod data;
pub mod eval;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod rng;

pub use data::InteractionDataset;
pub use linalg::{CsrMatrix, DenseMatrix, SvdFactors};
pub use model::{HyperParams, ModelState};
