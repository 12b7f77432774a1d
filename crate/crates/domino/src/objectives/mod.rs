//! Contrastive and reconstructive training objectives over a pair graph.
//!
//! Every objective in the grid is a weighted set of edges between modality
//! representations: conv features against latents (CR, XX), conv features
//! against conv features (CC), latent against latent (RR, CCA), plus
//! reconstruction (AE) and supervised (SUP) baselines. InfoNCE edges share
//! one critic form: scaled dot products, tanh clipping, a floor term for the
//! missing positive, and a squared-score penalty.

mod edges;
mod graph;
mod infonce;
mod suite;

pub use edges::{edge_loss, total_loss, ModalityBatch, ProjectionCache, SOFT_CCA_EPS};
pub use graph::{Edge, PairGraph, WeightedEdge};
pub use infonce::{critic_scores, infonce, infonce_from_raw, infonce_symmetric, CriticConfig};
pub use suite::edge_checks;
