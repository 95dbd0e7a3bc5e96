//! Quantitative side-claims about the method: the generalization bound,
//! parameter and communication accounting, empirical Lipschitz constants of
//! the generator, and raw client embeddings for external visualization.
//!
//! Everything here is pure and single-threaded.

mod bound;
mod cost;
mod embeddings;
mod lipschitz;

pub use bound::{theorem1_rhs, BoundInputs, BoundTerms};
pub use cost::{
    cost_report, generator_crossover, serialized_server_scalars, write_cost_csv, CostReport,
};
pub use embeddings::{
    export_embeddings, group_distances, parse_embeddings, EmbeddingRow, GroupDistances,
};
pub use lipschitz::{empirical_lipschitz, LipschitzEstimate, LipschitzProbe};
