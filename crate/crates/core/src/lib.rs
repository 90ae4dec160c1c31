//! Taxonomy-aware multi-level hypergraph classification of hierarchical
//! note corpora.
//!
//! Each entity (a patient) becomes a hypergraph whose word nodes are joined
//! by note-level and taxonomy-level hyperedges. A staged message-passing
//! network (global, then note-level, then taxonomy-level) embeds the graph
//! and a pooled readout predicts a binary label. Gradients are written out
//! by hand and verified against finite differences.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod hypergraph;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
