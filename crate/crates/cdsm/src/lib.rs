//! Cascaded semantic matching on textual graphs.
//!
//! A two-stage matcher for document graphs: a lightweight CNN-based neighbor
//! selector scores and truncates each node's neighbors per matching task, and
//! a transformer-based matching network computes relevance over the selected
//! few. The selector is trained by weak supervision: the trained matcher
//! annotates which neighbors improve its own predictions, and the selector
//! learns those preferences contrastively.

pub mod error;
pub mod graphstore;
pub mod numerics;

pub use error::{CdsmError, Result};
