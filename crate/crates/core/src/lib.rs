//! Group-based distinctive image captioning: dataset handling, similar-image
//! grouping, a transformer captioner with group-based memory attention,
//! distinctiveness losses, metrics and training.

pub mod corpus;
mod error;
pub mod gma;
pub mod grouping;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
