//! Contrastive complementary labeling for semi-supervised classification.
//!
//! Unlabeled views are split into a high-confidence tier, which receives a
//! pseudo-label, and a low-confidence tier, which only receives a set of
//! classes it is unlikely to belong to. Those sets define extra negative
//! pairs for a contrastive loss trained alongside a consistency objective.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod labeling;
pub mod losses;
pub mod network;
pub mod pairs;
pub mod rng;
pub mod trainer;

pub use config::RunConfig;
pub use error::{CclError, Result};
pub use trainer::{AblationMode, Trainer};
