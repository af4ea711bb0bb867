//! Storage-budgeted continual merging of low-rank adapters.
//!
//! Adapters arrive one at a time. The [`engine::Engine`] either gives each one
//! a storage slot or merges it into the most similar stored adapter, keeping a
//! history of which tasks every slot absorbed so requests can be routed.

pub mod adapter;
pub mod bench;
pub mod delta;
pub mod engine;
pub mod error;
pub mod format;
pub mod merge;
pub mod persist;
pub mod similarity;

pub use adapter::{FactorPair, LayerKey, LoraAdapter, Projection};
pub use engine::{Action, Engine, IngestDecision, MergeHistory, PolicyConfig, Variant};
pub use error::{Error, Result};
