//! Surrogate task metric and the normalized aggregate score.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use serde::Serialize;

use crate::adapter::LoraAdapter;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::similarity::{adapter_similarity, PreparedAdapter};

/// Clamped cosine to the task's own adapter. The single-task adapter scores
/// exactly 1 on its own task, so this is already the normalized ratio.
pub fn surrogate_metric(candidate: &LoraAdapter, single_task: &LoraAdapter) -> Result<f64> {
    Ok(adapter_similarity(candidate, single_task)?.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreEntry {
    /// Mean of `ratios`.
    pub score: f64,
    /// Per seen task, in arrival order.
    pub ratios: Vec<f64>,
}

/// Scores every task seen so far through route and load. `originals[t - 1]`
/// is the single-task adapter of task index `t`.
pub fn aggregate_score(engine: &Engine, originals: &[LoraAdapter]) -> Result<ScoreEntry> {
    let prepared: Vec<PreparedAdapter> = originals.iter().map(PreparedAdapter::new).collect();
    aggregate_score_prepared(engine, &prepared)
}

/// [`aggregate_score`] with the originals already prepared.
pub fn aggregate_score_prepared(engine: &Engine, originals: &[PreparedAdapter]) -> Result<ScoreEntry> {
    let seen = engine.task_ids().len();
    if originals.len() < seen {
        return Err(Error::InsufficientData(format!(
            "{seen} tasks ingested but only {} originals given",
            originals.len()
        )));
    }
    let mut loaded: BTreeMap<u64, PreparedAdapter> = BTreeMap::new();
    let mut ratios = Vec::with_capacity(seen);
    for t in 1..=seen {
        let key = engine.route(t)?;
        let slot = match loaded.entry(key) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(PreparedAdapter::new(engine.load_for_inference(key)?)),
        };
        ratios.push(slot.similarity(&originals[t - 1])?.max(0.0));
    }
    let score = if seen == 0 {
        0.0
    } else {
        ratios.iter().sum::<f64>() / seen as f64
    };
    Ok(ScoreEntry { score, ratios })
}
