//! The online merging state machine: slot allocation versus merging under a
//! storage budget, the merge history, and history-based routing.
//!
//! Ingest takes `&mut self` and route/load take `&self`, so the borrow checker
//! enforces the single-writer discipline. Every ingest computes its full result
//! before touching the store, so an error leaves the state unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adapter::{LayerKey, LoraAdapter};
use crate::delta::MergedDelta;
use crate::error::{Error, Result};
use crate::merge::{factor_average, refactor, AdapterMeta, MergeOperator, OperatorKind, RankMode, RankPolicy};
use crate::similarity::{most_similar_prepared, PreparedAdapter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    KMerge,
    KMergePp,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "k_merge" | "kmerge" => Some(Variant::KMerge),
            "k_merge_pp" | "kmerge_pp" | "k_merge++" | "kmerge++" => Some(Variant::KMergePp),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::KMerge => "k_merge",
            Variant::KMergePp => "k_merge_pp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub budget_k: usize,
    pub variant: Variant,
    /// Merge threshold; present exactly when the variant is K-Merge++.
    pub threshold_s: Option<f64>,
    pub operator: MergeOperator,
    pub rank_policy: RankPolicy,
}

impl PolicyConfig {
    /// K-Merge with the running-average operator and SVD truncation.
    pub fn k_merge(budget_k: usize, rank: usize) -> Self {
        Self {
            budget_k,
            variant: Variant::KMerge,
            threshold_s: None,
            operator: MergeOperator::new(OperatorKind::RunningAverage),
            rank_policy: RankPolicy::svd(rank),
        }
    }

    pub fn k_merge_pp(budget_k: usize, threshold_s: f64, rank: usize) -> Self {
        Self {
            variant: Variant::KMergePp,
            threshold_s: Some(threshold_s),
            ..Self::k_merge(budget_k, rank)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget_k == 0 {
            return Err(Error::Config("budget K must be >= 1".into()));
        }
        match (self.variant, self.threshold_s) {
            (Variant::KMergePp, None) => {
                return Err(Error::Config("k_merge_pp requires a threshold".into()));
            }
            (Variant::KMerge, Some(_)) => {
                return Err(Error::Config("a threshold only applies to k_merge_pp".into()));
            }
            (_, Some(s)) if !s.is_finite() => {
                return Err(Error::Config(format!("threshold must be finite, got {s}")));
            }
            _ => {}
        }
        if self.rank_policy.mode == RankMode::FactorAverage
            && !matches!(self.operator.kind, OperatorKind::RunningAverage | OperatorKind::Linear)
        {
            return Err(Error::Config(format!(
                "factor averaging cannot represent the {} operator",
                self.operator.kind.as_str()
            )));
        }
        self.operator.validate()?;
        self.rank_policy.validate()
    }
}

/// Slot key to the ordered set of task indices merged into it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeHistory {
    pub entries: BTreeMap<u64, BTreeSet<usize>>,
    pub next_slot_key: u64,
}

impl MergeHistory {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            next_slot_key: 1,
        }
    }

    /// The slot whose history contains `task_index`.
    pub fn route(&self, task_index: usize) -> Result<u64> {
        self.entries
            .iter()
            .find(|(_, tasks)| tasks.contains(&task_index))
            .map(|(k, _)| *k)
            .ok_or(Error::UnknownTask(task_index))
    }
}

/// One storage position: the servable adapter plus its exact running update.
#[derive(Debug, Clone)]
pub struct Slot {
    adapter: LoraAdapter,
    exact: MergedDelta,
    prepared: PreparedAdapter,
}

impl Slot {
    fn new(adapter: LoraAdapter, exact: MergedDelta) -> Self {
        let prepared = PreparedAdapter::new(&adapter);
        Self {
            adapter,
            exact,
            prepared,
        }
    }

    /// The stored, rank-controlled adapter.
    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    /// The exact 64-bit running update before rank control.
    pub fn exact(&self) -> &MergedDelta {
        &self.exact
    }

    pub fn merge_count(&self) -> usize {
        self.exact.merge_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    AllocatedNewSlot,
    MergedInto,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::AllocatedNewSlot => "allocated_new_slot",
            Action::MergedInto => "merged_into",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestDecision {
    /// 1-based arrival index of the task.
    pub task_index: usize,
    pub task_id: String,
    pub action: Action,
    pub slot_key: u64,
    /// Similarity to the chosen slot, when one was scored.
    pub similarity: Option<f64>,
    pub occupied_before: usize,
    pub occupied_after: usize,
    #[serde(skip)]
    pub elapsed: Duration,
    /// Largest per-layer truncation residual of the refreshed slot.
    pub residual: f64,
}

/// Picks a merge target from the occupied slot keys.
type SlotSelector<'a> = dyn FnMut(&[u64]) -> u64 + 'a;

/// Store, history and policy together.
#[derive(Debug, Clone)]
pub struct Engine {
    config: PolicyConfig,
    slots: BTreeMap<u64, Slot>,
    history: MergeHistory,
    task_ids: Vec<String>,
    signature: Option<Vec<(LayerKey, usize, usize)>>,
}

/// Seed of the operator's randomness for the `task_index`-th arrival.
pub fn task_seed(seed: u64, task_index: usize) -> u64 {
    let mut z = seed ^ (task_index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 31)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 29)
}

fn merged_label<'a>(x: &'a str, y: &'a str) -> &'a str {
    if x == y {
        x
    } else {
        "mixed"
    }
}

impl Engine {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            slots: BTreeMap::new(),
            history: MergeHistory::new(),
            task_ids: Vec::new(),
            signature: None,
        })
    }

    /// Reassembles an engine from persisted parts, checking every invariant.
    pub(crate) fn from_parts(
        config: PolicyConfig,
        slots: Vec<(u64, LoraAdapter, MergedDelta, BTreeSet<usize>)>,
        next_slot_key: u64,
        task_ids: Vec<String>,
    ) -> Result<Self> {
        let mut engine = Engine::new(config)?;
        if slots.len() > engine.config.budget_k {
            return Err(Error::restore("slots", format!("{} slots exceed budget {}", slots.len(), engine.config.budget_k)));
        }
        let mut seen = BTreeSet::new();
        for (key, adapter, exact, tasks) in slots {
            if key >= next_slot_key {
                return Err(Error::restore("next_slot_key", format!("slot {key} is not below {next_slot_key}")));
            }
            let sig = adapter.signature();
            if exact.signature() != sig {
                return Err(Error::restore(format!("slots[{key}]"), "running cache does not match the adapter shapes"));
            }
            match &engine.signature {
                None => engine.signature = Some(sig),
                Some(s) if *s != sig => {
                    return Err(Error::restore(format!("slots[{key}]"), "adapter shapes differ from the other slots"));
                }
                Some(_) => {}
            }
            if tasks.is_empty() || tasks.len() != exact.merge_count {
                return Err(Error::restore(format!("slots[{key}].tasks"), "task list disagrees with merge count"));
            }
            for &t in &tasks {
                if !seen.insert(t) {
                    return Err(Error::restore(format!("slots[{key}].tasks"), format!("task {t} appears in two slots")));
                }
            }
            engine.history.entries.insert(key, tasks);
            engine.slots.insert(key, Slot::new(adapter, exact));
        }
        if !seen.iter().copied().eq(1..=task_ids.len()) {
            return Err(Error::restore("task_ids", "histories do not partition the ingested tasks"));
        }
        let unique: BTreeSet<&String> = task_ids.iter().collect();
        if unique.len() != task_ids.len() {
            return Err(Error::restore("task_ids", "duplicate task id"));
        }
        engine.history.next_slot_key = next_slot_key;
        engine.task_ids = task_ids;
        Ok(engine)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn history(&self) -> &MergeHistory {
        &self.history
    }

    pub fn slots(&self) -> &BTreeMap<u64, Slot> {
        &self.slots
    }

    pub fn occupied(&self) -> usize {
        self.slots.len()
    }

    /// Task ids in arrival order; task index `t` is at position `t - 1`.
    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    pub fn route(&self, task_index: usize) -> Result<u64> {
        self.history.route(task_index)
    }

    pub fn load_for_inference(&self, slot_key: u64) -> Result<&LoraAdapter> {
        self.slots
            .get(&slot_key)
            .map(Slot::adapter)
            .ok_or(Error::SlotVacant(slot_key))
    }

    /// Ingests one adapter, choosing the most similar slot as merge target.
    pub fn ingest(&mut self, incoming: LoraAdapter) -> Result<IngestDecision> {
        self.ingest_inner(incoming, None)
    }

    /// Like [`Engine::ingest`], but `choose` picks the merge target from the
    /// occupied slot keys instead of similarity. Used for control experiments.
    pub fn ingest_with_selector<F>(&mut self, incoming: LoraAdapter, mut choose: F) -> Result<IngestDecision>
    where
        F: FnMut(&[u64]) -> u64,
    {
        self.ingest_inner(incoming, Some(&mut choose))
    }

    fn ingest_inner(&mut self, incoming: LoraAdapter, choose: Option<&mut SlotSelector>) -> Result<IngestDecision> {
        let start = Instant::now();
        if self.task_ids.contains(&incoming.task_id) {
            return Err(Error::DuplicateTask(incoming.task_id));
        }
        let sig = incoming.signature();
        if let Some(expected) = &self.signature {
            if *expected != sig {
                return Err(Error::IncompatibleAdapters(format!(
                    "`{}` does not match the store's layer keys or shapes",
                    incoming.task_id
                )));
            }
        }
        let task_index = self.task_ids.len() + 1;
        let occupied = self.occupied();
        let k = self.config.budget_k;
        let full = occupied >= k;

        // Score only when the branch depends on it: K-Merge needs a target
        // once full, K-Merge++ compares against the threshold whenever non-empty.
        let needs_score = occupied > 0 && (full || self.config.variant == Variant::KMergePp);
        let prepared = PreparedAdapter::new(&incoming);
        let target = if needs_score {
            Some(match choose {
                None => most_similar_prepared(&prepared, self.slots.iter().map(|(key, s)| (*key, &s.prepared)))?,
                Some(f) => {
                    let keys: Vec<u64> = self.slots.keys().copied().collect();
                    let key = f(&keys);
                    let slot = self.slots.get(&key).ok_or(Error::SlotVacant(key))?;
                    (key, prepared.similarity(&slot.prepared)?)
                }
            })
        } else {
            None
        };

        let merge_into = match (self.config.variant, target) {
            (_, None) => None,
            (Variant::KMerge, Some((key, _))) => full.then_some(key),
            (Variant::KMergePp, Some((key, sim))) => {
                let s = self.config.threshold_s.expect("validated");
                (full || sim >= s).then_some(key)
            }
        };

        let (action, slot_key, slot, residual) = match merge_into {
            None => {
                let key = self.history.next_slot_key;
                let exact = MergedDelta::from_adapter(&incoming);
                (Action::AllocatedNewSlot, key, Slot::new(incoming.clone(), exact), 0.0)
            }
            Some(key) => {
                let (slot, residual) = self.merged_slot(&self.slots[&key], &incoming, task_index)?;
                (Action::MergedInto, key, slot, residual)
            }
        };

        // Commit.
        self.slots.insert(slot_key, slot);
        self.history.entries.entry(slot_key).or_default().insert(task_index);
        if action == Action::AllocatedNewSlot {
            self.history.next_slot_key += 1;
        }
        self.task_ids.push(incoming.task_id.clone());
        self.signature.get_or_insert(sig);
        Ok(IngestDecision {
            task_index,
            task_id: incoming.task_id,
            action,
            slot_key,
            similarity: target.map(|(_, s)| s),
            occupied_before: occupied,
            occupied_after: self.occupied(),
            elapsed: start.elapsed(),
            residual,
        })
    }

    fn merged_slot(&self, slot: &Slot, incoming: &LoraAdapter, task_index: usize) -> Result<(Slot, f64)> {
        let mut op = self.config.operator.clone();
        op.rng_seed = task_seed(op.rng_seed, task_index);
        let n = slot.merge_count();
        let exact = op.apply(&slot.exact, n, &MergedDelta::from_adapter(incoming))?;
        let stored = &slot.adapter;
        let meta = AdapterMeta {
            task_id: stored.task_id.clone(),
            problem_type: merged_label(&stored.problem_type, &incoming.problem_type).to_string(),
            language: merged_label(&stored.language, &incoming.language).to_string(),
            scale_numerator: stored.scale_numerator(),
        };
        let (adapter, residual) = match self.config.rank_policy.mode {
            RankMode::SvdTruncate => {
                let r = refactor(&exact, &self.config.rank_policy, &meta)?;
                let residual = r.max_residual();
                (r.adapter, residual)
            }
            RankMode::FactorAverage => {
                let w = match op.kind {
                    OperatorKind::RunningAverage => n as f64 / (n + 1) as f64,
                    OperatorKind::Linear => op.weight,
                    other => {
                        return Err(Error::UnsupportedMode(format!(
                            "factor averaging cannot represent the {} operator",
                            other.as_str()
                        )))
                    }
                };
                (factor_average(stored, w, incoming, &meta)?, 0.0)
            }
        };
        Ok((Slot::new(adapter, exact), residual))
    }
}
