//! Streaming simulations: orderings, per-step trajectories, clustering
//! consistency and threshold sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::score::aggregate_score_prepared;
use crate::bench::synth::{Suite, TaskSpec};
use crate::engine::{Action, Engine, MergeHistory, PolicyConfig, Variant};
use crate::error::{Error, Result};
use crate::format::write_atomic;
use crate::similarity::PreparedAdapter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingKind {
    Random,
    ProblemTypes,
    Worst,
}

impl OrderingKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "random" => Some(OrderingKind::Random),
            "problem_types" => Some(OrderingKind::ProblemTypes),
            "worst" => Some(OrderingKind::Worst),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingSpec {
    pub kind: OrderingKind,
    pub seed: u64,
}

/// Arrival order as indices into `tasks`.
///
/// `worst` sorts by (type, language). `problem_types` opens with one task of
/// every type, in type order with a seeded choice of language, and follows
/// with the remaining tasks in seeded random order.
pub fn ordering(tasks: &[TaskSpec], spec: &OrderingSpec) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    match spec.kind {
        OrderingKind::Random => order.shuffle(&mut rng),
        OrderingKind::Worst => order.sort_by(|&i, &j| {
            (&tasks[i].problem_type, &tasks[i].language).cmp(&(&tasks[j].problem_type, &tasks[j].language))
        }),
        OrderingKind::ProblemTypes => {
            order.shuffle(&mut rng);
            let mut seen = BTreeSet::new();
            let (mut heads, rest): (Vec<usize>, Vec<usize>) =
                order.into_iter().partition(|&i| seen.insert(tasks[i].problem_type.clone()));
            heads.sort_by(|&i, &j| tasks[i].problem_type.cmp(&tasks[j].problem_type));
            heads.extend(rest);
            order = heads;
        }
    }
    order
}

/// How the merge target is chosen once a merge is due.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Assignment {
    MostSimilar,
    /// Uniformly random occupied slot, seeded.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    pub assignment: Assignment,
    /// Record wall-clock ingest times; when false they are reported as 0 so
    /// reports are byte-reproducible.
    pub record_timing: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            assignment: Assignment::MostSimilar,
            record_timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub timestep: usize,
    pub task_id: String,
    pub problem_type: String,
    pub action: Action,
    pub slot_key: u64,
    pub similarity: Option<f64>,
    pub occupied: usize,
    pub elapsed_us: u64,
    pub residual: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub ordering: OrderingSpec,
    pub config: PolicyConfig,
    pub assignment: Assignment,
    pub steps: Vec<StepRecord>,
    pub final_score: f64,
    pub clustering_consistency: f64,
    pub history: BTreeMap<u64, Vec<usize>>,
}

impl SimulationReport {
    pub fn trajectory(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.score).collect()
    }

    pub fn allocations(&self) -> usize {
        self.steps.iter().filter(|s| s.action == Action::AllocatedNewSlot).count()
    }

    /// Columns: timestep, S, occupied, action, similarity, elapsed_us.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("timestep,S,occupied,action,similarity,elapsed_us\n");
        for s in &self.steps {
            let sim = s.similarity.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.timestep,
                s.score,
                s.occupied,
                s.action.as_str(),
                sim,
                s.elapsed_us
            );
        }
        out
    }
}

/// A finished simulation: its report and the final engine state.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub report: SimulationReport,
    pub engine: Engine,
    /// Suite indices in arrival order.
    pub arrivals: Vec<usize>,
}

/// Fraction of tasks whose slot's most common problem type is their own.
/// `labels[t - 1]` is the problem type of task index `t`.
pub fn clustering_consistency(history: &MergeHistory, labels: &[String]) -> f64 {
    let mut matches = 0usize;
    let mut total = 0usize;
    for tasks in history.entries.values() {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for &t in tasks {
            *counts.entry(labels[t - 1].as_str()).or_default() += 1;
        }
        matches += counts.values().copied().max().unwrap_or(0);
        total += tasks.len();
    }
    if total == 0 {
        0.0
    } else {
        matches as f64 / total as f64
    }
}

/// Replays `suite` in the given order through a fresh engine.
pub fn run_simulation(suite: &Suite, order: &OrderingSpec, config: &PolicyConfig, options: &SimOptions) -> Result<Simulation> {
    let arrivals = ordering(&suite.tasks, order);
    let mut engine = Engine::new(config.clone())?;
    let mut prepared = Vec::with_capacity(arrivals.len());
    let mut labels = Vec::with_capacity(arrivals.len());
    let mut steps = Vec::with_capacity(arrivals.len());
    let mut picker = match options.assignment {
        Assignment::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Assignment::MostSimilar => None,
    };
    for &i in &arrivals {
        let adapter = suite.adapters[i].clone();
        prepared.push(PreparedAdapter::new(&adapter));
        labels.push(suite.tasks[i].problem_type.clone());
        let decision = match picker.as_mut() {
            None => engine.ingest(adapter)?,
            Some(rng) => engine.ingest_with_selector(adapter, |keys| keys[rng.random_range(0..keys.len())])?,
        };
        let score = aggregate_score_prepared(&engine, &prepared)?.score;
        steps.push(StepRecord {
            timestep: decision.task_index,
            task_id: decision.task_id,
            problem_type: suite.tasks[i].problem_type.clone(),
            action: decision.action,
            slot_key: decision.slot_key,
            similarity: decision.similarity,
            occupied: decision.occupied_after,
            elapsed_us: if options.record_timing {
                decision.elapsed.as_micros() as u64
            } else {
                0
            },
            residual: decision.residual,
            score,
        });
    }
    let report = SimulationReport {
        ordering: *order,
        config: config.clone(),
        assignment: options.assignment,
        final_score: steps.last().map_or(0.0, |s| s.score),
        clustering_consistency: clustering_consistency(engine.history(), &labels),
        history: engine
            .history()
            .entries
            .iter()
            .map(|(k, v)| (*k, v.iter().copied().collect()))
            .collect(),
        steps,
    };
    Ok(Simulation {
        report,
        engine,
        arrivals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub final_score: f64,
    pub clustering_consistency: f64,
    pub allocations: usize,
}

/// One K-Merge++ simulation per threshold value.
pub fn threshold_sweep(
    suite: &Suite,
    order: &OrderingSpec,
    config: &PolicyConfig,
    s_values: &[f64],
    options: &SimOptions,
) -> Result<Vec<SweepRow>> {
    if config.variant != Variant::KMergePp {
        return Err(Error::Config("a threshold sweep needs the k_merge_pp variant".into()));
    }
    s_values
        .iter()
        .map(|&s| {
            let cfg = PolicyConfig {
                threshold_s: Some(s),
                ..config.clone()
            };
            let report = run_simulation(suite, order, &cfg, options)?.report;
            Ok(SweepRow {
                threshold: s,
                final_score: report.final_score,
                clustering_consistency: report.clustering_consistency,
                allocations: report.allocations(),
            })
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub runs: usize,
    pub final_score_mean: f64,
    pub final_score_std: f64,
    pub consistency_mean: f64,
    /// Per-timestep mean and standard deviation of S across runs.
    pub trajectory_mean: Vec<f64>,
    pub trajectory_std: Vec<f64>,
}

pub fn summarize(reports: &[SimulationReport]) -> RunSummary {
    let finals: Vec<f64> = reports.iter().map(|r| r.final_score).collect();
    let consistencies: Vec<f64> = reports.iter().map(|r| r.clustering_consistency).collect();
    let steps = reports.iter().map(|r| r.steps.len()).min().unwrap_or(0);
    let (trajectory_mean, trajectory_std) = (0..steps)
        .map(|t| mean_std(&reports.iter().map(|r| r.steps[t].score).collect::<Vec<_>>()))
        .unzip();
    let (final_score_mean, final_score_std) = mean_std(&finals);
    RunSummary {
        runs: reports.len(),
        final_score_mean,
        final_score_std,
        consistency_mean: mean_std(&consistencies).0,
        trajectory_mean,
        trajectory_std,
    }
}

#[derive(Serialize)]
struct FullReport<'a> {
    summary: RunSummary,
    runs: &'a [SimulationReport],
}

/// Writes `report.json` and one `trajectory_seed<k>.csv` per run.
pub fn write_reports(reports: &[SimulationReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let full = FullReport {
        summary: summarize(reports),
        runs: reports,
    };
    write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(&full)?)?;
    for r in reports {
        let name = format!("trajectory_seed{}.csv", r.ordering.seed);
        write_atomic(&dir.join(name), r.trajectory_csv().as_bytes())?;
    }
    Ok(())
}
