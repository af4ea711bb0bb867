//! Merge operators, all defined on exact ΔW-space updates, plus conversion of
//! a merge result back to stored low-rank factors.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{FactorPair, LayerKey, LoraAdapter};
use crate::delta::{check_adapter_against, LayerDelta, MergedDelta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    RunningAverage,
    Linear,
    Ties,
    Dare,
    DareTies,
}

impl OperatorKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "running_average" => Some(OperatorKind::RunningAverage),
            "linear" => Some(OperatorKind::Linear),
            "ties" => Some(OperatorKind::Ties),
            "dare" => Some(OperatorKind::Dare),
            "dare_ties" => Some(OperatorKind::DareTies),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::RunningAverage => "running_average",
            OperatorKind::Linear => "linear",
            OperatorKind::Ties => "ties",
            OperatorKind::Dare => "dare",
            OperatorKind::DareTies => "dare_ties",
        }
    }
}

/// Merge operator selection and its hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeOperator {
    pub kind: OperatorKind,
    /// Fraction of entries TIES keeps per tensor, in (0, 1].
    #[serde(default = "default_half")]
    pub density: f64,
    /// DARE drop probability, in [0, 1).
    #[serde(default = "default_half")]
    pub drop_rate: f64,
    /// Weight of the stored operand for linear merging.
    #[serde(default = "default_half")]
    pub weight: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_half() -> f64 {
    0.5
}

impl MergeOperator {
    pub fn new(kind: OperatorKind) -> Self {
        Self {
            kind,
            density: 0.5,
            drop_rate: 0.5,
            weight: 0.5,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must be in (0, 1], got {}", self.density)));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop rate must be in [0, 1), got {}", self.drop_rate)));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::Config(format!("linear weight must be in [0, 1], got {}", self.weight)));
        }
        Ok(())
    }

    /// Merges `incoming` into a slot holding `stored`, which already absorbed
    /// `stored_count` tasks. Baselines ignore the count and act pairwise.
    pub fn apply(&self, stored: &MergedDelta, stored_count: usize, incoming: &MergedDelta) -> Result<MergedDelta> {
        self.validate()?;
        let mut out = match self.kind {
            OperatorKind::RunningAverage => running_average(stored, stored_count, incoming)?,
            OperatorKind::Linear => linear_merge(stored, incoming, self.weight)?,
            OperatorKind::Ties => ties_merge(&[stored, incoming], self.density)?,
            OperatorKind::Dare => dare_merge(stored, incoming, self)?,
            OperatorKind::DareTies => dare_ties_merge(stored, incoming, self)?,
        };
        out.merge_count = stored_count + incoming.merge_count;
        Ok(out)
    }
}

/// History-aware running average: `(incoming + n·stored) / (n + 1)`.
pub fn running_average(stored: &MergedDelta, stored_count: usize, incoming: &MergedDelta) -> Result<MergedDelta> {
    if stored_count < 1 {
        return Err(Error::InvalidHistoryCount(stored_count));
    }
    stored.check_compatible(incoming)?;
    let n = stored_count as f64;
    let layers = stored
        .layers
        .iter()
        .map(|(k, s)| (*k, LayerDelta::combine(&incoming.layers[k], 1.0 / (n + 1.0), s, n / (n + 1.0))))
        .collect();
    Ok(MergedDelta {
        layers,
        merge_count: stored_count + 1,
    })
}

/// [`running_average`] with an adapter as the incoming operand.
pub fn running_average_merge(stored: &MergedDelta, stored_count: usize, incoming: &LoraAdapter) -> Result<MergedDelta> {
    check_adapter_against(stored, incoming)?;
    running_average(stored, stored_count, &MergedDelta::from_adapter(incoming))
}

/// `weight·x + (1 - weight)·y`.
pub fn linear_merge(x: &MergedDelta, y: &MergedDelta, weight: f64) -> Result<MergedDelta> {
    x.check_compatible(y)?;
    let layers = x
        .layers
        .iter()
        .map(|(k, dx)| (*k, LayerDelta::combine(dx, weight, &y.layers[k], 1.0 - weight)))
        .collect();
    Ok(MergedDelta {
        layers,
        merge_count: x.merge_count + y.merge_count,
    })
}

/// Keep mask for TIES trimming: the `ceil(density·n)` largest magnitudes,
/// earlier indices winning ties at the cutoff.
fn trim_mask(values: &[f64], density: f64) -> Vec<bool> {
    let keep = ((density * values.len() as f64).ceil() as usize).min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    let mut mask = vec![false; values.len()];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    mask
}

/// TIES on flat tensors of equal length: trim, elect sign, disjoint mean.
pub fn ties_merge_values(inputs: &[&[f64]], density: f64) -> Result<Vec<f64>> {
    if inputs.len() < 2 {
        return Err(Error::InsufficientInputs(format!(
            "ties needs at least 2 inputs, got {}",
            inputs.len()
        )));
    }
    let len = inputs[0].len();
    if inputs.iter().any(|v| v.len() != len) {
        return Err(Error::Shape("ties inputs differ in length".into()));
    }
    let trimmed: Vec<Vec<f64>> = inputs
        .iter()
        .map(|v| {
            let mask = trim_mask(v, density);
            v.iter().zip(mask).map(|(&x, keep)| if keep { x } else { 0.0 }).collect()
        })
        .collect();
    let mut out = vec![0.0; len];
    for (i, slot) in out.iter_mut().enumerate() {
        let total: f64 = trimmed.iter().map(|t| t[i]).sum();
        let positive = total >= 0.0;
        let (mut sum, mut count) = (0.0, 0usize);
        for t in &trimmed {
            let v = t[i];
            if (positive && v > 0.0) || (!positive && v < 0.0) {
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            *slot = sum / count as f64;
        }
    }
    Ok(out)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    crate::adapter::flatten(m)
}

/// TIES merge, trimming each layer tensor independently.
pub fn ties_merge(deltas: &[&MergedDelta], density: f64) -> Result<MergedDelta> {
    if deltas.len() < 2 {
        return Err(Error::InsufficientInputs(format!(
            "ties needs at least 2 delta sets, got {}",
            deltas.len()
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("density must be in (0, 1], got {density}")));
    }
    for d in &deltas[1..] {
        deltas[0].check_compatible(d)?;
    }
    let mut layers = BTreeMap::new();
    for (key, first) in &deltas[0].layers {
        let (rows, cols) = first.shape();
        let flat: Vec<Vec<f64>> = deltas.iter().map(|d| row_major(&d.layers[key].to_dense())).collect();
        let refs: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
        let merged = ties_merge_values(&refs, density)?;
        layers.insert(*key, LayerDelta::Dense(DMatrix::from_row_slice(rows, cols, &merged)));
    }
    Ok(MergedDelta {
        layers,
        merge_count: deltas.iter().map(|d| d.merge_count).sum(),
    })
}

/// Seed for the `position`-th operand of a multi-input DARE merge.
pub fn operand_seed(seed: u64, position: u64) -> u64 {
    seed ^ (position + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// DARE on one flat tensor. The draw for entry `i` is the `i`-th value of the
/// ChaCha stream selected by `(seed, stream)`, independent of any other tensor.
pub fn dare_values(values: &[f64], drop_rate: f64, seed: u64, stream: u64) -> Vec<f64> {
    if drop_rate == 0.0 {
        return values.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let rescale = 1.0 / (1.0 - drop_rate);
    values
        .iter()
        .map(|&v| {
            let u: f64 = rng.random();
            if u < drop_rate {
                0.0
            } else {
                v * rescale
            }
        })
        .collect()
}

/// Drop each entry with probability `drop_rate` and rescale survivors.
pub fn dare_preprocess(delta: &MergedDelta, drop_rate: f64, seed: u64) -> Result<MergedDelta> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Config(format!("drop rate must be in [0, 1), got {drop_rate}")));
    }
    if drop_rate == 0.0 {
        return Ok(delta.clone());
    }
    let layers = delta
        .layers
        .iter()
        .map(|(k, d)| {
            let (rows, cols) = d.shape();
            let values = dare_values(&row_major(&d.to_dense()), drop_rate, seed, k.ordinal());
            (*k, LayerDelta::Dense(DMatrix::from_row_slice(rows, cols, &values)))
        })
        .collect();
    Ok(MergedDelta {
        layers,
        merge_count: delta.merge_count,
    })
}

fn dare_operands(x: &MergedDelta, y: &MergedDelta, op: &MergeOperator) -> Result<(MergedDelta, MergedDelta)> {
    x.check_compatible(y)?;
    Ok((
        dare_preprocess(x, op.drop_rate, operand_seed(op.rng_seed, 0))?,
        dare_preprocess(y, op.drop_rate, operand_seed(op.rng_seed, 1))?,
    ))
}

/// Sum of the DARE-processed operands (unit weights).
pub fn dare_merge(x: &MergedDelta, y: &MergedDelta, op: &MergeOperator) -> Result<MergedDelta> {
    let (px, py) = dare_operands(x, y, op)?;
    linear_sum(&px, &py)
}

/// TIES over the DARE-processed operands.
pub fn dare_ties_merge(x: &MergedDelta, y: &MergedDelta, op: &MergeOperator) -> Result<MergedDelta> {
    let (px, py) = dare_operands(x, y, op)?;
    ties_merge(&[&px, &py], op.density)
}

fn linear_sum(x: &MergedDelta, y: &MergedDelta) -> Result<MergedDelta> {
    x.check_compatible(y)?;
    let layers = x
        .layers
        .iter()
        .map(|(k, dx)| (*k, LayerDelta::combine(dx, 1.0, &y.layers[k], 1.0)))
        .collect();
    Ok(MergedDelta {
        layers,
        merge_count: x.merge_count + y.merge_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    SvdTruncate,
    FactorAverage,
}

/// How a merged update is brought back to a fixed-rank stored adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPolicy {
    pub mode: RankMode,
    pub target_rank: usize,
}

impl RankPolicy {
    pub fn svd(target_rank: usize) -> Self {
        Self {
            mode: RankMode::SvdTruncate,
            target_rank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_rank == 0 {
            return Err(Error::Config("target rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Labels written onto a refactored adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterMeta {
    pub task_id: String,
    pub problem_type: String,
    pub language: String,
    pub scale_numerator: f64,
}

#[derive(Debug, Clone)]
pub struct Refactored {
    pub adapter: LoraAdapter,
    /// Relative Frobenius truncation residual per layer.
    pub residuals: BTreeMap<LayerKey, f64>,
}

impl Refactored {
    pub fn max_residual(&self) -> f64 {
        self.residuals.values().copied().fold(0.0, f64::max)
    }
}

/// Converts a ΔW-space merge result to rank-`target_rank` factors via SVD
/// truncation, with the adapter scaling divided out of `B`.
pub fn refactor(merged: &MergedDelta, policy: &RankPolicy, meta: &AdapterMeta) -> Result<Refactored> {
    policy.validate()?;
    if policy.mode == RankMode::FactorAverage {
        return Err(Error::UnsupportedMode(
            "factor averaging cannot be applied to a ΔW-space merge result".into(),
        ));
    }
    let rank = policy.target_rank;
    let inv_scaling = rank as f64 / meta.scale_numerator;
    let mut layers = BTreeMap::new();
    let mut residuals = BTreeMap::new();
    for (key, delta) in &merged.layers {
        let t = delta.truncate(rank);
        layers.insert(*key, FactorPair::from_matrices(&t.a, &(t.b * inv_scaling))?);
        residuals.insert(*key, t.residual);
    }
    let adapter = LoraAdapter::new(
        meta.task_id.clone(),
        meta.problem_type.clone(),
        meta.language.clone(),
        rank,
        meta.scale_numerator,
        layers,
    )?;
    Ok(Refactored { adapter, residuals })
}

/// Factor-wise weighted average `w·stored + (1 - w)·incoming` of `A` and `B`
/// separately. Cheap, but not the average of the applied updates.
pub fn factor_average(stored: &LoraAdapter, stored_weight: f64, incoming: &LoraAdapter, meta: &AdapterMeta) -> Result<LoraAdapter> {
    crate::adapter::check_compatible(stored, incoming)?;
    if stored.rank() != incoming.rank() || stored.scaling() != incoming.scaling() {
        return Err(Error::UnsupportedMode(format!(
            "factor averaging needs equal rank and scaling (rank {} vs {}, scaling {} vs {})",
            stored.rank(),
            incoming.rank(),
            stored.scaling(),
            incoming.scaling()
        )));
    }
    let w = stored_weight;
    let mix = |x: &[f32], y: &[f32]| -> Vec<f32> {
        x.iter()
            .zip(y)
            .map(|(&a, &b)| (w * f64::from(a) + (1.0 - w) * f64::from(b)) as f32)
            .collect()
    };
    let mut layers = BTreeMap::new();
    for (key, ps) in stored.layers() {
        let pi = &incoming.layers()[key];
        let pair = FactorPair::new(ps.rank(), ps.d_in(), ps.d_out(), mix(ps.a(), pi.a()), mix(ps.b(), pi.b()))?;
        layers.insert(*key, pair);
    }
    LoraAdapter::new(
        meta.task_id.clone(),
        meta.problem_type.clone(),
        meta.language.clone(),
        stored.rank(),
        stored.scale_numerator(),
        layers,
    )
}
