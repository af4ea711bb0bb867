//! Adapter similarity: per-layer cosine of the flattened updates, averaged
//! uniformly over all layer keys.
//!
//! Inner products are evaluated in factor space,
//! `<B1 A1, B2 A2>_F = sum((B1ᵀ B2) ∘ (A1 A2ᵀ))`, so no `d_out x d_in` matrix is
//! ever formed.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::adapter::{check_compatible, FactorPair, LayerKey, LoraAdapter};
use crate::error::{Error, Result};

/// Norms below this are treated as degenerate and score 0.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone)]
struct PreparedLayer {
    /// `scaling · B`, `d_out x r`.
    b: DMatrix<f64>,
    a: DMatrix<f64>,
    norm_sq: f64,
}

fn gram_inner(bx: &DMatrix<f64>, ax: &DMatrix<f64>, by: &DMatrix<f64>, ay: &DMatrix<f64>) -> f64 {
    // Explicit transpose: the blocked gemm is much faster than `tr_mul` here.
    let gb = bx.transpose() * by;
    let ga = ax * ay.transpose();
    gb.component_mul(&ga).sum()
}

impl PreparedLayer {
    fn new(pair: &FactorPair, scaling: f64) -> Self {
        let b = pair.b_matrix() * scaling;
        let a = pair.a_matrix();
        let norm_sq = gram_inner(&b, &a, &b, &a).max(0.0);
        Self { b, a, norm_sq }
    }

    fn cosine(&self, other: &PreparedLayer) -> f64 {
        let degenerate = DEGENERATE_NORM * DEGENERATE_NORM;
        if self.norm_sq < degenerate || other.norm_sq < degenerate {
            return 0.0;
        }
        let inner = gram_inner(&self.b, &self.a, &other.b, &other.a);
        // sqrt(x·x) == x in correctly rounded arithmetic, so self-similarity is exactly 1.
        (inner / (self.norm_sq * other.norm_sq).sqrt()).clamp(-1.0, 1.0)
    }
}

/// An adapter converted to `f64` with per-layer norms precomputed, for
/// repeated comparisons against the same adapter.
#[derive(Clone)]
pub struct PreparedAdapter {
    signature: Vec<(LayerKey, usize, usize)>,
    layers: Vec<PreparedLayer>,
}

impl PreparedAdapter {
    pub fn new(adapter: &LoraAdapter) -> Self {
        let scaling = adapter.scaling();
        Self {
            signature: adapter.signature(),
            layers: adapter
                .layers()
                .values()
                .map(|p| PreparedLayer::new(p, scaling))
                .collect(),
        }
    }

    /// Mean per-layer cosine against another prepared adapter.
    pub fn similarity(&self, other: &PreparedAdapter) -> Result<f64> {
        if self.signature != other.signature {
            return Err(Error::IncompatibleAdapters(
                "adapters differ in layer keys or shapes".into(),
            ));
        }
        let total: f64 = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(x, y)| x.cosine(y))
            .sum();
        Ok(total / self.layers.len() as f64)
    }
}

impl std::fmt::Debug for PreparedAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PreparedAdapter")
            .field("layers", &self.layers.len())
            .finish()
    }
}

/// Cosine between the two adapters' updates at one layer.
pub fn layer_similarity(x: &LoraAdapter, y: &LoraAdapter, key: &LayerKey) -> Result<f64> {
    let px = x.layer(key)?;
    let py = y.layer(key)?;
    if px.d_in() != py.d_in() || px.d_out() != py.d_out() {
        return Err(Error::Shape(format!(
            "{key}: {}x{} vs {}x{}",
            px.d_out(),
            px.d_in(),
            py.d_out(),
            py.d_in()
        )));
    }
    Ok(PreparedLayer::new(px, x.scaling()).cosine(&PreparedLayer::new(py, y.scaling())))
}

/// Mean of [`layer_similarity`] over every layer key.
pub fn adapter_similarity(x: &LoraAdapter, y: &LoraAdapter) -> Result<f64> {
    check_compatible(x, y)?;
    PreparedAdapter::new(x).similarity(&PreparedAdapter::new(y))
}

/// Slot with the highest similarity to `incoming`. Ties go to the smallest key.
pub fn most_similar<'a, I>(incoming: &LoraAdapter, slots: I) -> Result<(u64, f64)>
where
    I: IntoIterator<Item = (u64, &'a LoraAdapter)>,
{
    let incoming = PreparedAdapter::new(incoming);
    most_similar_prepared(&incoming, slots.into_iter().map(|(k, a)| (k, PreparedAdapter::new(a))))
}

/// [`most_similar`] over already prepared adapters.
pub fn most_similar_prepared<P, I>(incoming: &PreparedAdapter, slots: I) -> Result<(u64, f64)>
where
    P: std::borrow::Borrow<PreparedAdapter>,
    I: IntoIterator<Item = (u64, P)>,
{
    let mut best: Option<(u64, f64)> = None;
    for (key, stored) in slots {
        let score = incoming.similarity(stored.borrow())?;
        best = match best {
            Some((bk, bs)) if bs > score || (bs == score && bk < key) => Some((bk, bs)),
            _ => Some((key, score)),
        };
    }
    best.ok_or(Error::EmptyStore)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub adapter_ids: Vec<String>,
    /// Row-major `n x n`.
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.adapter_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapter_ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Scores of the upper triangle (`i < j`), row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.values[i][j]);
            }
        }
        out
    }

    /// Header row of ids, then one row of scores per adapter, 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.adapter_ids.join(","));
        out.push('\n');
        for row in &self.values {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

/// All pairwise adapter similarities. The diagonal is exact self-similarity.
pub fn similarity_matrix(adapters: &[LoraAdapter]) -> Result<SimilarityMatrix> {
    if adapters.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "similarity matrix needs at least 2 adapters, got {}",
            adapters.len()
        )));
    }
    let n = adapters.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        values[i][i] = adapter_similarity(&adapters[i], &adapters[i])?;
        for j in i + 1..n {
            let s = adapter_similarity(&adapters[i], &adapters[j])?;
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix {
        adapter_ids: adapters.iter().map(|a| a.task_id.clone()).collect(),
        values,
    })
}

/// Median of the values; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if values.len() % 2 == 1 {
        return Some(upper);
    }
    let lower = v[..mid]
        .iter()
        .copied()
        .max_by(f64::total_cmp)
        .expect("even length >= 2");
    Some((lower + upper) / 2.0)
}

/// Merge threshold: the median of all pairwise similarities in a held-out set.
pub fn calibrate_threshold(held_out: &[LoraAdapter]) -> Result<f64> {
    if held_out.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "threshold calibration needs at least 2 adapters, got {}",
            held_out.len()
        )));
    }
    let matrix = similarity_matrix(held_out)?;
    Ok(median(&matrix.upper_triangle()).expect("at least one pair"))
}
