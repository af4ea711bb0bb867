//! Adapter data model: layer keys, factor pairs, adapters and dense updates.
//!
//! Factors are stored as row-major `f32`. All arithmetic converts to `f64`
//! first; results headed back into storage are rounded to `f32` once.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention projection targeted by an adapter.
///
/// The declaration order is the canonical sort order used by the file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Key,
    Query,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Key,
        Projection::Query,
        Projection::Value,
        Projection::Output,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Key => "key",
            Projection::Query => "query",
            Projection::Value => "value",
            Projection::Output => "output",
        }
    }

    pub fn ordinal(self) -> u64 {
        self as u64
    }

    pub fn parse(s: &str) -> Option<Self> {
        Projection::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one adapted weight: a transformer layer and a projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerKey {
    pub layer: u32,
    pub projection: Projection,
}

impl LayerKey {
    pub fn new(layer: u32, projection: Projection) -> Self {
        Self { layer, projection }
    }

    /// Dense integer id, unique per key. Used to key random streams.
    pub fn ordinal(&self) -> u64 {
        u64::from(self.layer) * 4 + self.projection.ordinal()
    }
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} {}", self.layer, self.projection)
    }
}

/// Low-rank factors for one layer: `A` is `rank x d_in`, `B` is `d_out x rank`,
/// both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    rank: usize,
    d_in: usize,
    d_out: usize,
    a: Vec<f32>,
    b: Vec<f32>,
}

impl FactorPair {
    pub fn new(rank: usize, d_in: usize, d_out: usize, a: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        if rank == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::Shape(format!(
                "factor dimensions must be positive (rank {rank}, d_in {d_in}, d_out {d_out})"
            )));
        }
        if a.len() != rank * d_in {
            return Err(Error::Shape(format!(
                "A has {} values, expected rank {rank} x d_in {d_in}",
                a.len()
            )));
        }
        if b.len() != d_out * rank {
            return Err(Error::Shape(format!(
                "B has {} values, expected d_out {d_out} x rank {rank}",
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("factor contains a non-finite value".into()));
        }
        Ok(Self {
            rank,
            d_in,
            d_out,
            a,
            b,
        })
    }

    /// All-zero factors of the given shape.
    pub fn zeros(rank: usize, d_in: usize, d_out: usize) -> Result<Self> {
        Self::new(rank, d_in, d_out, vec![0.0; rank * d_in], vec![0.0; d_out * rank])
    }

    /// Builds factors from `f64` matrices, rounding to `f32`.
    pub fn from_matrices(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != b.ncols() {
            return Err(Error::Shape(format!(
                "inner dimensions disagree: A has {} rows, B has {} columns",
                a.nrows(),
                b.ncols()
            )));
        }
        Self::new(
            a.nrows(),
            a.ncols(),
            b.nrows(),
            row_major_f32(a),
            row_major_f32(b),
        )
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn a(&self) -> &[f32] {
        &self.a
    }

    pub fn b(&self) -> &[f32] {
        &self.b
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rank, self.d_in, self.a.iter().map(|&v| f64::from(v)))
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.d_out, self.rank, self.b.iter().map(|&v| f64::from(v)))
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

fn row_major_f32(m: &DMatrix<f64>) -> Vec<f32> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)] as f32);
        }
    }
    out
}

/// A task-tagged set of per-layer low-rank factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub task_id: String,
    pub problem_type: String,
    pub language: String,
    rank: usize,
    scale_numerator: f64,
    layers: BTreeMap<LayerKey, FactorPair>,
}

impl LoraAdapter {
    pub fn new(
        task_id: impl Into<String>,
        problem_type: impl Into<String>,
        language: impl Into<String>,
        rank: usize,
        scale_numerator: f64,
        layers: BTreeMap<LayerKey, FactorPair>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("adapter has no layers".into()));
        }
        if rank == 0 {
            return Err(Error::Shape("adapter rank must be >= 1".into()));
        }
        if !scale_numerator.is_finite() || scale_numerator == 0.0 {
            return Err(Error::Shape(format!(
                "scale numerator must be finite and non-zero, got {scale_numerator}"
            )));
        }
        if let Some((key, pair)) = layers.iter().find(|(_, p)| p.rank != rank) {
            return Err(Error::Shape(format!(
                "{key} has rank {}, adapter declares rank {rank}",
                pair.rank
            )));
        }
        Ok(Self {
            task_id: task_id.into(),
            problem_type: problem_type.into(),
            language: language.into(),
            rank,
            scale_numerator,
            layers,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale_numerator(&self) -> f64 {
        self.scale_numerator
    }

    /// The factor `scale_numerator / rank` applied to every `B·A` product.
    pub fn scaling(&self) -> f64 {
        self.scale_numerator / self.rank as f64
    }

    pub fn layers(&self) -> &BTreeMap<LayerKey, FactorPair> {
        &self.layers
    }

    pub fn layer(&self, key: &LayerKey) -> Result<&FactorPair> {
        self.layers.get(key).ok_or(Error::KeyNotFound(*key))
    }

    /// `(key, d_in, d_out)` for every layer, in key order.
    pub fn signature(&self) -> Vec<(LayerKey, usize, usize)> {
        self.layers
            .iter()
            .map(|(k, p)| (*k, p.d_in, p.d_out))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.values().map(FactorPair::parameter_count).sum()
    }

    /// Same shapes, every factor zero. Serves as the zero-shot reference.
    pub fn zeroed(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|(k, p)| {
                let z = FactorPair::zeros(p.rank, p.d_in, p.d_out).expect("shape already valid");
                (*k, z)
            })
            .collect();
        Self {
            layers,
            ..self.clone()
        }
    }
}

/// Checks two adapters share the same layer keys and shapes.
pub fn check_compatible(x: &LoraAdapter, y: &LoraAdapter) -> Result<()> {
    if x.layers.len() != y.layers.len() {
        return Err(Error::IncompatibleAdapters(format!(
            "`{}` has {} layers, `{}` has {}",
            x.task_id,
            x.layers.len(),
            y.task_id,
            y.layers.len()
        )));
    }
    for ((kx, px), (ky, py)) in x.layers.iter().zip(y.layers.iter()) {
        if kx != ky {
            return Err(Error::IncompatibleAdapters(format!(
                "layer key sets differ ({kx} vs {ky})"
            )));
        }
        if px.d_in != py.d_in || px.d_out != py.d_out {
            return Err(Error::IncompatibleAdapters(format!(
                "{kx}: {}x{} vs {}x{}",
                px.d_out, px.d_in, py.d_out, py.d_in
            )));
        }
    }
    Ok(())
}

/// Dense update `(scale_numerator / rank) · B · A` for one layer, `d_out x d_in`.
pub fn materialize_delta(adapter: &LoraAdapter, key: &LayerKey) -> Result<DMatrix<f64>> {
    let pair = adapter.layer(key)?;
    let a = pair.a_matrix();
    let b = pair.b_matrix();
    if b.ncols() != a.nrows() {
        return Err(Error::Shape(format!(
            "{key}: B has {} columns, A has {} rows",
            b.ncols(),
            a.nrows()
        )));
    }
    Ok((b * a) * adapter.scaling())
}

/// Row-major vectorization.
pub fn flatten(delta: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(delta.len());
    for i in 0..delta.nrows() {
        for j in 0..delta.ncols() {
            out.push(delta[(i, j)]);
        }
    }
    out
}

/// Inverse of [`flatten`].
pub fn unflatten(values: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if values.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} values cannot fill a {rows}x{cols} matrix",
            values.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, values))
}
