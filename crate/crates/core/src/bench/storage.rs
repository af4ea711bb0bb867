//! Parameter and byte accounting for adapters on real model geometries.

use serde::Serialize;

use crate::adapter::{LayerKey, LoraAdapter, Projection};
use crate::error::Result;
use crate::format::{encoded_len, Header, HeaderLayer};

/// Transformer dimensions relevant to adapter size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelGeometry {
    pub name: &'static str,
    pub num_layers: u32,
    pub hidden: usize,
    pub intermediate: usize,
    /// Output width of the key and value projections (kv heads x head dim).
    pub kv_dim: usize,
}

/// Llama-3.2-1B: 16 layers, hidden 2048, MLP 8192, 8 kv heads of width 64.
pub const LLAMA_3_2_1B: ModelGeometry = ModelGeometry {
    name: "llama-3.2-1b",
    num_layers: 16,
    hidden: 2048,
    intermediate: 8192,
    kv_dim: 512,
};

/// Qwen-2.5-1.5B: 28 layers, hidden 1536, MLP 8960, 2 kv heads of width 128.
pub const QWEN_2_5_1_5B: ModelGeometry = ModelGeometry {
    name: "qwen-2.5-1.5b",
    num_layers: 28,
    hidden: 1536,
    intermediate: 8960,
    kv_dim: 256,
};

pub const PRESETS: [ModelGeometry; 2] = [LLAMA_3_2_1B, QWEN_2_5_1_5B];

pub fn preset(name: &str) -> Option<ModelGeometry> {
    PRESETS.into_iter().find(|g| g.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetModules {
    /// Query, key, value and output projections.
    Attention,
    /// The attention projections plus gate, up and down.
    AllLinear,
}

impl ModelGeometry {
    /// `(d_in, d_out)` of every adapted matrix in one layer.
    pub fn module_shapes(&self, modules: TargetModules) -> Vec<(usize, usize)> {
        let (h, kv, i) = (self.hidden, self.kv_dim, self.intermediate);
        let mut shapes = vec![(h, h), (h, kv), (h, kv), (h, h)];
        if modules == TargetModules::AllLinear {
            shapes.extend([(h, i), (h, i), (i, h)]);
        }
        shapes
    }

    /// Header of the attention-only adapter for this geometry, the part the
    /// `.kmrg` format can hold.
    pub fn attention_header(&self, rank: usize, scale_numerator: f64) -> Header {
        let dims = |p: Projection| match p {
            Projection::Key | Projection::Value => (self.hidden, self.kv_dim),
            Projection::Query | Projection::Output => (self.hidden, self.hidden),
        };
        Header {
            task_id: String::new(),
            problem_type: String::new(),
            language: String::new(),
            rank,
            scale_numerator,
            layers: (0..self.num_layers)
                .flat_map(|layer| {
                    Projection::ALL.into_iter().map(move |proj| {
                        let (d_in, d_out) = dims(proj);
                        HeaderLayer { layer, proj, d_in, d_out }
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageReport {
    pub model: String,
    pub rank: usize,
    pub modules: TargetModules,
    pub parameters: usize,
    pub bytes_f32: usize,
    pub bytes_bf16: usize,
    /// Exact `.kmrg` size with empty labels; attention-only geometries only.
    pub file_bytes: Option<usize>,
}

/// `sum over adapted matrices of rank · (d_in + d_out)`.
pub fn lora_parameters(geometry: &ModelGeometry, rank: usize, modules: TargetModules) -> usize {
    let per_layer: usize = geometry
        .module_shapes(modules)
        .iter()
        .map(|(d_in, d_out)| rank * (d_in + d_out))
        .sum();
    per_layer * geometry.num_layers as usize
}

pub fn storage_report(geometry: &ModelGeometry, rank: usize, modules: TargetModules, scale_numerator: f64) -> Result<StorageReport> {
    let parameters = lora_parameters(geometry, rank, modules);
    let file_bytes = match modules {
        TargetModules::Attention => Some(encoded_len(&geometry.attention_header(rank, scale_numerator))?),
        TargetModules::AllLinear => None,
    };
    Ok(StorageReport {
        model: geometry.name.to_string(),
        rank,
        modules,
        parameters,
        bytes_f32: 4 * parameters,
        bytes_bf16: 2 * parameters,
        file_bytes,
    })
}

/// Parameter count and exact file size of a concrete adapter.
pub fn adapter_storage(adapter: &LoraAdapter) -> Result<(usize, usize)> {
    Ok((adapter.parameter_count(), encoded_len(&Header::for_adapter(adapter))?))
}

/// Layer keys of a uniform square geometry, as used for timing studies.
pub fn square_keys(num_layers: u32) -> Vec<LayerKey> {
    (0..num_layers)
        .flat_map(|l| Projection::ALL.into_iter().map(move |p| LayerKey::new(l, p)))
        .collect()
}
