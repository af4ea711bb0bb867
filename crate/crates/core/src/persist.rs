//! Durable engine state: one `.kmrg` file per slot, the exact running caches
//! as raw little-endian f64 with a JSON index, and `manifest.json`.
//!
//! Every file is written to a temporary path and renamed into place, the
//! manifest last, so a crash mid-persist leaves the previous manifest intact.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{LayerKey, Projection};
use crate::delta::{LayerDelta, MergedDelta};
use crate::engine::{Engine, PolicyConfig, Variant};
use crate::error::{Error, Result};
use crate::format::{read_adapter, write_adapter, write_atomic};
use crate::merge::{MergeOperator, RankPolicy};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u64 = 1;
pub const CACHE_INDEX_FILE: &str = "running_cache.json";
pub const CACHE_DATA_FILE: &str = "running_cache.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSlot {
    pub slot_key: u64,
    pub file: String,
    pub tasks: Vec<usize>,
    pub merge_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u64,
    pub budget_k: usize,
    pub variant: Variant,
    pub threshold_s: Option<f64>,
    pub operator: MergeOperator,
    pub rank_policy: RankPolicy,
    pub slots: Vec<ManifestSlot>,
    pub running_cache_file: String,
    pub next_slot_key: u64,
    pub task_ids: Vec<String>,
}

impl Manifest {
    pub fn config(&self) -> PolicyConfig {
        PolicyConfig {
            budget_k: self.budget_k,
            variant: self.variant,
            threshold_s: self.threshold_s,
            operator: self.operator.clone(),
            rank_policy: self.rank_policy,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CacheKind {
    Dense,
    LowRank,
}

/// One layer tensor in the raw cache file. Offsets count f64 values.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    slot_key: u64,
    layer: u32,
    proj: Projection,
    kind: CacheKind,
    d_out: usize,
    d_in: usize,
    /// Inner dimension for low-rank entries, 0 for dense.
    inner: usize,
    offset: usize,
}

impl CacheEntry {
    fn values(&self) -> usize {
        match self.kind {
            CacheKind::Dense => self.d_out * self.d_in,
            CacheKind::LowRank => self.inner * (self.d_out + self.d_in),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheIndex {
    data_file: String,
    merge_counts: BTreeMap<u64, usize>,
    entries: Vec<CacheEntry>,
}

fn push_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

fn slot_file(key: u64) -> String {
    format!("slot_{key}.kmrg")
}

/// Writes the full engine state into `dir`, creating it if needed.
pub fn persist(engine: &Engine, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut data = Vec::new();
    let mut entries = Vec::new();
    let mut merge_counts = BTreeMap::new();
    let mut slots = Vec::new();
    for (key, slot) in engine.slots() {
        write_adapter(slot.adapter(), dir.join(slot_file(*key)))?;
        merge_counts.insert(*key, slot.merge_count());
        for (lk, delta) in &slot.exact().layers {
            let (d_out, d_in) = delta.shape();
            let offset = data.len() / 8;
            let (kind, inner) = match delta {
                LayerDelta::Dense(m) => {
                    push_row_major(&mut data, m);
                    (CacheKind::Dense, 0)
                }
                LayerDelta::LowRank { b, a } => {
                    push_row_major(&mut data, b);
                    push_row_major(&mut data, a);
                    (CacheKind::LowRank, a.nrows())
                }
            };
            entries.push(CacheEntry {
                slot_key: *key,
                layer: lk.layer,
                proj: lk.projection,
                kind,
                d_out,
                d_in,
                inner,
                offset,
            });
        }
        slots.push(ManifestSlot {
            slot_key: *key,
            file: slot_file(*key),
            tasks: engine.history().entries[key].iter().copied().collect(),
            merge_count: slot.merge_count(),
        });
    }
    write_atomic(&dir.join(CACHE_DATA_FILE), &data)?;
    let index = CacheIndex {
        data_file: CACHE_DATA_FILE.into(),
        merge_counts,
        entries,
    };
    write_atomic(&dir.join(CACHE_INDEX_FILE), &serde_json::to_vec_pretty(&index)?)?;

    let config = engine.config();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        budget_k: config.budget_k,
        variant: config.variant,
        threshold_s: config.threshold_s,
        operator: config.operator.clone(),
        rank_policy: config.rank_policy,
        slots,
        running_cache_file: CACHE_INDEX_FILE.into(),
        next_slot_key: engine.history().next_slot_key,
        task_ids: engine.task_ids().to_vec(),
    };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
}

fn field<T: DeserializeOwned>(obj: &serde_json::Map<String, Value>, path: &str, name: &str) -> Result<T> {
    let full = if path.is_empty() { name.to_string() } else { format!("{path}.{name}") };
    let value = obj.get(name).ok_or_else(|| Error::restore(&full, "missing"))?;
    serde_json::from_value(value.clone()).map_err(|e| Error::restore(&full, e.to_string()))
}

fn object<'a>(value: &'a Value, path: &str) -> Result<&'a serde_json::Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| Error::restore(path, "expected a JSON object"))
}

/// Parses a manifest, reporting the path of the first bad field.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| Error::restore("manifest.json", e.to_string()))?;
    let obj = object(&root, "manifest.json")?;
    let version: u64 = field(obj, "", "version")?;
    if version != MANIFEST_VERSION {
        return Err(Error::restore("version", format!("unsupported manifest version {version}")));
    }
    let slot_values: Vec<Value> = field(obj, "", "slots")?;
    let mut slots = Vec::with_capacity(slot_values.len());
    for (i, v) in slot_values.iter().enumerate() {
        let path = format!("slots[{i}]");
        let s = object(v, &path)?;
        slots.push(ManifestSlot {
            slot_key: field(s, &path, "slot_key")?,
            file: field(s, &path, "file")?,
            tasks: field(s, &path, "tasks")?,
            merge_count: field(s, &path, "merge_count")?,
        });
    }
    Ok(Manifest {
        version,
        budget_k: field(obj, "", "budget_k")?,
        variant: field(obj, "", "variant")?,
        threshold_s: field(obj, "", "threshold_s")?,
        operator: field(obj, "", "operator")?,
        rank_policy: field(obj, "", "rank_policy")?,
        slots,
        running_cache_file: field(obj, "", "running_cache_file")?,
        next_slot_key: field(obj, "", "next_slot_key")?,
        task_ids: field(obj, "", "task_ids")?,
    })
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::restore("manifest.json", format!("{}: {e}", path.display())))?;
    parse_manifest(&bytes)
}

fn read_matrix(data: &[f64], offset: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, &data[offset..offset + rows * cols])
}

fn read_caches(dir: &Path, index_file: &str) -> Result<BTreeMap<u64, MergedDelta>> {
    let index_path = dir.join(index_file);
    let bytes = std::fs::read(&index_path)
        .map_err(|e| Error::restore("running_cache_file", format!("{}: {e}", index_path.display())))?;
    let index: CacheIndex =
        serde_json::from_slice(&bytes).map_err(|e| Error::restore("running_cache_file", e.to_string()))?;
    let data_path = dir.join(&index.data_file);
    let raw = std::fs::read(&data_path)
        .map_err(|e| Error::restore("running_cache_file.data_file", format!("{}: {e}", data_path.display())))?;
    if raw.len() % 8 != 0 {
        return Err(Error::restore("running_cache_file.data_file", "length is not a multiple of 8"));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let mut caches: BTreeMap<u64, MergedDelta> = BTreeMap::new();
    for (i, e) in index.entries.iter().enumerate() {
        if e.offset + e.values() > data.len() {
            return Err(Error::restore(format!("running_cache_file.entries[{i}]"), "tensor extends past the data file"));
        }
        let delta = match e.kind {
            CacheKind::Dense => LayerDelta::Dense(read_matrix(&data, e.offset, e.d_out, e.d_in)),
            CacheKind::LowRank => LayerDelta::LowRank {
                b: read_matrix(&data, e.offset, e.d_out, e.inner),
                a: read_matrix(&data, e.offset + e.d_out * e.inner, e.inner, e.d_in),
            },
        };
        let merge_count = *index
            .merge_counts
            .get(&e.slot_key)
            .ok_or_else(|| Error::restore("running_cache_file.merge_counts", format!("no count for slot {}", e.slot_key)))?;
        caches
            .entry(e.slot_key)
            .or_insert_with(|| MergedDelta {
                layers: BTreeMap::new(),
                merge_count,
            })
            .layers
            .insert(LayerKey::new(e.layer, e.proj), delta);
    }
    Ok(caches)
}

/// Slot keys of every `slot_<key>.kmrg` file in `dir`.
fn slot_files_present(dir: &Path) -> Result<BTreeSet<u64>> {
    let mut keys = BTreeSet::new();
    let listing = std::fs::read_dir(dir).map_err(|e| Error::restore("directory", format!("{}: {e}", dir.display())))?;
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(key) = name
            .strip_prefix("slot_")
            .and_then(|s| s.strip_suffix(".kmrg"))
            .and_then(|s| s.parse().ok())
        {
            keys.insert(key);
        }
    }
    Ok(keys)
}

/// Rebuilds an engine from a directory written by [`persist`].
pub fn restore(dir: impl AsRef<Path>) -> Result<Engine> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let present = slot_files_present(dir)?;
    let listed: BTreeSet<u64> = manifest.slots.iter().map(|s| s.slot_key).collect();
    if let Some(extra) = present.difference(&listed).next() {
        return Err(Error::restore("slots", format!("{} is present but slot {extra} is not in the manifest", slot_file(*extra))));
    }
    let mut caches = read_caches(dir, &manifest.running_cache_file)?;
    let mut parts = Vec::with_capacity(manifest.slots.len());
    for (i, s) in manifest.slots.iter().enumerate() {
        let path = dir.join(&s.file);
        if !path.exists() {
            return Err(Error::restore(
                format!("slots[{i}].file"),
                format!("adapter file {} for slot {} is missing", s.file, s.slot_key),
            ));
        }
        let adapter = read_adapter(&path).map_err(|e| Error::restore(format!("slots[{i}].file"), e.to_string()))?;
        let cache = caches
            .remove(&s.slot_key)
            .ok_or_else(|| Error::restore("running_cache_file", format!("no running cache for slot {}", s.slot_key)))?;
        if cache.merge_count != s.merge_count {
            return Err(Error::restore(format!("slots[{i}].merge_count"), "disagrees with the running cache"));
        }
        parts.push((s.slot_key, adapter, cache, s.tasks.iter().copied().collect()));
    }
    if let Some(key) = caches.keys().next() {
        return Err(Error::restore("running_cache_file", format!("cache for unknown slot {key}")));
    }
    Engine::from_parts(manifest.config(), parts, manifest.next_slot_key, manifest.task_ids)
}
