//! Synthetic task grids whose adapters carry a problem-type component, a
//! language component and per-task noise, each exactly low rank.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{FactorPair, LayerKey, LoraAdapter, Projection};
use crate::error::{Error, Result};
use crate::format::{read_adapter, write_adapter, write_atomic};

pub const TASKS_FILE: &str = "tasks.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub alpha_types: usize,
    pub beta_langs: usize,
    pub rank: usize,
    pub num_layers: u32,
    pub d_in: usize,
    pub d_out: usize,
    pub scale_numerator: f64,
    pub type_strength: f64,
    pub lang_strength: f64,
    pub noise_strength: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            alpha_types: 5,
            beta_langs: 8,
            rank: 4,
            num_layers: 4,
            d_in: 64,
            d_out: 64,
            scale_numerator: 16.0,
            type_strength: 1.0,
            lang_strength: 0.5,
            noise_strength: 0.25,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Rank budget of the (type, language, noise) components.
    pub fn component_ranks(&self) -> [usize; 3] {
        let t = self.rank / 2;
        let l = self.rank / 4;
        [t, l.max(1), self.rank - t - l.max(1)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_types == 0 || self.beta_langs == 0 {
            return Err(Error::Config("the task grid needs at least one type and one language".into()));
        }
        if self.num_layers == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Config("layer count and widths must be positive".into()));
        }
        if self.rank < 3 {
            return Err(Error::Config(format!(
                "rank {} cannot hold separate type, language and noise components (need >= 3)",
                self.rank
            )));
        }
        if self.rank > self.d_in.min(self.d_out) {
            return Err(Error::Config(format!(
                "rank {} exceeds the layer width {}",
                self.rank,
                self.d_in.min(self.d_out)
            )));
        }
        if !(self.scale_numerator.is_finite() && self.scale_numerator != 0.0) {
            return Err(Error::Config("scale numerator must be finite and nonzero".into()));
        }
        for (name, v) in [
            ("type", self.type_strength),
            ("language", self.lang_strength),
            ("noise", self.noise_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} strength must be finite and >= 0, got {v}")));
            }
        }
        if self.type_strength + self.lang_strength + self.noise_strength == 0.0 {
            return Err(Error::Config("at least one strength must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_keys(&self) -> Vec<LayerKey> {
        (0..self.num_layers)
            .flat_map(|l| Projection::ALL.into_iter().map(move |p| LayerKey::new(l, p)))
            .collect()
    }
}

/// A task of the grid, identified by its labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub problem_type: String,
    pub language: String,
}

/// Adapters paired with their task specs, in grid order.
#[derive(Debug, Clone)]
pub struct Suite {
    pub adapters: Vec<LoraAdapter>,
    pub tasks: Vec<TaskSpec>,
}

impl Suite {
    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }
}

pub fn type_label(i: usize) -> String {
    format!("p{:02}", i + 1)
}

pub fn lang_label(i: usize) -> String {
    format!("l{:02}", i + 1)
}

/// Unit-norm `b · a` with Gaussian factors of the given inner rank.
struct Component {
    b: DMatrix<f64>,
    a: DMatrix<f64>,
}

impl Component {
    fn draw(rng: &mut ChaCha8Rng, rank: usize, d_in: usize, d_out: usize) -> Self {
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        let b = DMatrix::from_fn(d_out, rank, |_, _| normal());
        let a = DMatrix::from_fn(rank, d_in, |_, _| normal());
        // ||b·a||_F² = sum((bᵀb) ∘ (a·aᵀ)), without forming d_out x d_in.
        let norm = (b.transpose() * &b).component_mul(&(&a * a.transpose())).sum().sqrt();
        Component { b: b / norm, a }
    }
}

type Prototype = BTreeMap<LayerKey, Component>;

fn prototype(rng: &mut ChaCha8Rng, config: &GeneratorConfig, rank: usize) -> Prototype {
    config
        .layer_keys()
        .into_iter()
        .map(|k| (k, Component::draw(rng, rank, config.d_in, config.d_out)))
        .collect()
}

/// Assembles `ΔW = t·P + l·D + n·E` as one stored factor pair per layer.
fn task_adapter(
    config: &GeneratorConfig,
    labels: (&str, &str, &str),
    parts: [(&Prototype, f64); 3],
) -> Result<LoraAdapter> {
    let inv_scaling = config.rank as f64 / config.scale_numerator;
    let mut layers = BTreeMap::new();
    for key in config.layer_keys() {
        let mut b = DMatrix::zeros(config.d_out, config.rank);
        let mut a = DMatrix::zeros(config.rank, config.d_in);
        let mut col = 0;
        for (proto, strength) in parts {
            let c = &proto[&key];
            let r = c.a.nrows();
            b.columns_mut(col, r).copy_from(&(&c.b * (strength * inv_scaling)));
            a.rows_mut(col, r).copy_from(&c.a);
            col += r;
        }
        layers.insert(key, FactorPair::from_matrices(&a, &b)?);
    }
    LoraAdapter::new(labels.0, labels.1, labels.2, config.rank, config.scale_numerator, layers)
}

/// Generates adapters for the given (type, language) index pairs, drawing
/// fresh prototypes for `n_types` types and `n_langs` languages.
fn generate_cells(
    config: &GeneratorConfig,
    n_types: usize,
    n_langs: usize,
    cells: &[(usize, usize)],
    prefix: &str,
) -> Result<Suite> {
    config.validate()?;
    let [rt, rl, rn] = config.component_ranks();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let types: Vec<Prototype> = (0..n_types).map(|_| prototype(&mut rng, config, rt)).collect();
    let langs: Vec<Prototype> = (0..n_langs).map(|_| prototype(&mut rng, config, rl)).collect();
    let mut suite = Suite {
        adapters: Vec::with_capacity(cells.len()),
        tasks: Vec::with_capacity(cells.len()),
    };
    for &(p, l) in cells {
        let noise = prototype(&mut rng, config, rn);
        let spec = TaskSpec {
            task_id: format!("{prefix}{}_{}", type_label(p), lang_label(l)),
            problem_type: type_label(p),
            language: lang_label(l),
        };
        let adapter = task_adapter(
            config,
            (&spec.task_id, &spec.problem_type, &spec.language),
            [
                (&types[p], config.type_strength),
                (&langs[l], config.lang_strength),
                (&noise, config.noise_strength),
            ],
        )?;
        suite.adapters.push(adapter);
        suite.tasks.push(spec);
    }
    Ok(suite)
}

/// The full `alpha x beta` grid, type-major.
pub fn generate_suite(config: &GeneratorConfig) -> Result<Suite> {
    let cells: Vec<(usize, usize)> = (0..config.alpha_types)
        .flat_map(|p| (0..config.beta_langs).map(move |l| (p, l)))
        .collect();
    generate_cells(config, config.alpha_types, config.beta_langs, &cells, "")
}

/// A small calibration set drawn from fresh prototypes with the same
/// strengths: three languages of one type plus one task of a second type.
///
/// Half of its six pairs share a type, so the median pair falls between the
/// same-type and cross-type similarity levels.
pub fn generate_held_out(config: &GeneratorConfig) -> Result<Suite> {
    // A separate seed stream keeps these prototypes independent of a task
    // grid generated with the same seed.
    let config = GeneratorConfig {
        seed: config.seed ^ HELD_OUT_STREAM,
        ..config.clone()
    };
    let cells = [(0, 0), (0, 1), (0, 2), (1, 0)];
    generate_cells(&config, 2, 3, &cells, "h_")
}

const HELD_OUT_STREAM: u64 = 0x6865_6c64_5f6f_7574;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskEntry {
    #[serde(flatten)]
    spec: TaskSpec,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TasksFile {
    generator: Option<GeneratorConfig>,
    tasks: Vec<TaskEntry>,
}

/// Writes `<task_id>.kmrg` per adapter plus `tasks.json`.
pub fn write_suite(suite: &Suite, generator: Option<&GeneratorConfig>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tasks = Vec::with_capacity(suite.len());
    for (adapter, spec) in suite.adapters.iter().zip(&suite.tasks) {
        let file = format!("{}.kmrg", spec.task_id);
        write_adapter(adapter, dir.join(&file))?;
        tasks.push(TaskEntry {
            spec: spec.clone(),
            file,
        });
    }
    let index = TasksFile {
        generator: generator.cloned(),
        tasks,
    };
    write_atomic(&dir.join(TASKS_FILE), &serde_json::to_vec_pretty(&index)?)
}

/// Reads a suite directory. Without `tasks.json`, every `.kmrg` file is
/// loaded in file-name order and labelled from its header.
pub fn read_suite(dir: impl AsRef<Path>) -> Result<Suite> {
    let dir = dir.as_ref();
    let index_path = dir.join(TASKS_FILE);
    let mut suite = Suite {
        adapters: Vec::new(),
        tasks: Vec::new(),
    };
    if index_path.exists() {
        let bytes = std::fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: TasksFile = serde_json::from_slice(&bytes)?;
        for entry in index.tasks {
            let adapter = read_adapter(dir.join(&entry.file))?;
            if adapter.task_id != entry.spec.task_id {
                return Err(Error::Config(format!(
                    "{} holds task `{}`, expected `{}`",
                    entry.file, adapter.task_id, entry.spec.task_id
                )));
            }
            suite.adapters.push(adapter);
            suite.tasks.push(entry.spec);
        }
        return Ok(suite);
    }
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in listing {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "kmrg") {
            files.push(path);
        }
    }
    files.sort();
    for path in files {
        let adapter = read_adapter(&path)?;
        suite.tasks.push(TaskSpec {
            task_id: adapter.task_id.clone(),
            problem_type: adapter.problem_type.clone(),
            language: adapter.language.clone(),
        });
        suite.adapters.push(adapter);
    }
    Ok(suite)
}

/// Reads the generator config recorded in a suite's `tasks.json`, if any.
pub fn read_generator(dir: impl AsRef<Path>) -> Result<Option<GeneratorConfig>> {
    let path = dir.as_ref().join(TASKS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: TasksFile = serde_json::from_slice(&bytes)?;
    Ok(index.generator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::materialize_delta;
    use crate::similarity::{adapter_similarity, similarity_matrix};

    #[test]
    fn default_grid_shape() {
        let suite = generate_suite(&GeneratorConfig::default()).unwrap();
        assert_eq!(suite.len(), 40);
        assert_eq!(suite.tasks[0].task_id, "p01_l01");
        assert_eq!(suite.tasks[39].task_id, "p05_l08");
        let ids: std::collections::BTreeSet<_> = suite.tasks.iter().map(|t| &t.task_id).collect();
        assert_eq!(ids.len(), 40);
    }

    #[test]
    fn single_cell_grid() {
        let config = GeneratorConfig { alpha_types: 1, beta_langs: 1, ..Default::default() };
        assert_eq!(generate_suite(&config).unwrap().len(), 1);
    }

    #[test]
    fn component_norms_match_strengths() {
        // Each component has unit norm, so the pure type component's ΔW norm
        // equals the type strength.
        let config = GeneratorConfig {
            alpha_types: 1,
            beta_langs: 1,
            lang_strength: 0.0,
            noise_strength: 0.0,
            type_strength: 2.0,
            ..Default::default()
        };
        let suite = generate_suite(&config).unwrap();
        for key in config.layer_keys() {
            let n = materialize_delta(&suite.adapters[0], &key).unwrap().norm();
            assert!((n - 2.0).abs() < 1e-5, "{n}");
        }
    }

    #[test]
    fn degenerate_generator_clones_within_type() {
        let config = GeneratorConfig {
            alpha_types: 3,
            beta_langs: 3,
            lang_strength: 0.0,
            noise_strength: 0.0,
            ..Default::default()
        };
        let suite = generate_suite(&config).unwrap();
        let m = similarity_matrix(&suite.adapters).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let same = suite.tasks[i].problem_type == suite.tasks[j].problem_type;
                if same {
                    assert!((m.get(i, j) - 1.0).abs() < 1e-6);
                } else {
                    assert!(m.get(i, j).abs() < 0.1, "{}", m.get(i, j));
                }
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let config = GeneratorConfig { alpha_types: 2, beta_langs: 2, seed: 5, ..Default::default() };
        let x = generate_suite(&config).unwrap();
        let y = generate_suite(&config).unwrap();
        assert_eq!(x.adapters, y.adapters);
        let z = generate_suite(&GeneratorConfig { seed: 6, ..config }).unwrap();
        assert_ne!(x.adapters, z.adapters);
    }

    #[test]
    fn infeasible_configs() {
        for config in [
            GeneratorConfig { rank: 2, ..Default::default() },
            GeneratorConfig { rank: 65, ..Default::default() },
            GeneratorConfig { noise_strength: -1.0, ..Default::default() },
            GeneratorConfig { alpha_types: 0, ..Default::default() },
        ] {
            assert!(generate_suite(&config).unwrap_err().is_config());
        }
    }

    #[test]
    fn held_out_median_lies_between_groups() {
        let held = generate_held_out(&GeneratorConfig { seed: 3, ..Default::default() }).unwrap();
        assert_eq!(held.len(), 4);
        let same = adapter_similarity(&held.adapters[0], &held.adapters[1]).unwrap();
        let cross_lang = adapter_similarity(&held.adapters[0], &held.adapters[3]).unwrap();
        let s = crate::similarity::calibrate_threshold(&held.adapters).unwrap();
        assert!(cross_lang < s && s < same, "{cross_lang} {s} {same}");
    }

    #[test]
    fn held_out_is_independent_of_a_same_seed_grid() {
        let config = GeneratorConfig { seed: 3, ..Default::default() };
        let held = generate_held_out(&config).unwrap();
        let grid = generate_suite(&config).unwrap();
        let same_type = adapter_similarity(&held.adapters[0], &held.adapters[1]).unwrap();
        let across = adapter_similarity(&held.adapters[0], &grid.adapters[0]).unwrap();
        assert!(across.abs() < 0.5 * same_type, "{across} vs {same_type}");
    }

    #[test]
    fn suite_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = GeneratorConfig { alpha_types: 2, beta_langs: 2, ..Default::default() };
        let suite = generate_suite(&config).unwrap();
        write_suite(&suite, Some(&config), dir.path()).unwrap();
        let back = read_suite(dir.path()).unwrap();
        assert_eq!(back.adapters, suite.adapters);
        assert_eq!(back.tasks, suite.tasks);
        assert_eq!(read_generator(dir.path()).unwrap(), Some(config));
        std::fs::remove_file(dir.path().join(TASKS_FILE)).unwrap();
        assert_eq!(read_suite(dir.path()).unwrap().tasks, suite.tasks);
    }
}
