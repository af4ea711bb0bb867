use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use kmerge::bench::sim::{
    run_simulation, summarize, threshold_sweep, write_reports, Assignment, OrderingKind, OrderingSpec, SimOptions,
    Simulation,
};
use kmerge::bench::storage::{adapter_storage, preset, storage_report, TargetModules, PRESETS};
use kmerge::bench::synth::{generate_held_out, generate_suite, read_suite, write_suite, GeneratorConfig, Suite};
use kmerge::bench::timing::{measure_integration, full_scale};
use kmerge::delta::MergedDelta;
use kmerge::format::{read_adapter, write_adapter, Header};
use kmerge::merge::{refactor, AdapterMeta, MergeOperator, OperatorKind, RankMode, RankPolicy};
use kmerge::persist::{persist, read_manifest, MANIFEST_FILE};
use kmerge::similarity::{calibrate_threshold, similarity_matrix};
use kmerge::{Error, LoraAdapter, PolicyConfig, Variant};

use crate::{
    AssignmentArg, CalibrateArgs, GenArgs, InspectArgs, MergeArgs, ModulesArg, OperatorArg, OperatorFlags,
    OrderingArg, PolicyFlags, RankModeArg, RouteArgs, RunArgs, SimArgs, SweepArgs, TimingArgs, VariantArg,
};

/// A flag combination rejected before any work is done. Exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl From<OperatorArg> for OperatorKind {
    fn from(a: OperatorArg) -> Self {
        match a {
            OperatorArg::RunningAverage => OperatorKind::RunningAverage,
            OperatorArg::Linear => OperatorKind::Linear,
            OperatorArg::Ties => OperatorKind::Ties,
            OperatorArg::Dare => OperatorKind::Dare,
            OperatorArg::DareTies => OperatorKind::DareTies,
        }
    }
}

impl From<OrderingArg> for OrderingKind {
    fn from(a: OrderingArg) -> Self {
        match a {
            OrderingArg::Random => OrderingKind::Random,
            OrderingArg::ProblemTypes => OrderingKind::ProblemTypes,
            OrderingArg::Worst => OrderingKind::Worst,
        }
    }
}

fn operator(kind: OperatorArg, flags: &OperatorFlags) -> MergeOperator {
    MergeOperator {
        kind: kind.into(),
        density: flags.density,
        drop_rate: flags.drop_rate,
        weight: flags.weight,
        rng_seed: flags.op_seed,
    }
}

fn load_suite(dir: &Path) -> Result<Suite> {
    let suite = read_suite(dir).with_context(|| format!("reading suite {}", dir.display()))?;
    if suite.is_empty() {
        bail!("no adapters found in {}", dir.display());
    }
    Ok(suite)
}

pub fn gen(args: GenArgs) -> Result<()> {
    let config = GeneratorConfig {
        alpha_types: args.alpha,
        beta_langs: args.beta,
        rank: args.rank,
        num_layers: args.layers,
        d_in: args.width,
        d_out: args.width,
        scale_numerator: args.scale,
        type_strength: args.type_strength,
        lang_strength: args.lang_strength,
        noise_strength: args.noise_strength,
        seed: args.seed,
    };
    config.validate()?;
    let suite = if args.held_out {
        generate_held_out(&config)?
    } else {
        generate_suite(&config)?
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_suite(&suite, Some(&config), &args.out)?;
    println!("wrote {} adapters to {}", suite.len(), args.out.display());
    Ok(())
}

pub fn calibrate(args: CalibrateArgs) -> Result<()> {
    let suite = load_suite(&args.dir)?;
    println!("{}", calibrate_threshold(&suite.adapters)?);
    Ok(())
}

/// Policy for every requested budget, checked before anything is read.
fn policies_from_flags(flags: &PolicyFlags) -> Result<Vec<PolicyConfig>> {
    let pp = flags.variant == VariantArg::KMergePp;
    let has_threshold = flags.threshold.is_some() || flags.calibrate_dir.is_some();
    if pp && !has_threshold {
        return Err(usage("k-merge-pp needs --threshold or --calibrate-dir"));
    }
    if !pp && has_threshold {
        return Err(usage("--threshold and --calibrate-dir only apply to k-merge-pp"));
    }
    let rank_mode = match flags.rank_mode {
        RankModeArg::Svd => RankMode::SvdTruncate,
        RankModeArg::FactorAverage => RankMode::FactorAverage,
    };
    let configs: Vec<PolicyConfig> = flags
        .k
        .iter()
        .map(|&k| PolicyConfig {
            budget_k: k,
            variant: if pp { Variant::KMergePp } else { Variant::KMerge },
            // Placeholder until calibration; validated again once known.
            threshold_s: pp.then_some(flags.threshold.unwrap_or(0.0)),
            operator: operator(flags.operator, &flags.op),
            rank_policy: RankPolicy {
                mode: rank_mode,
                target_rank: flags.rank.unwrap_or(1),
            },
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

fn policy_from_file(path: &Path) -> Result<PolicyConfig> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let config: PolicyConfig =
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn cell_dir(base: &Path, multi: bool, name: String) -> PathBuf {
    if multi {
        base.join(name)
    } else {
        base.to_path_buf()
    }
}

pub fn run(args: RunArgs) -> Result<()> {
    let mut configs = match &args.config {
        Some(path) => vec![policy_from_file(path)?],
        None => policies_from_flags(&args.policy)?,
    };
    if args.seeds.is_empty() {
        return Err(usage("--seeds needs at least one value"));
    }
    let suite = load_suite(&args.suite)?;
    if args.config.is_none() {
        let threshold = match &args.policy.calibrate_dir {
            Some(dir) => Some(calibrate_threshold(&load_suite(dir)?.adapters)?),
            None => args.policy.threshold,
        };
        let rank = args.policy.rank.unwrap_or(suite.adapters[0].rank());
        for c in &mut configs {
            c.threshold_s = threshold;
            c.rank_policy.target_rank = rank;
            c.validate()?;
        }
    }

    let options = SimOptions {
        assignment: match args.assignment {
            AssignmentArg::MostSimilar => Assignment::MostSimilar,
            AssignmentArg::Random => Assignment::Random {
                seed: args.assignment_seed,
            },
        },
        record_timing: args.timing,
    };
    let cells: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| args.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let kind = OrderingKind::from(args.ordering);
    let run_cell = |&(c, seed): &(usize, u64)| -> kmerge::Result<Simulation> {
        run_simulation(&suite, &OrderingSpec { kind, seed }, &configs[c], &options)
    };
    let sims: Vec<Simulation> = if args.parallel {
        cells.par_iter().map(run_cell).collect::<kmerge::Result<_>>()?
    } else {
        cells.iter().map(run_cell).collect::<kmerge::Result<_>>()?
    };

    let multi_k = configs.len() > 1;
    let mut summary = String::from("k,seed,final_score,clustering_consistency,allocations\n");
    for (c, config) in configs.iter().enumerate() {
        let reports: Vec<_> = cells
            .iter()
            .zip(&sims)
            .filter(|((ci, _), _)| *ci == c)
            .map(|(_, sim)| sim.report.clone())
            .collect();
        let dir = cell_dir(&args.out, multi_k, format!("k{}", config.budget_k));
        write_reports(&reports, &dir).with_context(|| format!("writing reports to {}", dir.display()))?;
        // The resolved policy, loadable again through --config.
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(config)?).context("writing config.json")?;
        let s = summarize(&reports);
        println!(
            "K={} {}: final S {:.4} ± {:.4}, consistency {:.4} over {} runs",
            config.budget_k,
            config.variant.as_str(),
            s.final_score_mean,
            s.final_score_std,
            s.consistency_mean,
            s.runs
        );
    }
    for (&(c, seed), sim) in cells.iter().zip(&sims) {
        let r = &sim.report;
        let _ = writeln!(
            summary,
            "{},{},{},{},{}",
            configs[c].budget_k,
            seed,
            r.final_score,
            r.clustering_consistency,
            r.allocations()
        );
    }
    fs::write(args.out.join("summary.csv"), summary).context("writing summary.csv")?;

    if let Some(store) = &args.store_dir {
        let multi = cells.len() > 1;
        for (&(c, seed), sim) in cells.iter().zip(&sims) {
            let dir = cell_dir(store, multi, format!("k{}_seed{seed}", configs[c].budget_k));
            persist(&sim.engine, &dir).with_context(|| format!("persisting store to {}", dir.display()))?;
        }
    }
    Ok(())
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    if args.thresholds.iter().any(|s| !s.is_finite()) {
        return Err(usage("thresholds must be finite"));
    }
    let suite = load_suite(&args.suite)?;
    let rank = args.rank.unwrap_or(suite.adapters[0].rank());
    let config = PolicyConfig::k_merge_pp(args.k, 0.0, rank);
    config.validate()?;
    let order = OrderingSpec {
        kind: args.ordering.into(),
        seed: args.seed,
    };
    let options = SimOptions {
        record_timing: false,
        ..SimOptions::default()
    };
    let rows = threshold_sweep(&suite, &order, &config, &args.thresholds, &options)?;
    let mut csv = String::from("threshold,final_score,clustering_consistency,allocations\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            r.threshold, r.final_score, r.clustering_consistency, r.allocations
        );
    }
    match &args.csv {
        Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn shared_label(x: &str, y: &str) -> String {
    if x == y {
        x.to_string()
    } else {
        "mixed".to_string()
    }
}

#[derive(Serialize)]
struct MergeReport<'a> {
    operator: &'a MergeOperator,
    rank: usize,
    merge_count: usize,
    /// Relative truncation residual per layer.
    residuals: BTreeMap<String, f64>,
}

pub fn merge(args: MergeArgs) -> Result<()> {
    let op = operator(args.op, &args.flags);
    op.validate()?;
    if args.rank == Some(0) {
        return Err(usage("--rank must be >= 1"));
    }
    let first = read_adapter(&args.first).with_context(|| format!("reading {}", args.first.display()))?;
    let second = read_adapter(&args.second).with_context(|| format!("reading {}", args.second.display()))?;
    let stored = MergedDelta::from_adapter(&first);
    let incoming = MergedDelta::from_adapter(&second);
    stored.check_compatible(&incoming)?;
    let merged = op.apply(&stored, 1, &incoming)?;

    let width = first
        .layers()
        .values()
        .map(|p| p.d_in().min(p.d_out()))
        .min()
        .expect("adapters have layers");
    let rank = args.rank.unwrap_or((first.rank() + second.rank()).min(width));
    let meta = AdapterMeta {
        task_id: args.task_id,
        problem_type: shared_label(&first.problem_type, &second.problem_type),
        language: shared_label(&first.language, &second.language),
        scale_numerator: first.scale_numerator(),
    };
    let out = refactor(&merged, &RankPolicy::svd(rank), &meta)?;
    write_adapter(&out.adapter, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let report = MergeReport {
        operator: &op,
        rank,
        merge_count: merged.merge_count,
        residuals: out.residuals.iter().map(|(k, r)| (k.to_string(), *r)).collect(),
    };
    let report_path = args.out.with_extension("json");
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!(
        "wrote {} (rank {rank}, max truncation residual {:.3e})",
        args.out.display(),
        out.max_residual()
    );
    Ok(())
}

pub fn sim(args: SimArgs) -> Result<()> {
    let suite = load_suite(&args.dir)?;
    let matrix = similarity_matrix(&suite.adapters)?;
    match &args.csv {
        Some(path) => fs::write(path, matrix.to_csv()).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", matrix.to_csv()),
    }
    Ok(())
}

pub fn route(args: RouteArgs) -> Result<()> {
    let manifest = read_manifest(&args.store).with_context(|| format!("reading store {}", args.store.display()))?;
    let index = match args.task.parse::<usize>() {
        Ok(i) => i,
        Err(_) => {
            let pos = manifest
                .task_ids
                .iter()
                .position(|id| *id == args.task)
                .with_context(|| format!("task `{}` is not in the store", args.task))?;
            pos + 1
        }
    };
    let slot = manifest
        .slots
        .iter()
        .find(|s| s.tasks.contains(&index))
        .ok_or(Error::UnknownTask(index))?;
    println!("{}", slot.slot_key);
    Ok(())
}

#[derive(Serialize)]
struct AdapterSummary {
    header: Header,
    parameters: usize,
    file_bytes: usize,
}

fn millions(n: usize) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

fn inspect_geometry(args: &InspectArgs, name: &str) -> Result<()> {
    let geometry = preset(name).ok_or_else(|| {
        let known: Vec<&str> = PRESETS.iter().map(|g| g.name).collect();
        usage(format!("unknown geometry `{name}`; known: {}", known.join(", ")))
    })?;
    let modules = match args.modules {
        Some(ModulesArg::Attention) => vec![TargetModules::Attention],
        Some(ModulesArg::AllLinear) => vec![TargetModules::AllLinear],
        None => vec![TargetModules::Attention, TargetModules::AllLinear],
    };
    let reports = modules
        .into_iter()
        .map(|m| storage_report(&geometry, args.rank, m, args.scale))
        .collect::<kmerge::Result<Vec<_>>>()?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
        return Ok(());
    }
    for r in &reports {
        let modules = match r.modules {
            TargetModules::Attention => "attention",
            TargetModules::AllLinear => "all-linear",
        };
        let file = r.file_bytes.map(|b| b.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "{} rank {} {modules}: {} parameters ({}), f32 {} bytes, bf16 {} bytes, file {file} bytes",
            r.model,
            r.rank,
            r.parameters,
            millions(r.parameters),
            r.bytes_f32,
            r.bytes_bf16
        );
    }
    Ok(())
}

fn inspect_adapter(path: &Path, json: bool) -> Result<()> {
    let adapter: LoraAdapter = read_adapter(path).with_context(|| format!("reading {}", path.display()))?;
    let (parameters, file_bytes) = adapter_storage(&adapter)?;
    let summary = AdapterSummary {
        header: Header::for_adapter(&adapter),
        parameters,
        file_bytes,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }
    let h = &summary.header;
    println!("task {} (type {}, language {})", h.task_id, h.problem_type, h.language);
    println!("rank {}, scale numerator {}, {} layers", h.rank, h.scale_numerator, h.layers.len());
    let mut shapes: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for l in &h.layers {
        *shapes.entry((l.d_out, l.d_in)).or_default() += 1;
    }
    for ((d_out, d_in), n) in shapes {
        println!("  {n} x {d_out}x{d_in}");
    }
    println!("{parameters} parameters, {file_bytes} bytes on disk");
    Ok(())
}

fn inspect_store(dir: &Path, json: bool) -> Result<()> {
    let manifest = read_manifest(dir).with_context(|| format!("reading store {}", dir.display()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&manifest)?);
        return Ok(());
    }
    let threshold = manifest.threshold_s.map(|s| format!(", threshold {s}")).unwrap_or_default();
    println!(
        "{} with K={}{threshold}, operator {}, rank {}",
        manifest.variant.as_str(),
        manifest.budget_k,
        manifest.operator.kind.as_str(),
        manifest.rank_policy.target_rank
    );
    println!("{} tasks in {} slots", manifest.task_ids.len(), manifest.slots.len());
    for slot in &manifest.slots {
        let ids: Vec<&str> = slot
            .tasks
            .iter()
            .filter_map(|&t| manifest.task_ids.get(t - 1).map(String::as_str))
            .collect();
        println!("  slot {} ({}): {}", slot.slot_key, slot.file, ids.join(" "));
    }
    Ok(())
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    if let Some(name) = &args.geometry {
        return inspect_geometry(&args, name);
    }
    let path = args.path.as_deref().expect("clap requires a path or a geometry");
    if path.is_dir() || path.join(MANIFEST_FILE).exists() {
        inspect_store(path, args.json)
    } else {
        inspect_adapter(path, args.json)
    }
}

pub fn timing(args: TimingArgs) -> Result<()> {
    if args.slots.is_empty() || args.slots.contains(&0) || args.repeats == 0 {
        return Err(usage("--slots must be positive and --repeats at least 1"));
    }
    let config = if args.small {
        GeneratorConfig::default()
    } else {
        full_scale()
    };
    let points = measure_integration(&config, &args.slots, args.repeats)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&points)?);
        return Ok(());
    }
    for p in &points {
        println!("{} slots: median {:.4} s over {} repeats", p.slots, p.median_seconds, p.seconds.len());
    }
    Ok(())
}
