//! Integration-time measurement: how long one forced-merge ingest takes as a
//! function of the number of occupied slots.

use std::time::Instant;

use serde::Serialize;

use crate::bench::synth::{generate_suite, GeneratorConfig};
use crate::engine::{Engine, PolicyConfig};
use crate::error::{Error, Result};

/// 16 layers x 4 projections of 2048 x 2048, rank 32, scale 128.
pub fn full_scale() -> GeneratorConfig {
    GeneratorConfig {
        rank: 32,
        num_layers: 16,
        d_in: 2048,
        d_out: 2048,
        scale_numerator: 128.0,
        ..GeneratorConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingPoint {
    pub slots: usize,
    /// Wall time of each repeat, seconds.
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
}

/// For each slot count `m`, fills an engine with budget `m` using `m`
/// distinct adapters and times ingesting one more, which must merge.
pub fn measure_integration(config: &GeneratorConfig, slot_counts: &[usize], repeats: usize) -> Result<Vec<TimingPoint>> {
    let max = slot_counts.iter().copied().max().unwrap_or(0);
    if max == 0 || repeats == 0 {
        return Err(Error::Config("need at least one positive slot count and one repeat".into()));
    }
    let suite = generate_suite(&GeneratorConfig {
        alpha_types: max + 1,
        beta_langs: 1,
        ..config.clone()
    })?;
    let incoming = &suite.adapters[max];
    let mut points = Vec::with_capacity(slot_counts.len());
    for &m in slot_counts {
        let mut base = Engine::new(PolicyConfig::k_merge(m, config.rank))?;
        for a in &suite.adapters[..m] {
            base.ingest(a.clone())?;
        }
        let mut seconds = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let mut engine = base.clone();
            let adapter = incoming.clone();
            let start = Instant::now();
            engine.ingest(adapter)?;
            seconds.push(start.elapsed().as_secs_f64());
        }
        let mut sorted = seconds.clone();
        sorted.sort_by(f64::total_cmp);
        points.push(TimingPoint {
            slots: m,
            median_seconds: sorted[sorted.len() / 2],
            seconds,
        });
    }
    Ok(points)
}
