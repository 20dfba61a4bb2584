use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{MimModel, ModelConfig};
use crate::conditioning::Conditioning;
use crate::error::{bail, Result};
use crate::sampler::{generate_batch, SamplerConfig};

pub const WARMUP_RUNS: usize = 2;
pub const MIN_REPS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub batch_size: usize,
    /// Median wall time of one batched generate call.
    pub median_seconds: f64,
    pub per_image_seconds: f64,
    pub forwards: usize,
    pub timings: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub quantized: bool,
    pub warmup: usize,
    pub reps: usize,
    pub expected_forwards: usize,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn entry(&self, batch_size: usize) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.batch_size == batch_size)
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times batched generation end to end for each batch size.
///
/// Each size gets [`WARMUP_RUNS`] untimed runs and then `reps` timed runs
/// (at least [`MIN_REPS`]); the median is reported. Every run must perform
/// exactly the sampler's expected number of forward passes.
pub fn bench_throughput(model: &MimModel<f32>, cond: &Conditioning, batch_sizes: &[usize], reps: usize, cfg: &SamplerConfig) -> Result<BenchReport> {
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        bail!(Config, "batch sizes must be non-empty and positive");
    }
    let reps = reps.max(MIN_REPS);
    let expected = cfg.forwards_per_decode();
    let mut entries = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let conds = vec![cond.clone(); b];
        let mut timings = Vec::with_capacity(reps);
        let mut forwards = 0;
        for run in 0..WARMUP_RUNS + reps {
            let start = Instant::now();
            let (_, stats) = generate_batch(model, &conds, cfg)?;
            let elapsed = start.elapsed().as_secs_f64();
            if stats.forwards != expected {
                bail!(Numeric, "batch {b}: {} forwards, expected {expected}", stats.forwards);
            }
            forwards = stats.forwards;
            if run >= WARMUP_RUNS {
                timings.push(elapsed);
            }
        }
        let med = median(&timings);
        entries.push(BenchEntry { batch_size: b, median_seconds: med, per_image_seconds: med / b as f64, forwards, timings });
    }
    Ok(BenchReport {
        model: model.config,
        sampler: *cfg,
        quantized: model.is_quantized(),
        warmup: WARMUP_RUNS,
        reps,
        expected_forwards: expected,
        entries,
    })
}
