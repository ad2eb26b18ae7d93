//! Sampler x seed grids and per-sampler medians.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::parallel;
use crate::trainer::{run, FinalMetrics, RunStatus, SamplerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub sampler: SamplerKind,
    pub seed: u64,
    pub status: RunStatus,
    pub metrics: FinalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSummary {
    pub sampler: SamplerKind,
    pub runs: usize,
    pub diverged: usize,
    #[serde(rename = "median_mAP")]
    pub median_map: f64,
    pub median_rank1: f64,
    pub median_rank5: f64,
    /// Median cross-view mAP per query mode.
    pub median_cross_view_map: Vec<f64>,
    pub median_query_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cells: Vec<CellResult>,
    pub summaries: Vec<SamplerSummary>,
}

/// Median of `xs`; mean of the middle two for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn summarize(sampler: SamplerKind, cells: &[&CellResult]) -> SamplerSummary {
    let pick = |f: &dyn Fn(&FinalMetrics) -> f64| median(&cells.iter().map(|c| f(&c.metrics)).collect::<Vec<_>>());
    let modes = cells.first().map_or(0, |c| c.metrics.cross_view.len());
    SamplerSummary {
        sampler,
        runs: cells.len(),
        diverged: cells.iter().filter(|c| c.status != RunStatus::Completed).count(),
        median_map: pick(&|m| m.retrieval.map),
        median_rank1: pick(&|m| m.retrieval.rank1),
        median_rank5: pick(&|m| m.retrieval.rank5),
        median_cross_view_map: (0..modes).map(|k| pick(&|m| m.cross_view[k].map)).collect(),
        median_query_accuracy: pick(&|m| m.query_accuracy),
    }
}

/// Trains every (sampler, seed) cell with `base` otherwise unchanged. Cells
/// run in parallel; each owns its RNG stream, so results do not depend on
/// scheduling. One summary per listed sampler, in order.
pub fn run_grid(base: &TrainConfig, dataset: &Dataset, samplers: &[SamplerKind], seeds: &[u64]) -> Result<Comparison> {
    if samplers.is_empty() || seeds.is_empty() {
        return Err(invalid("comparison needs at least one sampler and one seed"));
    }
    for &sampler in samplers {
        TrainConfig { sampler, ..base.clone() }.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..samplers.len()).flat_map(|s| seeds.iter().map(move |&seed| (s, seed))).collect();
    let cells = parallel::try_map(jobs.len(), |j| -> Result<CellResult> {
        let (s, seed) = jobs[j];
        let config = TrainConfig {
            sampler: samplers[s],
            seed,
            ..base.clone()
        };
        let out = run(&config, dataset)?;
        Ok(CellResult {
            sampler: samplers[s],
            seed,
            status: out.status,
            metrics: out.final_metrics,
        })
    })?;
    let summaries = (0..samplers.len())
        .map(|s| {
            let mine: Vec<&CellResult> = cells[s * seeds.len()..(s + 1) * seeds.len()].iter().collect();
            summarize(samplers[s], &mine)
        })
        .collect();
    Ok(Comparison { cells, summaries })
}

impl Comparison {
    pub fn summary(&self, sampler: SamplerKind) -> Option<&SamplerSummary> {
        self.summaries.iter().find(|s| s.sampler == sampler)
    }
}
