//! Seeded construction of a complete benchmark: schedule plus dataset.

use serde::{Deserialize, Serialize};

use crate::datagen::{generate, Dataset, GenConfig};
use crate::error::Result;
use crate::hierarchy::{build_schedule, default_layout, Benchmark, Budgets, Hierarchy, StepLayout};
use crate::seed::SeedTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub layout: StepLayout,
    pub budgets: Budgets,
    /// The `seed` field here is ignored; the benchmark seed wins.
    pub data: GenConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            layout: default_layout(),
            budgets: Budgets::default(),
            data: GenConfig::default(),
        }
    }
}

/// Places the classes of `h` and draws the dataset, both from `seed`.
pub fn build_benchmark(h: &Hierarchy, cfg: &BenchmarkConfig, seed: u64) -> Result<(Benchmark, Dataset)> {
    let bench = build_schedule(h, &cfg.layout, &cfg.budgets, &mut SeedTree::new(seed).stream("schedule", 0))?;
    let data = GenConfig {
        seed,
        ..cfg.data.clone()
    };
    let dataset = generate(&bench.hierarchy, &bench.schedule, &data)?;
    Ok((bench, dataset))
}
