use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use iirc_core::{BenchmarkConfig, Method, PredictionMode, TrainConfig};

/// Everything an experiment needs, as read from `--config`. Command-line
/// flags are applied on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Taxonomy file; the built-in one is used when absent.
    pub hierarchy: Option<PathBuf>,
    /// Schedule file produced by `gen`. Requires `hierarchy`.
    pub schedule: Option<PathBuf>,
    /// Dataset produced by `gen`. Requires `hierarchy` and `schedule`.
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub benchmark: BenchmarkConfig,
    pub train: TrainConfig,
    /// Method names; `k-mtkd` is mtkd with Top-k prediction.
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    /// Maximum predictions per sample for Top-k methods.
    pub k: usize,
    /// Per-class exemplar budgets for `sweep-buffer`.
    pub buffers: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            hierarchy: None,
            schedule: None,
            dataset: None,
            out: None,
            benchmark: BenchmarkConfig::default(),
            train: TrainConfig::default(),
            methods: vec!["mtkd".into()],
            seeds: vec![0],
            k: 2,
            buffers: vec![5, 20, 80],
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub methods: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub buffers: Option<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative paths inside the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.hierarchy, &mut cfg.schedule, &mut cfg.dataset, &mut cfg.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(s) = o.seeds {
            self.seeds = s;
        }
        if let Some(m) = o.methods {
            self.methods = m;
        }
        if let Some(p) = o.out {
            self.out = Some(p);
        }
        if let Some(k) = o.k {
            self.k = k;
            if let PredictionMode::TopK { .. } = self.train.prediction {
                self.train.prediction = PredictionMode::TopK { k };
            }
        }
        if let Some(l) = o.lambda {
            self.train.weights.lambda = l;
        }
        if let Some(m) = o.mu {
            self.train.weights.mu = m;
        }
        if let Some(b) = o.buffers {
            self.buffers = b;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("no methods requested");
        }
        if self.seeds.is_empty() {
            bail!("no seeds requested");
        }
        if self.k == 0 {
            bail!("k must be >= 1");
        }
        if self.schedule.is_some() && self.hierarchy.is_none() {
            bail!("a schedule file needs its hierarchy file");
        }
        if self.dataset.is_some() && self.schedule.is_none() {
            bail!("a dataset file needs its hierarchy and schedule files");
        }
        for m in &self.methods {
            self.train_config(m, 0)?;
        }
        self.train.validate()?;
        self.benchmark.data.validate()?;
        Ok(())
    }

    /// Training configuration of one (method, seed) run.
    pub fn train_config(&self, method: &str, seed: u64) -> Result<TrainConfig> {
        let (method, prediction) = match method {
            "k-mtkd" => (Method::Mtkd, PredictionMode::TopK { k: self.k }),
            other => (other.parse::<Method>()?, self.train.prediction),
        };
        Ok(TrainConfig {
            method,
            prediction,
            seed,
            ..self.train.clone()
        })
    }
}

pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|v| {
            let v = v.trim();
            v.parse::<T>().map_err(|e| anyhow::anyhow!("bad list element `{v}`: {e}"))
        })
        .collect()
}
