//! Synthetic hierarchical datasets and their CSV form.
//!
//! Every leaf class (subclass or orphan) owns an isotropic Gaussian cluster.
//! A superclass has no cluster of its own: its training samples are drawn
//! from its children's clusters, so superclass and subclass data overlap.
//!
//! Training rows are stored in schedule order and each scheduled class owns
//! `budget` consecutive rows; [`Dataset::split_for_step`] relies on that.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{training_label, ClassId, Hierarchy, NodeKind, TaskSchedule};
use crate::seed::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub leaf: ClassId,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub samples: Vec<Sample>,
}

/// One training example as presented at a given step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    pub features: Vec<f64>,
    pub label: ClassId,
    pub leaf: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub dim: usize,
    /// Standard deviation of the distribution cluster means are drawn from.
    pub mean_spread: f64,
    /// Within-cluster standard deviation.
    pub stddev: f64,
    pub test_per_leaf: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            mean_spread: 3.0,
            stddev: 1.0,
            test_per_leaf: 40,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be positive".into()));
        }
        if self.test_per_leaf == 0 {
            return Err(Error::InvalidConfig("test_per_leaf must be positive".into()));
        }
        if !(self.stddev >= 0.0 && self.stddev.is_finite()) {
            return Err(Error::InvalidConfig("stddev must be finite and non-negative".into()));
        }
        if !(self.mean_spread >= 0.0 && self.mean_spread.is_finite()) {
            return Err(Error::InvalidConfig("mean_spread must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Cluster centres of every leaf, indexed by class id (superclass entries are
/// empty).
pub fn cluster_means(h: &Hierarchy, cfg: &GenConfig) -> Vec<Vec<f64>> {
    let mut rng = SeedTree::new(cfg.seed).stream("data/means", 0);
    h.ids()
        .map(|c| {
            if h.is_superclass(c) {
                Vec::new()
            } else {
                gaussian(&mut rng, &vec![0.0; cfg.dim], cfg.mean_spread)
            }
        })
        .collect()
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, mean: &[f64], sd: f64) -> Vec<f64> {
    mean.iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(rng);
            m + sd * z
        })
        .collect()
}

pub fn generate(h: &Hierarchy, schedule: &TaskSchedule, cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    for c in schedule.steps().iter().flatten() {
        h.node(c.class)?;
    }
    for s in h.superclasses() {
        if h.children(s).next().is_none() {
            return Err(Error::ChildlessSuperclass(h.name(s).to_string()));
        }
    }
    let means = cluster_means(h, cfg);
    let seeds = SeedTree::new(cfg.seed);
    let mut samples = Vec::new();

    for (t, step) in schedule.steps().iter().enumerate() {
        let mut rng = seeds.stream("data/train", t as u64);
        for sc in step {
            let children: Vec<ClassId> = match h.kind(sc.class) {
                NodeKind::Superclass => h.children(sc.class).collect(),
                _ => vec![sc.class],
            };
            for _ in 0..sc.budget {
                let leaf = children[rng.random_range(0..children.len())];
                samples.push(Sample {
                    features: gaussian(&mut rng, &means[leaf.0], cfg.stddev),
                    leaf,
                    split: Split::Train,
                });
            }
        }
    }
    let mut rng = seeds.stream("data/test", 0);
    for leaf in h.leaves() {
        for _ in 0..cfg.test_per_leaf {
            samples.push(Sample {
                features: gaussian(&mut rng, &means[leaf.0], cfg.stddev),
                leaf,
                split: Split::Test,
            });
        }
    }
    Ok(Dataset {
        dim: cfg.dim,
        samples,
    })
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }

    /// New-data training pool of `step`, each sample carrying the single
    /// label it is visible under at that step.
    pub fn split_for_step(
        &self,
        h: &Hierarchy,
        schedule: &TaskSchedule,
        step: usize,
    ) -> Result<Vec<TrainItem>> {
        let skip: usize = schedule
            .steps()
            .iter()
            .take(step)
            .flatten()
            .map(|c| c.budget)
            .sum();
        let mut rows = self.train().skip(skip);
        let mut out = Vec::new();
        for sc in schedule.step(step) {
            for _ in 0..sc.budget {
                let s = rows.next().ok_or_else(|| {
                    Error::InvalidSchedule(format!(
                        "dataset has too few training rows for step {step}"
                    ))
                })?;
                let label = training_label(h, schedule, step, s.leaf)?;
                if label != sc.class {
                    return Err(Error::InvalidSchedule(format!(
                        "training row of `{}` found where `{}` was expected",
                        h.name(s.leaf),
                        h.name(sc.class)
                    )));
                }
                out.push(TrainItem {
                    features: s.features.clone(),
                    label,
                    leaf: s.leaf,
                });
            }
        }
        Ok(out)
    }

    pub fn save_csv<W: Write>(&self, h: &Hierarchy, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        header.push("leaf".into());
        header.push("split".into());
        w.write_record(&header).map_err(csv_write)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.features.iter().map(|v| format!("{v:?}")).collect();
            row.push(h.name(s.leaf).to_string());
            row.push(s.split.as_str().to_string());
            w.write_record(&row).map_err(csv_write)?;
        }
        w.flush().map_err(|e| Error::Csv {
            row: 0,
            message: e.to_string(),
        })
    }

    /// Reads the CSV form. Row numbers in errors count the header as row 1.
    pub fn load_csv<R: Read>(h: &Hierarchy, input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(input);
        let mut records = r.records();
        let header = match records.next() {
            Some(rec) => rec.map_err(|e| csv_read(1, e))?,
            None => return Err(Error::Csv { row: 1, message: "missing header".into() }),
        };
        let ncols = header.len();
        if ncols < 3 || &header[ncols - 2] != "leaf" || &header[ncols - 1] != "split" {
            return Err(Error::Csv {
                row: 1,
                message: "header must be f0,...,f{d-1},leaf,split".into(),
            });
        }
        let dim = ncols - 2;
        for (i, name) in header.iter().take(dim).enumerate() {
            if name != format!("f{i}") {
                return Err(Error::Csv {
                    row: 1,
                    message: format!("expected column `f{i}`, found `{name}`"),
                });
            }
        }
        let mut samples = Vec::new();
        for (i, rec) in records.enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| csv_read(row, e))?;
            if rec.len() != ncols {
                return Err(Error::Csv {
                    row,
                    message: format!("expected {ncols} columns, found {}", rec.len()),
                });
            }
            let features = rec
                .iter()
                .take(dim)
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| Error::Csv {
                        row,
                        message: format!("bad number `{v}`"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let leaf_name = &rec[dim];
            let leaf = h.id_of(leaf_name).map_err(|_| Error::Csv {
                row,
                message: format!("unknown class `{leaf_name}`"),
            })?;
            if h.is_superclass(leaf) {
                return Err(Error::Csv {
                    row,
                    message: format!("`{leaf_name}` is a superclass, not a leaf"),
                });
            }
            let split = match &rec[dim + 1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::Csv {
                        row,
                        message: format!("bad split `{other}`"),
                    })
                }
            };
            samples.push(Sample {
                features,
                leaf,
                split,
            });
        }
        Ok(Dataset { dim, samples })
    }
}

fn csv_write(e: csv::Error) -> Error {
    Error::Csv {
        row: 0,
        message: e.to_string(),
    }
}

fn csv_read(row: usize, e: csv::Error) -> Error {
    Error::Csv {
        row,
        message: e.to_string(),
    }
}
