//! Per-class exemplar memory.
//!
//! An exemplar keeps the label it was trained under when it was new data.
//! A polar-bear sample stored during the bear step stays a bear exemplar for
//! the rest of the run.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::TrainItem;
use crate::error::Result;
use crate::hierarchy::ClassId;
use crate::net::Net;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Herding,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub features: Vec<f64>,
    pub label: ClassId,
    pub leaf: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    per_class: usize,
    classes: BTreeMap<ClassId, Vec<Exemplar>>,
}

/// Greedy herding: repeatedly picks the candidate that brings the running
/// exemplar mean closest to the mean of all candidates. Ties go to the lower
/// index. Returns `min(budget, n)` distinct indices in pick order.
pub fn select_herding(features: &[Vec<f64>], budget: usize) -> Vec<usize> {
    let n = features.len();
    if n == 0 || budget == 0 {
        return Vec::new();
    }
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut chosen = Vec::with_capacity(budget.min(n));
    let mut taken = vec![false; n];
    let mut sum = vec![0.0; d];
    while chosen.len() < budget.min(n) {
        let k = (chosen.len() + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = mean
                .iter()
                .zip(&sum)
                .zip(f)
                .map(|((m, s), v)| {
                    let diff = m - (s + v) / k;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.unwrap();
        taken[i] = true;
        for (s, v) in sum.iter_mut().zip(&features[i]) {
            *s += v;
        }
        chosen.push(i);
    }
    chosen
}

/// Uniform selection without replacement.
pub fn select_random<R: Rng + ?Sized>(count: usize, budget: usize, rng: &mut R) -> Vec<usize> {
    if budget >= count {
        return (0..count).collect();
    }
    sample(rng, count, budget).into_vec()
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

impl ExemplarStore {
    pub fn new(per_class: usize) -> Self {
        Self {
            per_class,
            classes: BTreeMap::new(),
        }
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn exemplars(&self, class: ClassId) -> &[Exemplar] {
        self.classes.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.keys().copied()
    }

    /// Stores up to `per_class` exemplars for every class of `step_classes`
    /// that is not already in memory. Candidates are the items of `pool`
    /// trained under that class.
    pub fn ingest<R: Rng + ?Sized>(
        &mut self,
        step_classes: &[ClassId],
        pool: &[TrainItem],
        strategy: Selection,
        normalize_features: bool,
        net: &Net,
        rng: &mut R,
    ) -> Result<()> {
        for &class in step_classes {
            if self.classes.contains_key(&class) {
                continue;
            }
            let candidates: Vec<&TrainItem> = pool.iter().filter(|p| p.label == class).collect();
            let picks = match strategy {
                Selection::Herding => {
                    let feats = candidates
                        .iter()
                        .map(|c| {
                            let mut f = net.features(&c.features)?;
                            if normalize_features {
                                l2_normalize(&mut f);
                            }
                            Ok(f)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    select_herding(&feats, self.per_class)
                }
                Selection::Random => select_random(candidates.len(), self.per_class, rng),
            };
            let stored = picks
                .into_iter()
                .map(|i| Exemplar {
                    features: candidates[i].features.clone(),
                    label: class,
                    leaf: candidates[i].leaf,
                })
                .collect();
            self.classes.insert(class, stored);
        }
        Ok(())
    }

    /// Flat view of memory in class order, as training items.
    pub fn rehearsal_pool(&self) -> Vec<TrainItem> {
        self.classes
            .values()
            .flatten()
            .map(|e| TrainItem {
                features: e.features.clone(),
                label: e.label,
                leaf: e.leaf,
            })
            .collect()
    }
}
