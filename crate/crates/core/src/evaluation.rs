//! Label-set predictions and the precision-weighted Jaccard metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::hierarchy::{ClassId, Hierarchy, LabelSet, TaskSchedule};
use crate::net::Scorer;

/// Scores strictly above this are activated.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PredictionMode {
    Threshold,
    TopK { k: usize },
}

impl PredictionMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PredictionMode::TopK { k: 0 } => Err(Error::InvalidConfig("k must be >= 1".into())),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, scores: &[f64]) -> LabelSet {
        match *self {
            PredictionMode::Threshold => activate(scores, THRESHOLD),
            PredictionMode::TopK { k } => topk_activate(scores, k, THRESHOLD),
        }
    }
}

/// `{i : scores[i] > threshold}`.
pub fn activate(scores: &[f64], threshold: f64) -> LabelSet {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(i, _)| ClassId(i))
        .collect()
}

/// Threshold activation restricted to the `k` highest scores. Equal scores
/// are ranked by class index, lower first.
pub fn topk_activate(scores: &[f64], k: usize, threshold: f64) -> LabelSet {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .filter(|&i| scores[i] > threshold)
        .map(ClassId)
        .collect()
}

pub fn jaccard(truth: &LabelSet, predicted: &LabelSet) -> f64 {
    let inter = truth.intersection(predicted).count();
    let union = truth.union(predicted).count();
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// `(|Y∩Ŷ|/|Y∪Ŷ|)·(|Y∩Ŷ|/|Ŷ|)`; an empty prediction scores 0.
pub fn pw_js_sample(truth: &LabelSet, predicted: &LabelSet) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyTruth);
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let inter = truth.intersection(predicted).count() as f64;
    let union = truth.union(predicted).count() as f64;
    Ok((inter / union) * (inter / predicted.len() as f64))
}

/// One evaluated test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample: usize,
    pub labels: LabelSet,
    pub scores: Vec<f64>,
}

/// Activation counts keyed by (true leaf, predicted class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<ClassId>,
    pub cols: Vec<ClassId>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(rows: Vec<ClassId>, cols: Vec<ClassId>) -> Self {
        let counts = vec![vec![0; cols.len()]; rows.len()];
        Self { rows, cols, counts }
    }

    fn record(&mut self, leaf: ClassId, predicted: &LabelSet) {
        let Some(r) = self.rows.iter().position(|&c| c == leaf) else {
            return;
        };
        for p in predicted {
            if let Some(c) = self.cols.iter().position(|x| x == p) {
                self.counts[r][c] += 1;
            }
        }
    }

    pub fn get(&self, leaf: ClassId, predicted: ClassId) -> u64 {
        let r = self.rows.iter().position(|&c| c == leaf);
        let c = self.cols.iter().position(|&c| c == predicted);
        match (r, c) {
            (Some(r), Some(c)) => self.counts[r][c],
            _ => 0,
        }
    }

    /// Header row and first column hold class names.
    pub fn write_csv<W: Write>(&self, h: &Hierarchy, out: W) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Csv {
            row: 0,
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true_class".to_string()];
        header.extend(self.cols.iter().map(|&c| h.name(c).to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (r, row) in self.rows.iter().zip(&self.counts) {
            let mut rec = vec![h.name(*r).to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| csv_err(e.into()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub step: usize,
    /// Mean pw-JS over every test sample with a non-empty truth set.
    pub pw_js: f64,
    /// Same metric per group, a sample belonging to the step that introduced
    /// its finest seen label. `None` when a group is empty.
    pub pw_js_by_step: Vec<Option<f64>>,
    /// pw-JS with both sets restricted to superclasses, over samples whose
    /// truth contains a seen superclass.
    pub superclass_pw_js: Option<f64>,
    /// Fraction of those samples with at least one superclass activated.
    pub superclass_activation_rate: Option<f64>,
    pub mean_predictions: f64,
    pub samples: usize,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Prediction for one input, limited to `seen` classes.
pub fn predict<S: Scorer + ?Sized>(
    scorer: &S,
    features: &[f64],
    seen: &LabelSet,
    mode: PredictionMode,
) -> Result<(LabelSet, Vec<f64>)> {
    if features.len() != scorer.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: scorer.input_dim(),
            actual: features.len(),
        });
    }
    let mut scores = scorer.scores(features);
    // unseen outputs can never fire
    for (i, s) in scores.iter_mut().enumerate() {
        if !seen.contains(&ClassId(i)) {
            *s = 0.0;
        }
    }
    Ok((mode.apply(&scores), scores))
}

/// Scores every test sample of `samples` after `step` of `schedule`.
///
/// Samples whose truth set is empty (their leaf and its parent are both
/// still unseen) are skipped.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    samples: &[Sample],
    h: &Hierarchy,
    schedule: &TaskSchedule,
    step: usize,
    mode: PredictionMode,
) -> Result<MetricReport> {
    mode.validate()?;
    if step >= schedule.num_steps() {
        return Err(Error::InvalidSchedule(format!(
            "step {step} is past the end of the schedule"
        )));
    }
    let seen = schedule.seen_through(step);
    if let Some(max) = seen.iter().next_back() {
        if max.0 >= scorer.num_outputs() {
            return Err(Error::DimensionMismatch {
                expected: max.0 + 1,
                actual: scorer.num_outputs(),
            });
        }
    }
    let supers: LabelSet = h.superclasses().intersection(&seen).copied().collect();
    let mut confusion = ConfusionMatrix::new(h.leaves(), seen.iter().copied().collect());

    let mut total = 0.0;
    let mut count = 0usize;
    let mut group_sum = vec![0.0; step + 1];
    let mut group_count = vec![0usize; step + 1];
    let mut super_sum = 0.0;
    let mut super_count = 0usize;
    let mut super_active = 0usize;
    let mut predictions = 0usize;

    for s in samples.iter().filter(|s| s.split == crate::datagen::Split::Test) {
        let truth = h.eval_truth(s.leaf, &seen);
        if truth.is_empty() {
            continue;
        }
        let (pred, _) = predict(scorer, &s.features, &seen, mode)?;
        let v = pw_js_sample(&truth, &pred)?;
        total += v;
        count += 1;
        predictions += pred.len();

        let group = truth
            .iter()
            .filter_map(|&c| schedule.step_of(c))
            .max()
            .expect("truth labels are scheduled");
        group_sum[group] += v;
        group_count[group] += 1;

        let super_truth: LabelSet = truth.intersection(&supers).copied().collect();
        if !super_truth.is_empty() {
            let super_pred: LabelSet = pred.intersection(&supers).copied().collect();
            super_sum += pw_js_sample(&super_truth, &super_pred)?;
            super_count += 1;
            if !super_pred.is_empty() {
                super_active += 1;
            }
        }
        confusion.record(s.leaf, &pred);
    }
    if count == 0 {
        return Err(Error::EmptyTruth);
    }
    let ratio = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
    Ok(MetricReport {
        step,
        pw_js: total / count as f64,
        pw_js_by_step: group_sum
            .iter()
            .zip(&group_count)
            .map(|(&s, &n)| ratio(s, n))
            .collect(),
        superclass_pw_js: ratio(super_sum, super_count),
        superclass_activation_rate: ratio(super_active as f64, super_count),
        mean_predictions: predictions as f64 / count as f64,
        samples: count,
        confusion,
    })
}
