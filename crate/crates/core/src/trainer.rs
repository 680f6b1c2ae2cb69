//! The incremental training loop.
//!
//! Step 0 trains a fresh network with BCE alone. Every later step widens the
//! output layer, snapshots the previous model as the general teacher and
//! trains on the new data plus the exemplar memory with the method's loss.
//! The model frozen after step 0 serves as the superclass teacher for the
//! rest of the run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, TrainItem};
use crate::error::{io_err, Error, Result};
use crate::evaluation::{evaluate, MetricReport, PredictionMode};
use crate::hierarchy::Benchmark;
use crate::losses::{baseline_kd_loss, bce, mtkd_loss, one_hot, LossGrad, LossWeights, MtkdLayout};
use crate::net::{Gradients, Net, Scorer, Snapshot};
use crate::rehearsal::{ExemplarStore, Selection};
use crate::seed::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Finetune,
    BaselineKd,
    Mtkd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::BaselineKd => "baseline-kd",
            Method::Mtkd => "mtkd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Method::Finetune),
            "baseline-kd" => Ok(Method::BaselineKd),
            "mtkd" => Ok(Method::Mtkd),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without improvement before the learning rate is cut.
    pub patience: usize,
    pub decay: f64,
    pub weights: LossWeights,
    pub selection: Selection,
    /// Exemplars kept per class.
    pub buffer: usize,
    /// L2-normalize features before herding.
    pub normalize_features: bool,
    pub prediction: PredictionMode,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Mtkd,
            epochs: 100,
            batch_size: 32,
            lr: 0.1,
            patience: 10,
            decay: 0.1,
            weights: LossWeights::default(),
            selection: Selection::Herding,
            buffer: 20,
            normalize_features: false,
            prediction: PredictionMode::Threshold,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Display name of the method together with its prediction rule, for
    /// example `k-mtkd` for mtkd with Top-k prediction.
    pub fn label(&self) -> String {
        match self.prediction {
            PredictionMode::Threshold => self.method.to_string(),
            PredictionMode::TopK { .. } => format!("k-{}", self.method),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and > 0");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0, 1)");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty with positive widths");
        }
        self.weights.validate()?;
        self.prediction.validate()
    }
}

/// Cuts the learning rate when the epoch-mean loss stops improving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    lr: f64,
    decay: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    /// Minimum decrease that counts as an improvement.
    pub const MIN_DELTA: f64 = 1e-4;

    pub fn new(lr: f64, patience: usize, decay: f64) -> Self {
        Self {
            lr,
            decay,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's mean loss and returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - Self::MIN_DELTA {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.decay;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Frozen models available to the loss at one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct Teachers<'a> {
    pub general: Option<&'a Snapshot>,
    pub superclass: Option<&'a Snapshot>,
}

/// Per-sample objective of `method` given the available teachers.
pub fn sample_loss(
    method: Method,
    weights: &LossWeights,
    teachers: Teachers<'_>,
    logits: &[f64],
    targets: &[f64],
    x: &[f64],
) -> Result<LossGrad> {
    match (method, teachers.general, teachers.superclass) {
        (Method::BaselineKd, Some(g), _) => baseline_kd_loss(logits, targets, &g.scores(x), weights.lambda),
        (Method::Mtkd, Some(g), Some(s)) => {
            let layout = MtkdLayout {
                initial: s.num_outputs(),
                previous: g.num_outputs(),
            };
            mtkd_loss(logits, targets, &g.scores(x), &s.scores(x), layout, weights)
        }
        _ => Ok(bce(logits, targets)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_lr: f64,
}

/// Mini-batch SGD over `pool` for `cfg.epochs` epochs. Each batch's gradient
/// is the mean of its per-sample gradients.
pub fn train_epochs<R: Rng + ?Sized>(
    net: &mut Net,
    pool: &[TrainItem],
    teachers: Teachers<'_>,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<EpochSummary> {
    if pool.is_empty() {
        return Err(Error::InvalidConfig(format!("step {step} has an empty training pool")));
    }
    let classes = net.output_dim();
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.patience, cfg.decay);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut grads = Gradients::zeros_like(net);
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.scale(0.0);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let item = &pool[i];
                if item.label.0 >= classes {
                    return Err(Error::UnknownClass(item.label));
                }
                let cache = net.forward(&item.features)?;
                let targets = one_hot(classes, item.label.0);
                let mut lg = sample_loss(cfg.method, &cfg.weights, teachers, cache.logits(), &targets, &item.features)?;
                if !lg.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step, epoch });
                }
                epoch_loss += lg.loss;
                lg.grad.iter_mut().for_each(|g| *g *= inv);
                net.backward_accumulate(&cache, &lg.grad, &mut grads);
            }
            net.sgd_step(&grads, sched.lr()).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::NonFiniteLoss { step, epoch },
                other => other,
            })?;
        }
        last = epoch_loss / pool.len() as f64;
        if !last.is_finite() {
            return Err(Error::NonFiniteLoss { step, epoch });
        }
        sched.observe(last);
    }
    Ok(EpochSummary {
        epochs: cfg.epochs,
        final_loss: last,
        final_lr: sched.lr(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub classes_seen: usize,
    pub pool_size: usize,
    pub training: EpochSummary,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub seed: u64,
    /// False until every scheduled step has been logged.
    pub complete: bool,
    pub steps: Vec<StepLog>,
}

impl RunLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// A run in progress. Serializes in full, so a checkpoint written at a step
/// boundary resumes into exactly the run that would have continued.
///
/// Randomness is drawn from per-step substreams, so no generator state
/// needs to be stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalRun {
    benchmark: Benchmark,
    dataset: Dataset,
    config: TrainConfig,
    next_step: usize,
    net: Option<Net>,
    superclass_teacher: Option<Snapshot>,
    general_teacher: Option<Snapshot>,
    store: ExemplarStore,
    log: RunLog,
}

impl IncrementalRun {
    pub fn new(benchmark: Benchmark, dataset: Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let problems = benchmark.schedule.violations(&benchmark.hierarchy);
        if !problems.is_empty() {
            return Err(Error::InvalidSchedule(problems.join("; ")));
        }
        let log = RunLog {
            config: config.clone(),
            seed: config.seed,
            complete: false,
            steps: Vec::new(),
        };
        Ok(Self {
            store: ExemplarStore::new(config.buffer),
            benchmark,
            dataset,
            config,
            next_step: 0,
            net: None,
            superclass_teacher: None,
            general_teacher: None,
            log,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn benchmark(&self) -> &Benchmark {
        &self.benchmark
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn net(&self) -> Option<&Net> {
        self.net.as_ref()
    }

    pub fn store(&self) -> &ExemplarStore {
        &self.store
    }

    pub fn superclass_teacher(&self) -> Option<&Snapshot> {
        self.superclass_teacher.as_ref()
    }

    pub fn general_teacher(&self) -> Option<&Snapshot> {
        self.general_teacher.as_ref()
    }

    pub fn next_step(&self) -> usize {
        self.next_step
    }

    pub fn is_finished(&self) -> bool {
        self.next_step >= self.benchmark.schedule.num_steps()
    }

    /// Trains, stores exemplars for and evaluates the next step.
    pub fn advance(&mut self) -> Result<&StepLog> {
        if self.is_finished() {
            return Err(Error::InvalidSchedule("run already finished".into()));
        }
        let t = self.next_step;
        let seeds = SeedTree::new(self.config.seed);
        let schedule = &self.benchmark.schedule;
        let h = &self.benchmark.hierarchy;
        let new_classes = schedule.step(t).len();

        // work on a copy so a failed step leaves the run as it was
        let mut net = match &self.net {
            None => Net::new(
                self.dataset.dim,
                &self.config.hidden,
                new_classes,
                &mut seeds.stream("init", t as u64),
            ),
            Some(prev) => {
                let mut net = prev.clone();
                net.expand_outputs(new_classes, &mut seeds.stream("init", t as u64));
                net
            }
        };

        let mut pool = self.dataset.split_for_step(h, schedule, t)?;
        let fresh = pool.len();
        pool.extend(self.store.rehearsal_pool());
        let teachers = Teachers {
            general: self.general_teacher.as_ref(),
            superclass: self.superclass_teacher.as_ref(),
        };
        let training = train_epochs(
            &mut net,
            &pool,
            teachers,
            &self.config,
            t,
            &mut seeds.stream("shuffle", t as u64),
        )?;

        let metrics = evaluate(&net, &self.dataset.samples, h, schedule, t, self.config.prediction)?;

        let step_classes: Vec<_> = schedule.step_classes(t).collect();
        self.store.ingest(
            &step_classes,
            &pool[..fresh],
            self.config.selection,
            self.config.normalize_features,
            &net,
            &mut seeds.stream("selection", t as u64),
        )?;

        if t + 1 < schedule.num_steps() {
            if t == 0 {
                self.superclass_teacher = Some(net.snapshot(0));
            }
            self.general_teacher = Some(net.snapshot(t));
        }
        self.log.steps.push(StepLog {
            step: t,
            classes_seen: schedule.classes_through(t),
            pool_size: pool.len(),
            training,
            metrics,
        });
        self.net = Some(net);
        self.next_step += 1;
        self.log.complete = self.is_finished();
        Ok(self.log.steps.last().unwrap())
    }

    /// Runs every remaining step.
    pub fn finish(mut self) -> Result<RunLog> {
        while !self.is_finished() {
            self.advance()?;
        }
        Ok(self.log)
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }

    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(io_err(path))
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let run: Self = serde_json::from_str(&text)?;
        run.config.validate()?;
        Ok(run)
    }
}

/// Runs the whole schedule.
pub fn run_incremental(benchmark: &Benchmark, dataset: &Dataset, cfg: &TrainConfig) -> Result<RunLog> {
    IncrementalRun::new(benchmark.clone(), dataset.clone(), cfg.clone())?.finish()
}
