//! Class-incremental learning over a two-level label taxonomy, with
//! multi-teacher distillation, exemplar rehearsal and precision-weighted
//! Jaccard evaluation.
//!
//! The pieces compose as follows: [`hierarchy`] defines the taxonomy and the
//! step schedule, [`datagen`] draws a synthetic dataset for it, and
//! [`trainer`] runs the incremental loop using [`net`], [`losses`] and
//! [`rehearsal`], scoring every step with [`evaluation`].

pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod hierarchy;
pub mod losses;
pub mod net;
pub mod rehearsal;
pub mod seed;
pub mod trainer;

pub use datagen::{generate, Dataset, GenConfig, Sample, Split, TrainItem};
pub use error::{Error, Result};
pub use evaluation::{
    activate, evaluate, pw_js_sample, topk_activate, ConfusionMatrix, MetricReport, PredictionMode,
};
pub use experiment::{build_benchmark, BenchmarkConfig};
pub use hierarchy::{
    build_schedule, default_hierarchy, default_layout, training_label, validate_hierarchy, Benchmark,
    Budgets, ClassId, Hierarchy, LabelSet, NodeKind, StepLayout, TaskSchedule,
};
pub use losses::{LossGrad, LossWeights};
pub use net::{Net, Scorer, Snapshot};
pub use rehearsal::{ExemplarStore, Selection};
pub use seed::SeedTree;
pub use trainer::{run_incremental, IncrementalRun, Method, RunLog, StepLog, TrainConfig};
