//! Reference implementations shared by the oracle, invariant and
//! acceptance suites. Each check returns a summary or a description of the
//! first counterexample instead of panicking, so callers decide how to
//! report it.

#![allow(dead_code)]

use std::collections::BTreeSet;

use iirc_core::datagen::{Sample, Split, TrainItem};
use iirc_core::evaluation::{activate, evaluate, pw_js_sample, topk_activate, PredictionMode, THRESHOLD};
use iirc_core::hierarchy::{
    build_schedule, validate_hierarchy, Budgets, ClassId, Hierarchy, LabelSet, Node, StepLayout,
};
use iirc_core::losses::{baseline_kd_loss, bce, mtkd_loss, one_hot, sigmoid_kd, softmax_ce, softmax_kd, LossWeights, MtkdLayout};
use iirc_core::net::{Gradients, Net, Scorer};
use iirc_core::rehearsal::{ExemplarStore, Selection};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- gradients

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCe,
    SoftmaxKd,
    Bce,
    SigmoidKd,
    BaselineKd,
    Mtkd,
}

pub const ALL_LOSSES: [LossKind; 6] = [
    LossKind::SoftmaxCe,
    LossKind::SoftmaxKd,
    LossKind::Bce,
    LossKind::SigmoidKd,
    LossKind::BaselineKd,
    LossKind::Mtkd,
];

/// Per-sample inputs of a loss besides the student logits.
#[derive(Debug, Clone)]
struct Extra {
    target: usize,
    targets: Vec<f64>,
    teacher: Vec<f64>,
    superclass: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Case {
    net: Net,
    xs: Vec<Vec<f64>>,
    extras: Vec<Extra>,
    layout: MtkdLayout,
    weights: LossWeights,
}

fn sample_loss(kind: LossKind, case: &Case, logits: &[f64], e: &Extra) -> (f64, Vec<f64>) {
    let lg = match kind {
        LossKind::SoftmaxCe => softmax_ce(logits, e.target),
        LossKind::SoftmaxKd => softmax_kd(logits, &e.teacher, case.weights.temperature).unwrap(),
        LossKind::Bce => bce(logits, &e.targets),
        LossKind::SigmoidKd => sigmoid_kd(logits, &e.teacher).unwrap(),
        LossKind::BaselineKd => baseline_kd_loss(logits, &e.targets, &e.teacher, case.weights.lambda).unwrap(),
        LossKind::Mtkd => mtkd_loss(logits, &e.targets, &e.teacher, &e.superclass, case.layout, &case.weights).unwrap(),
    };
    (lg.loss, lg.grad)
}

fn batch_loss(kind: LossKind, case: &Case, net: &Net) -> f64 {
    let b = case.xs.len() as f64;
    case.xs
        .iter()
        .zip(&case.extras)
        .map(|(x, e)| sample_loss(kind, case, &net.logits(x), e).0)
        .sum::<f64>()
        / b
}

fn batch_grad(kind: LossKind, case: &Case) -> Vec<f64> {
    let mut g = Gradients::zeros_like(&case.net);
    let b = case.xs.len() as f64;
    for (x, e) in case.xs.iter().zip(&case.extras) {
        let cache = case.net.forward(x).unwrap();
        let (_, d) = sample_loss(kind, case, cache.logits(), e);
        let d: Vec<f64> = d.iter().map(|v| v / b).collect();
        case.net.backward_accumulate(&cache, &d, &mut g);
    }
    g.flat().collect()
}

/// Smallest |pre-activation| over every hidden unit and input, recomputed
/// from the raw weights.
fn min_hidden_margin(net: &Net, xs: &[Vec<f64>]) -> f64 {
    let layers = net.layers();
    let mut margin = f64::INFINITY;
    for x in xs {
        let mut a = x.clone();
        for l in &layers[..layers.len() - 1] {
            let z: Vec<f64> = (0..l.out_dim)
                .map(|o| l.bias[o] + (0..l.in_dim).map(|i| l.weights[o * l.in_dim + i] * a[i]).sum::<f64>())
                .collect();
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.02..0.98)).collect()
}

fn random_case(kind: LossKind, rng: &mut ChaCha8Rng) -> Case {
    loop {
        let input = rng.random_range(2..=5);
        let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect();
        let classes = rng.random_range(2..=6);
        let mut net = Net::new(input, &hidden, classes, rng);
        for p in net.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        let batch = rng.random_range(1..=4);
        let xs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..input).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        if min_hidden_margin(&net, &xs) < 1e-3 {
            continue;
        }
        let initial = rng.random_range(1..=classes);
        let previous = rng.random_range(initial..=classes);
        let layout = MtkdLayout { initial, previous };
        let weights = LossWeights {
            lambda: rng.random_range(0.0..1.0),
            mu: rng.random_range(0.0..1.0),
            temperature: rng.random_range(0.5..4.0),
        };
        let extras = (0..batch)
            .map(|_| {
                let target = rng.random_range(0..classes);
                let targets = match kind {
                    LossKind::Bce => random_probs(rng, classes),
                    _ => one_hot(classes, target),
                };
                let teacher = match kind {
                    LossKind::SoftmaxKd => (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    LossKind::SigmoidKd => random_probs(rng, classes),
                    LossKind::BaselineKd | LossKind::Mtkd => random_probs(rng, previous),
                    _ => Vec::new(),
                };
                Extra {
                    target,
                    targets,
                    teacher,
                    superclass: random_probs(rng, initial),
                }
            })
            .collect();
        return Case { net, xs, extras, layout, weights };
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub cases: usize,
    pub params_checked: usize,
    pub max_rel_err: f64,
}

/// `|a - b| / max(|a|, |b|)`; the tiny floor only guards `0 / 0`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Central finite differences of the batch-mean loss against backprop, over
/// `cases` random networks and batches.
pub fn gradient_check(kind: LossKind, cases: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..cases {
        let case = random_case(kind, &mut rng);
        let analytic = batch_grad(kind, &case);
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = case.net.clone();
            *plus.params_mut().nth(i).unwrap() += h;
            let mut minus = case.net.clone();
            *minus.params_mut().nth(i).unwrap() -= h;
            let numeric = (batch_loss(kind, &case, &plus) - batch_loss(kind, &case, &minus)) / (2.0 * h);
            worst = worst.max(rel_err(*a, numeric));
            checked += 1;
        }
    }
    GradReport {
        cases,
        params_checked: checked,
        max_rel_err: worst,
    }
}

// ------------------------------------------------------------------ metrics

pub fn bits_to_set(bits: u32) -> LabelSet {
    (0..32).filter(|i| bits >> i & 1 == 1).map(|i| ClassId(i as usize)).collect()
}

/// pw-JS computed on bitmasks.
pub fn pw_js_bits(truth: u32, pred: u32) -> f64 {
    if pred == 0 {
        return 0.0;
    }
    let inter = (truth & pred).count_ones() as f64;
    let union = (truth | pred).count_ones() as f64;
    (inter / union) * (inter / pred.count_ones() as f64)
}

/// Every pair (Y, Ŷ) over four classes with Y non-empty.
pub fn check_pw_js_exhaustive() -> Result<usize, String> {
    let mut n = 0;
    for y in 1u32..16 {
        for p in 0u32..16 {
            let got = pw_js_sample(&bits_to_set(y), &bits_to_set(p)).map_err(|e| e.to_string())?;
            let want = pw_js_bits(y, p);
            if got.to_bits() != want.to_bits() {
                return Err(format!("Y={y:04b} Ŷ={p:04b}: {got} != {want}"));
            }
            n += 1;
        }
    }
    if pw_js_sample(&LabelSet::new(), &bits_to_set(1)).is_ok() {
        return Err("empty truth accepted".into());
    }
    Ok(n)
}

/// Scores looked up by the sample index stored in the first feature.
struct Table(Vec<Vec<f64>>, usize);

impl Scorer for Table {
    fn input_dim(&self) -> usize {
        1
    }
    fn num_outputs(&self) -> usize {
        self.1
    }
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.scores(x).iter().map(|p| (p / (1.0 - p)).ln()).collect()
    }
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.0[x[0] as usize].clone()
    }
}

/// Every valid two-level forest over four named nodes.
pub fn all_forests_of_four() -> Vec<Hierarchy> {
    let mut out = Vec::new();
    // parent choice per node: 0 = none, j + 1 = node j
    for code in 0..5u32.pow(4) {
        let mut c = code;
        let parents: Vec<Option<usize>> = (0..4)
            .map(|_| {
                let p = (c % 5) as usize;
                c /= 5;
                p.checked_sub(1)
            })
            .collect();
        let nodes = parents
            .iter()
            .enumerate()
            .map(|(i, p)| Node {
                id: ClassId(i),
                name: format!("c{i}"),
                parent: p.map(ClassId),
            })
            .collect();
        let h = Hierarchy::from_nodes(nodes);
        if validate_hierarchy(&h).is_empty() {
            out.push(h);
        }
    }
    out
}

fn score_row(mask: u32, classes: usize) -> Vec<f64> {
    // distinct scores so Top-k is unambiguous
    (0..classes)
        .map(|i| {
            if mask >> i & 1 == 1 {
                0.9 - 0.05 * i as f64
            } else {
                0.1 + 0.05 * i as f64
            }
        })
        .collect()
}

fn oracle_topk(row: &[f64], seen: u32, k: usize) -> u32 {
    let mut idx: Vec<usize> = (0..row.len()).filter(|i| seen >> i & 1 == 1).collect();
    // selection sort, highest first, lower index on ties
    let mut picked = 0u32;
    for _ in 0..k.min(idx.len()) {
        let mut best = 0;
        for j in 1..idx.len() {
            if row[idx[j]] > row[idx[best]] {
                best = j;
            }
        }
        let i = idx.remove(best);
        if row[i] > 0.5 {
            picked |= 1 << i;
        }
    }
    picked
}

/// `evaluate` against bitmask arithmetic on every forest of four classes,
/// at every step of a parent-first schedule, with one test sample for
/// every (leaf, prediction mask) pair. Returns the number of evaluations.
pub fn check_evaluate_exhaustive() -> Result<usize, String> {
    let mut evaluations = 0;
    for forest in all_forests_of_four() {
        let supers = forest.superclasses().len();
        let mut sizes = vec![supers.max(1)];
        sizes.extend(std::iter::repeat_n(1, 4 - sizes[0]));
        let mut rng = ChaCha8Rng::seed_from_u64(evaluations as u64);
        let b = build_schedule(&forest, &StepLayout { sizes }, &Budgets::default(), &mut rng)
            .map_err(|e| e.to_string())?;
        let (h, sched) = (&b.hierarchy, &b.schedule);
        let leaves = h.leaves();
        let mut samples = Vec::new();
        let mut rows = Vec::new();
        let mut keys = Vec::new();
        for &leaf in &leaves {
            for mask in 0u32..16 {
                samples.push(Sample {
                    features: vec![rows.len() as f64],
                    leaf,
                    split: Split::Test,
                });
                rows.push(score_row(mask, 4));
                keys.push((leaf, mask));
            }
        }
        let scorer = Table(rows.clone(), 4);
        let super_bits: u32 = h.superclasses().iter().map(|c| 1u32 << c.0).sum();
        for t in 0..sched.num_steps() {
            let seen: u32 = (0..sched.classes_through(t)).map(|i| 1u32 << i).sum();
            let step_of = |c: usize| sched.step_of(ClassId(c)).unwrap();
            for mode in [PredictionMode::Threshold, PredictionMode::TopK { k: 2 }] {
                let report = evaluate(&scorer, &samples, h, sched, t, mode).map_err(|e| e.to_string())?;
                let (mut sum, mut count, mut npred) = (0.0, 0usize, 0usize);
                let (mut ssum, mut scount, mut sactive) = (0.0, 0usize, 0usize);
                let mut gsum = vec![0.0; t + 1];
                let mut gcount = vec![0usize; t + 1];
                let mut confusion = [[0u64; 4]; 4];
                for (row, &(leaf, mask)) in rows.iter().zip(&keys) {
                    let mut truth = 1u32 << leaf.0;
                    if let Some(p) = h.parent(leaf) {
                        truth |= 1 << p.0;
                    }
                    truth &= seen;
                    if truth == 0 {
                        continue;
                    }
                    let pred = match mode {
                        PredictionMode::Threshold => mask & seen,
                        PredictionMode::TopK { k } => oracle_topk(row, seen, k),
                    };
                    let v = pw_js_bits(truth, pred);
                    sum += v;
                    count += 1;
                    npred += pred.count_ones() as usize;
                    let g = (0..4).filter(|i| truth >> i & 1 == 1).map(step_of).max().unwrap();
                    gsum[g] += v;
                    gcount[g] += 1;
                    if truth & super_bits != 0 {
                        ssum += pw_js_bits(truth & super_bits, pred & super_bits);
                        scount += 1;
                        if pred & super_bits != 0 {
                            sactive += 1;
                        }
                    }
                    for i in 0..4 {
                        if pred >> i & 1 == 1 {
                            confusion[leaf.0][i] += 1;
                        }
                    }
                }
                let ctx = format!("forest {:?}, step {t}, {mode:?}", h.nodes());
                let eq = |name: &str, a: f64, b: f64| {
                    if a.to_bits() == b.to_bits() {
                        Ok(())
                    } else {
                        Err(format!("{ctx}: {name} {a} != {b}"))
                    }
                };
                let opt = |n: f64, d: usize| (d > 0).then(|| n / d as f64);
                eq("pw_js", report.pw_js, sum / count as f64)?;
                eq("mean_predictions", report.mean_predictions, npred as f64 / count as f64)?;
                if report.samples != count {
                    return Err(format!("{ctx}: sample count"));
                }
                if report.superclass_pw_js.map(f64::to_bits) != opt(ssum, scount).map(f64::to_bits)
                    || report.superclass_activation_rate != opt(sactive as f64, scount)
                {
                    return Err(format!("{ctx}: superclass metrics"));
                }
                for g in 0..=t {
                    if report.pw_js_by_step[g].map(f64::to_bits) != opt(gsum[g], gcount[g]).map(f64::to_bits) {
                        return Err(format!("{ctx}: group {g}"));
                    }
                }
                for &leaf in &leaves {
                    for c in 0..sched.classes_through(t) {
                        if report.confusion.get(leaf, ClassId(c)) != confusion[leaf.0][c] {
                            return Err(format!("{ctx}: confusion ({leaf}, {c})"));
                        }
                    }
                }
                evaluations += 1;
            }
        }
    }
    Ok(evaluations)
}

// --------------------------------------------------------------- invariants

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn outcome(r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

/// Random two-level taxonomy: (children per superclass, orphan count).
fn taxonomy() -> impl Strategy<Value = (Vec<usize>, usize)> {
    (prop::collection::vec(1usize..=3, 0..=4), 0usize..=3)
        .prop_filter("at least one class", |(s, o)| !s.is_empty() || *o > 0)
}

fn taxonomy_hierarchy(children: &[usize], orphans: usize) -> Hierarchy {
    let mut edges: Vec<(String, Option<String>)> = Vec::new();
    for (s, &n) in children.iter().enumerate() {
        edges.push((format!("s{s}"), None));
        for c in 0..n {
            edges.push((format!("s{s}c{c}"), Some(format!("s{s}"))));
        }
    }
    for o in 0..orphans {
        edges.push((format!("o{o}"), None));
    }
    let refs: Vec<(&str, Option<&str>)> = edges.iter().map(|(a, b)| (a.as_str(), b.as_deref())).collect();
    Hierarchy::from_edges(&refs)
}

/// Schedules built for random taxonomies always introduce a parent in a
/// strictly earlier step than its children, place every class once and
/// give superclasses the larger budget.
pub fn prop_schedule_parent_first(cases: u32) -> Result<(), String> {
    let strat = (taxonomy(), any::<u64>(), prop::collection::vec(1usize..=3, 32));
    outcome(runner(cases).run(&strat, |((children, orphans), seed, cuts)| {
        let h = taxonomy_hierarchy(&children, orphans);
        let total = h.len();
        // superclasses fill step 0 (or one class if there are none), the
        // rest is cut into random step sizes
        let first = children.len().max(1);
        let mut sizes = vec![first];
        let mut left = total - first;
        for c in cuts {
            if left == 0 {
                break;
            }
            let s = c.min(left);
            sizes.push(s);
            left -= s;
        }
        let budgets = Budgets { superclass: 9, subclass: 3, orphan: 3 };
        let b = build_schedule(&h, &StepLayout { sizes }, &budgets, &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let (h, s) = (&b.hierarchy, &b.schedule);
        let mut placed = BTreeSet::new();
        for (t, step) in s.steps().iter().enumerate() {
            for sc in step {
                prop_assert!(placed.insert(sc.class), "class placed twice");
                if let Some(p) = h.parent(sc.class) {
                    prop_assert!(s.step_of(p).unwrap() < t, "parent not strictly earlier");
                }
                let want = if h.is_superclass(sc.class) { 9 } else { 3 };
                prop_assert_eq!(sc.budget, want);
            }
        }
        prop_assert_eq!(placed.len(), h.len());
        prop_assert!(s.violations(h).is_empty());
        Ok(())
    }))
}

/// Exemplars keep the label they were stored under, no matter what is
/// ingested afterwards.
pub fn prop_exemplar_frozen_label(cases: u32) -> Result<(), String> {
    let strat = (
        1usize..=4,
        prop::collection::vec((0usize..6, 0usize..12, 1usize..8, any::<bool>()), 1..8),
        any::<u64>(),
    );
    outcome(runner(cases).run(&strat, |(budget, ingests, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Net::new(3, &[4], 2, &mut rng);
        let mut store = ExemplarStore::new(budget);
        let mut frozen: Vec<(ClassId, Vec<iirc_core::rehearsal::Exemplar>)> = Vec::new();
        for (class, leaf, n, herd) in ingests {
            let class = ClassId(class);
            let pool: Vec<TrainItem> = (0..n)
                .map(|_| TrainItem {
                    features: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    label: class,
                    leaf: ClassId(leaf),
                })
                .collect();
            let sel = if herd { Selection::Herding } else { Selection::Random };
            store.ingest(&[class], &pool, sel, false, &net, &mut rng).unwrap();
            for (c, ex) in &frozen {
                prop_assert_eq!(store.exemplars(*c), ex.as_slice());
            }
            let ex = store.exemplars(class);
            prop_assert!(ex.len() <= budget);
            prop_assert!(ex.iter().all(|e| e.label == class));
            if !frozen.iter().any(|(c, _)| *c == class) {
                frozen.push((class, ex.to_vec()));
            }
        }
        for item in store.rehearsal_pool() {
            let (_, ex) = frozen.iter().find(|(c, _)| *c == item.label).unwrap();
            prop_assert!(ex.iter().any(|e| e.features == item.features));
        }
        Ok(())
    }))
}

fn net_strategy() -> impl Strategy<Value = (usize, Vec<usize>, usize, u64)> {
    (1usize..=5, prop::collection::vec(1usize..=6, 1..=2), 1usize..=5, any::<u64>())
}

/// Widening the output layer leaves every existing logit bit-identical.
pub fn prop_expand_preserves_logits(cases: u32) -> Result<(), String> {
    let strat = (net_strategy(), 0usize..=4, prop::collection::vec(-3.0f64..3.0, 5));
    outcome(runner(cases).run(&strat, |((input, hidden, out, seed), m, x)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Net::new(input, &hidden, out, &mut rng);
        let x = &x[..input];
        let before = net.logits(x);
        let feats = net.features(x).unwrap();
        net.expand_outputs(m, &mut rng);
        let after = net.logits(x);
        prop_assert_eq!(after.len(), out + m);
        for (a, b) in before.iter().zip(&after) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(net.features(x).unwrap(), feats);
        Ok(())
    }))
}

/// Training the live network never changes a snapshot taken earlier.
pub fn prop_snapshot_immutable(cases: u32) -> Result<(), String> {
    let strat = (net_strategy(), prop::collection::vec(-3.0f64..3.0, 5), 1usize..=4);
    outcome(runner(cases).run(&strat, |((input, hidden, out, seed), x, updates)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Net::new(input, &hidden, out, &mut rng);
        let x = &x[..input];
        let snap = net.snapshot(0);
        let frozen = snap.clone();
        let expected = snap.logits(x);
        for _ in 0..updates {
            let cache = net.forward(x).unwrap();
            let d: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = net.backward(&cache, &d);
            net.sgd_step(&g, 0.5).unwrap();
        }
        net.expand_outputs(1, &mut rng);
        prop_assert_eq!(&snap, &frozen);
        let now = snap.logits(x);
        for (a, b) in expected.iter().zip(&now) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(snap.num_outputs(), out);
        Ok(())
    }))
}

/// Top-k activation is a subset of threshold activation with at most k
/// labels, and equals it once k covers every class.
pub fn prop_topk_subset(cases: u32) -> Result<(), String> {
    // a coarse grid makes ties and exact 0.5 scores common
    let score = prop_oneof![0.0f64..1.0, (0u32..=10).prop_map(|v| v as f64 / 10.0)];
    let strat = (prop::collection::vec(score, 0..12), 1usize..14);
    outcome(runner(cases).run(&strat, |(scores, k)| {
        let all = activate(&scores, THRESHOLD);
        let top = topk_activate(&scores, k, THRESHOLD);
        prop_assert!(top.is_subset(&all));
        prop_assert!(top.len() <= k);
        if k >= scores.len() {
            prop_assert_eq!(&top, &all);
        }
        // nothing left out scores above anything kept
        if let Some(min_kept) = top.iter().map(|c| scores[c.0]).reduce(f64::min) {
            let dropped_above = all.difference(&top).filter(|c| scores[c.0] > min_kept).count();
            prop_assert_eq!(dropped_above, 0);
        }
        Ok(())
    }))
}
