use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use iirc_core::{
    build_benchmark, default_hierarchy, generate, Benchmark, Dataset, GenConfig, Hierarchy, IncrementalRun,
    RunLog, TaskSchedule,
};

use crate::config::ExperimentConfig;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_hierarchy(path: &Path) -> Result<Hierarchy> {
    let h: Hierarchy = serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(h.validated()?)
}

fn load_schedule(path: &Path, h: &Hierarchy) -> Result<TaskSchedule> {
    let s: TaskSchedule =
        serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let problems = s.violations(h);
    if !problems.is_empty() {
        bail!("{}: {}", path.display(), problems.join("; "));
    }
    Ok(s)
}

/// Benchmark and dataset of one seed, from files where the config names
/// them and generated otherwise.
pub fn load_benchmark(cfg: &ExperimentConfig, seed: u64) -> Result<(Benchmark, Dataset)> {
    let h = match &cfg.hierarchy {
        Some(p) => load_hierarchy(p)?,
        None => default_hierarchy(),
    };
    let Some(sp) = &cfg.schedule else {
        return Ok(build_benchmark(&h, &cfg.benchmark, seed)?);
    };
    let schedule = load_schedule(sp, &h)?;
    let dataset = match &cfg.dataset {
        Some(dp) => {
            let f = fs::File::open(dp).with_context(|| format!("opening {}", dp.display()))?;
            Dataset::load_csv(&h, std::io::BufReader::new(f)).with_context(|| format!("loading {}", dp.display()))?
        }
        None => generate(&h, &schedule, &GenConfig { seed, ..cfg.benchmark.data.clone() })?,
    };
    Ok((Benchmark { hierarchy: h, schedule }, dataset))
}

pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<()> {
    cfg.benchmark.data.validate()?;
    let [seed] = cfg.seeds[..] else {
        bail!("gen takes exactly one seed, got {}", cfg.seeds.len());
    };
    let (bench, data) = load_benchmark(cfg, seed)?;
    let dir = out_dir(cfg)?;
    write(&dir.join("hierarchy.json"), serde_json::to_string_pretty(&bench.hierarchy)?)?;
    write(&dir.join("schedule.json"), serde_json::to_string_pretty(&bench.schedule)?)?;
    let mut csv = Vec::new();
    data.save_csv(&bench.hierarchy, &mut csv)?;
    write(&dir.join("dataset.csv"), csv)?;
    println!(
        "wrote {} classes in {} steps, {} samples to {}",
        bench.hierarchy.len(),
        bench.schedule.num_steps(),
        data.samples.len(),
        dir.display()
    );
    Ok(())
}

/// Condensed per-run metrics.
#[derive(Debug, Serialize)]
struct RunReport<'a> {
    method: String,
    seed: u64,
    complete: bool,
    final_pw_js: Option<f64>,
    final_superclass_pw_js: Option<f64>,
    steps: Vec<StepSummary<'a>>,
    notes: Vec<String>,
}

#[derive(Debug, Serialize)]
struct StepSummary<'a> {
    step: usize,
    classes_seen: usize,
    pw_js: f64,
    pw_js_by_step: &'a [Option<f64>],
    superclass_pw_js: Option<f64>,
    superclass_activation_rate: Option<f64>,
    mean_predictions: f64,
    final_loss: f64,
}

fn report_for(log: &RunLog) -> RunReport<'_> {
    let last = log.steps.last();
    RunReport {
        method: log.config.label(),
        seed: log.seed,
        complete: log.complete,
        final_pw_js: last.map(|s| s.metrics.pw_js),
        final_superclass_pw_js: last.and_then(|s| s.metrics.superclass_pw_js),
        steps: log
            .steps
            .iter()
            .map(|s| StepSummary {
                step: s.step,
                classes_seen: s.classes_seen,
                pw_js: s.metrics.pw_js,
                pw_js_by_step: &s.metrics.pw_js_by_step,
                superclass_pw_js: s.metrics.superclass_pw_js,
                superclass_activation_rate: s.metrics.superclass_activation_rate,
                mean_predictions: s.metrics.mean_predictions,
                final_loss: s.training.final_loss,
            })
            .collect(),
        notes: vec![
            "pw_js_by_step groups each test sample under the step that introduced its finest seen label".into(),
            format!(
                "herding features are {}",
                if log.config.normalize_features { "L2-normalized" } else { "raw penultimate activations" }
            ),
        ],
    }
}

fn write_run_outputs(dir: &Path, run: &IncrementalRun) -> Result<()> {
    let log = run.log();
    write(&dir.join("runlog.json"), log.to_json()?)?;
    write(&dir.join("report.json"), serde_json::to_string_pretty(&report_for(log))?)?;
    for s in &log.steps {
        let mut csv = Vec::new();
        s.metrics.confusion.write_csv(&run.benchmark().hierarchy, &mut csv)?;
        write(&dir.join(format!("confusion_step{}.csv", s.step)), csv)?;
    }
    Ok(())
}

/// Advances `run` to the end, checkpointing after every step. A failure
/// still leaves the partial log on disk, flagged incomplete.
fn drive(mut run: IncrementalRun, dir: &Path) -> Result<RunLog> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ckpt = dir.join("checkpoint.json");
    while !run.is_finished() {
        if let Err(e) = run.advance() {
            write_run_outputs(dir, &run)?;
            return Err(e).with_context(|| format!("run in {} aborted", dir.display()));
        }
        run.checkpoint(&ckpt)?;
    }
    write_run_outputs(dir, &run)?;
    Ok(run.into_log())
}

fn curves_csv(logs: &[RunLog]) -> String {
    let mut out = String::from("method,seed,step,pw_js,superclass_pw_js,mean_predictions\n");
    for log in logs {
        for s in &log.steps {
            let sup = s.metrics.superclass_pw_js.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                log.config.label(),
                log.seed,
                s.step,
                s.metrics.pw_js,
                sup,
                s.metrics.mean_predictions
            )
            .unwrap();
        }
    }
    out
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(String, u64)> {
    cfg.methods
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (m.clone(), s)))
        .collect()
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let logs = jobs(cfg)
        .par_iter()
        .map(|(method, seed)| {
            let (bench, data) = load_benchmark(cfg, *seed)?;
            let run = IncrementalRun::new(bench, data, cfg.train_config(method, *seed)?)?;
            drive(run, &dir.join(method).join(format!("seed-{seed}")))
        })
        .collect::<Result<Vec<_>>>()?;
    write(&dir.join("curves.csv"), curves_csv(&logs))?;
    for log in &logs {
        if let Some(last) = log.steps.last() {
            println!("{} seed {}: final pw-JS {:.4}", log.config.label(), log.seed, last.metrics.pw_js);
        }
    }
    Ok(())
}

/// Continues the run saved in `checkpoint`. Outputs go next to the
/// checkpoint unless `out` is given.
pub fn cmd_resume(checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let run = IncrementalRun::resume(checkpoint).with_context(|| format!("resuming {}", checkpoint.display()))?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let log = drive(run, &dir)?;
    write(&dir.join("curves.csv"), curves_csv(std::slice::from_ref(&log)))?;
    Ok(())
}

pub fn cmd_sweep_buffer(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.buffers.is_empty() {
        bail!("no buffer budgets requested");
    }
    let dir = out_dir(cfg)?;
    let rows: Vec<(String, usize, u64)> = cfg
        .methods
        .iter()
        .flat_map(|m| {
            cfg.buffers
                .iter()
                .flat_map(move |&b| cfg.seeds.iter().map(move |&s| (m.clone(), b, s)))
        })
        .collect();
    let finals = rows
        .par_iter()
        .map(|(method, buffer, seed)| {
            let (bench, data) = load_benchmark(cfg, *seed)?;
            let mut tc = cfg.train_config(method, *seed)?;
            tc.buffer = *buffer;
            let log = IncrementalRun::new(bench, data, tc)?.finish()?;
            Ok(log.steps.last().map(|s| s.metrics.pw_js).unwrap_or(f64::NAN))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut csv = String::from("method,buffer,seed,final_pw_js\n");
    for ((m, b, s), v) in rows.iter().zip(&finals) {
        writeln!(csv, "{m},{b},{s},{v}").unwrap();
    }
    write(&dir.join("sweep.csv"), csv)?;
    print!("{}", fs::read_to_string(dir.join("sweep.csv"))?);
    Ok(())
}

#[derive(Debug, Serialize, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(MeanStd { mean, std: var.sqrt() })
}

#[derive(Debug, Serialize)]
struct StepAggregate {
    step: usize,
    pw_js: Option<MeanStd>,
    superclass_pw_js: Option<MeanStd>,
    mean_predictions: Option<MeanStd>,
}

#[derive(Debug, Serialize)]
struct MethodAggregate {
    method: String,
    seeds: Vec<u64>,
    steps: Vec<StepAggregate>,
}

pub fn cmd_report(logs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if logs.is_empty() {
        bail!("report needs at least one runlog");
    }
    let mut groups: Vec<(String, Vec<RunLog>)> = Vec::new();
    for p in logs {
        let log = RunLog::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
        let label = log.config.label();
        match groups.iter_mut().find(|(m, _)| *m == label) {
            Some((_, g)) => g.push(log),
            None => groups.push((label, vec![log])),
        }
    }
    let mut methods = Vec::new();
    for (method, runs) in &groups {
        let steps = runs[0].steps.len();
        if let Some(bad) = runs.iter().find(|r| r.steps.len() != steps) {
            bail!(
                "{method}: seed {} has {} steps but seed {} has {steps}",
                bad.seed,
                bad.steps.len(),
                runs[0].seed
            );
        }
        let column = |t: usize, f: &dyn Fn(&iirc_core::StepLog) -> Option<f64>| {
            mean_std(&runs.iter().filter_map(|r| f(&r.steps[t])).collect::<Vec<_>>())
        };
        methods.push(MethodAggregate {
            method: method.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            steps: (0..steps)
                .map(|t| StepAggregate {
                    step: t,
                    pw_js: column(t, &|s| Some(s.metrics.pw_js)),
                    superclass_pw_js: column(t, &|s| s.metrics.superclass_pw_js),
                    mean_predictions: column(t, &|s| Some(s.metrics.mean_predictions)),
                })
                .collect(),
        });
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("aggregate.json"), serde_json::to_string_pretty(&methods)?)?;
    Ok(())
}
