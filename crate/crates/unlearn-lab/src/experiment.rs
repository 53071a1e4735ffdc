//! Experiment orchestration: turns a validated config into result artifacts.
//!
//! One experiment = one dataset, one phase plan, `repeats` independent
//! seeds, and a roster of algorithms. Every repeat trains a single starting
//! model that all algorithms share, then each (algorithm × repeat) run walks
//! the phase plan. Results land in an output directory:
//!
//! ```text
//! <out>/aggregate.json            everything, including embedded run logs
//! <out>/timings.tsv               wall times (the one non-deterministic file)
//! <out>/runs/<label>_s<r>/log.json, accuracy.tsv, phase<t>_losses.csv
//! <out>/plots/*.tsv               plot-ready delimited tables
//! ```
//!
//! Everything except `timings.tsv` is a pure function of the config, so two
//! executions produce byte-identical files at any worker count.

use crate::config::{self, Diagnostic, ExperimentConfig, SCHEMA};
use crate::datagen::{plan_phases, DataError, LabeledDataset, PhasePlan};
use crate::metrics::{
    self, AccuracyTable, DbiScore, EvalSet, MarginHistogram, MiaScore,
};
use crate::model::Model;
use crate::rng::SeedSplitter;
use crate::unlearn::{
    evaluate_sets, run_continual, train_original, AlgorithmConfig, AlgorithmKind, PhaseResult,
    StepLoss, TrainError,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

/// Environment variable that re-roots relative output directories.
pub const OUT_ENV: &str = "UNLEARN_LAB_OUT";

fn render_diags(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config:\n{}", render_diags(.0))]
    InvalidConfig(Vec<Diagnostic>),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Histogram serialized as explicit (edges, counts) arrays, plus the number
/// of rows that had no defined value to bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramLog {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub excluded: usize,
}

impl HistogramLog {
    fn new(hist: &MarginHistogram, excluded: usize) -> Self {
        Self { edges: hist.edges(), counts: hist.counts.clone(), excluded }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Everything measured about one phase of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: usize,
    /// Accuracy per evaluation set, as fractions.
    pub accuracies: AccuracyTable,
    /// Accuracy on retain-test rows through the stability blend (ε = 0).
    pub stabilized_retain_test: Option<f64>,
    /// Closeness to this repeat's retrained reference; absent without one.
    pub tug_of_war: Option<f64>,
    /// Cluster dispersion of retain-test features; absent when disabled or
    /// undefined (fewer than two retained classes).
    pub dbi: Option<DbiScore>,
    /// Membership-attack score; absent when disabled.
    pub mia: Option<MiaScore>,
    /// Unlearning-margin histograms keyed by row set: "forget", "forgot".
    pub margins: BTreeMap<String, HistogramLog>,
    /// Feature-similarity histograms vs the previous phase's model, keyed by
    /// row set: "retain", "forget".
    pub similarity: BTreeMap<String, HistogramLog>,
    pub loss_trace: Vec<StepLoss>,
}

/// The serialized record of one (algorithm × repeat) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub artifact: String,
    pub label: String,
    pub repeat: usize,
    pub algorithm: AlgorithmConfig,
    /// The shared starting model's accuracies on each phase's sets.
    pub origin_accuracies: Vec<AccuracyTable>,
    pub phases: Vec<PhaseLog>,
    /// Mean per-phase drop in retain-test accuracy, percentage points;
    /// undefined for single-phase plans.
    pub knowledge_erosion: Option<f64>,
    /// Mean rebound of previously forgotten data, percentage points;
    /// undefined for single-phase plans.
    pub forgetting_reversal: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single value.
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std }
}

fn collect_opt<I: Iterator<Item = Option<f64>>>(vals: I) -> Option<MeanStd> {
    let xs: Vec<f64> = vals.flatten().collect();
    if xs.is_empty() {
        None
    } else {
        Some(mean_std(&xs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub accuracies: BTreeMap<EvalSet, MeanStd>,
    pub stabilized_retain_test: Option<MeanStd>,
    pub tug_of_war: Option<MeanStd>,
    pub dbi: Option<MeanStd>,
    pub mia: Option<MeanStd>,
}

/// Per-algorithm statistics over repeats (successful runs only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub label: String,
    pub phases: Vec<PhaseSummary>,
    pub knowledge_erosion: Option<MeanStd>,
    pub forgetting_reversal: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub label: String,
    pub repeat: usize,
    pub error: String,
}

/// The aggregate result file: the config echo, every run log, failures, and
/// mean ± std summaries. Plot files are derived from this alone, so storing
/// it is enough to re-emit them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub artifact: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunLog>,
    pub failed: Vec<FailedRun>,
    pub summary: Vec<AlgorithmSummary>,
}

pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub aggregate: Aggregate,
}

impl ExperimentOutcome {
    pub fn n_failed(&self) -> usize {
        self.aggregate.failed.len()
    }
}

/// Resolve the output directory: a root (normally from the `UNLEARN_LAB_OUT`
/// environment variable) re-roots relative paths; absolute paths win.
pub fn resolve_out_dir(output_dir: &str, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) => r.join(output_dir),
        None => PathBuf::from(output_dir),
    }
}

/// Run every configured (algorithm × repeat) combination and write all
/// artifacts under `out_dir`. Individual run failures are recorded in the
/// aggregate (partial results preserved); infrastructure failures abort.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentOutcome, ExperimentError> {
    let diags = config::validate(cfg);
    if !diags.is_empty() {
        return Err(ExperimentError::InvalidConfig(diags));
    }

    let ds = cfg.dataset.build()?;
    let plan = plan_phases(&ds, &cfg.phases.forget)?;
    let model_cfg = cfg.model.to_model_config(&cfg.dataset);
    let train_cfg = cfg.training.to_train_config();
    let repeats = cfg.experiment.repeats;
    let workers = cfg.experiment.workers;
    let root = SeedSplitter::new(cfg.experiment.root_seed);
    let splitters: Vec<SeedSplitter> =
        (0..repeats).map(|r| root.child_indexed("repeat", r as u64)).collect();

    // One shared starting model per repeat.
    let origins: Vec<Model> = parallel_map(workers, repeats, |r| {
        train_original(&ds, &model_cfg, &train_cfg, &splitters[r].child("origin"))
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let origin_tables: Vec<Vec<AccuracyTable>> = origins
        .iter()
        .map(|m| plan.phases.iter().map(|p| evaluate_sets(m, &ds, p)).collect())
        .collect();

    // All runs, row-major in (algorithm, repeat).
    let algos: Vec<AlgorithmConfig> =
        cfg.algorithms.iter().map(|a| a.to_algorithm_config()).collect();
    let labels: Vec<String> = cfg.algorithms.iter().map(|a| a.label()).collect();
    let retrain_idx = algos.iter().position(|a| a.kind == AlgorithmKind::Retrain);
    let n_jobs = algos.len() * repeats;
    let job_results: Vec<Result<Vec<PhaseResult>, TrainError>> =
        parallel_map(workers, n_jobs, |j| {
            let (a, r) = (j / repeats, j % repeats);
            let run_seeds = splitters[r].child("algorithm").child(&labels[a]);
            run_continual(&ds, &plan, &origins[r], &algos[a], &run_seeds)
        });

    // Sequential post-processing and writing.
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    let mut timings = String::from("label\trepeat\tphase\tseconds\n");
    for a in 0..algos.len() {
        for r in 0..repeats {
            let label = labels[a].clone();
            match &job_results[a * repeats + r] {
                Err(e) => failed.push(FailedRun { label, repeat: r, error: e.to_string() }),
                Ok(results) => {
                    for pr in results {
                        let _ = writeln!(
                            timings,
                            "{label}\t{r}\t{}\t{:.3}",
                            pr.phase, pr.wall_time_s
                        );
                    }
                    let retrain_results = retrain_idx
                        .and_then(|ri| job_results[ri * repeats + r].as_ref().ok());
                    match build_run_log(
                        cfg,
                        &ds,
                        &plan,
                        &origins[r],
                        &origin_tables[r],
                        results,
                        retrain_results,
                        &label,
                        r,
                        &algos[a],
                    ) {
                        Ok(log) => runs.push(log),
                        Err(e) => {
                            failed.push(FailedRun { label, repeat: r, error: e.to_string() })
                        }
                    }
                }
            }
        }
    }

    let summary = summarize(&labels, &runs, plan.n_phases());
    let aggregate = Aggregate {
        artifact: SCHEMA.to_string(),
        config: cfg.clone(),
        runs,
        failed,
        summary,
    };

    write_artifacts(&aggregate, &timings, out_dir)?;
    Ok(ExperimentOutcome { out_dir: out_dir.to_path_buf(), aggregate })
}

/// Write every artifact derived from the aggregate, plus the timing sidecar.
fn write_artifacts(
    aggregate: &Aggregate,
    timings: &str,
    out_dir: &Path,
) -> Result<(), ExperimentError> {
    create_dir(out_dir)?;
    for run in &aggregate.runs {
        let dir = out_dir.join("runs").join(format!("{}_s{}", run.label, run.repeat));
        create_dir(&dir)?;
        let json = serde_json::to_string_pretty(run)?;
        write_file(&dir.join("log.json"), &(json + "\n"))?;
        write_file(&dir.join("accuracy.tsv"), &accuracy_tsv(run))?;
        for phase in &run.phases {
            write_file(
                &dir.join(format!("phase{}_losses.csv", phase.phase)),
                &losses_csv(&phase.loss_trace),
            )?;
        }
    }
    let json = serde_json::to_string_pretty(aggregate)?;
    write_file(&out_dir.join("aggregate.json"), &(json + "\n"))?;
    emit_plot_data(aggregate, &out_dir.join("plots"))?;
    write_file(&out_dir.join("timings.tsv"), timings)?;
    Ok(())
}

/// Run `f` over `0..n` on up to `workers` threads, preserving index order.
fn parallel_map<T, F>(workers: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if n == 0 {
        return Vec::new();
    }
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let threads = workers.clamp(1, n);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                *slots[i].lock().expect("no poisoned slots") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("no poisoned slots").expect("every index visited"))
        .collect()
}

/// Evaluation sets entering the tug-of-war product at a phase (1-based).
fn tow_sets(class_aligned: bool, phase: usize) -> Vec<EvalSet> {
    let mut sets = if class_aligned {
        vec![EvalSet::RetainTest, EvalSet::ForgetTest]
    } else {
        vec![EvalSet::RetainTrain, EvalSet::ForgetTrain, EvalSet::FullTest]
    };
    if phase >= 2 {
        sets.push(if class_aligned { EvalSet::ForgotTest } else { EvalSet::ForgotTrain });
    }
    sets
}

fn tow_subtables(
    run: &AccuracyTable,
    retrain: &AccuracyTable,
    sets: &[EvalSet],
) -> (AccuracyTable, AccuracyTable) {
    let mut a = AccuracyTable::new();
    let mut b = AccuracyTable::new();
    for &set in sets {
        if let (Some(&x), Some(&y)) = (run.get(&set), retrain.get(&set)) {
            a.insert(set, x);
            b.insert(set, y);
        }
    }
    (a, b)
}

#[allow(clippy::too_many_arguments)]
fn build_run_log(
    cfg: &ExperimentConfig,
    ds: &LabeledDataset,
    plan: &PhasePlan,
    origin: &Model,
    origin_tables: &[AccuracyTable],
    results: &[PhaseResult],
    retrain_results: Option<&Vec<PhaseResult>>,
    label: &str,
    repeat: usize,
    algo: &AlgorithmConfig,
) -> Result<RunLog, ExperimentError> {
    let aligned = ds.is_class_aligned();
    let mt = &cfg.metrics;
    let mut phases = Vec::with_capacity(results.len());

    for (t, pr) in results.iter().enumerate() {
        let part = &plan.phases[t];
        let model = Model::from_snapshot(&pr.snapshot).map_err(TrainError::from)?;

        let tug_of_war = retrain_results.map(|rt| {
            let sets = tow_sets(aligned, pr.phase);
            let (a, b) = tow_subtables(&pr.accuracies, &rt[t].accuracies, &sets);
            metrics::tug_of_war(&a, &b).expect("identical partitions give identical sets")
        });

        let dbi = if mt.dbi && !part.retain_test.is_empty() {
            let feats = model.features(&ds.gather(&part.retain_test));
            metrics::dbi(&feats, &ds.labels_at(&part.retain_test)).ok()
        } else {
            None
        };

        let mia = if mt.mia {
            let loss_of = |rows: &[usize]| {
                metrics::per_sample_losses(&model, &ds.gather(rows), &ds.labels_at(rows))
            };
            let member = loss_of(&part.retain_train);
            let nonmember = loss_of(&ds.test_idx);
            let forget = loss_of(&part.forget_train);
            metrics::mia_score(&member, &nonmember, &forget).ok()
        } else {
            None
        };

        let mut margins = BTreeMap::new();
        if mt.margins {
            for (tag, rows) in [("forget", &part.forget_train), ("forgot", &part.forgot_train)] {
                if rows.is_empty() {
                    continue;
                }
                let vals = metrics::margins_of(&model, &ds.gather(rows), &ds.labels_at(rows));
                let hist =
                    metrics::margin_histogram(&vals, mt.margin_lo, mt.margin_hi, mt.margin_bins);
                margins.insert(tag.to_string(), HistogramLog::new(&hist, 0));
            }
        }

        let mut similarity = BTreeMap::new();
        if mt.similarity {
            let prev;
            let before: &Model = if t == 0 {
                origin
            } else {
                prev = Model::from_snapshot(&results[t - 1].snapshot).map_err(TrainError::from)?;
                &prev
            };
            for (tag, rows) in [("retain", &part.retain_train), ("forget", &part.forget_train)] {
                if rows.is_empty() {
                    continue;
                }
                let sim = metrics::representation_similarity(before, &model, &ds.gather(rows));
                let hist =
                    metrics::margin_histogram(&sim.values(), -1.0, 1.0, mt.similarity_bins);
                similarity.insert(tag.to_string(), HistogramLog::new(&hist, sim.excluded));
            }
        }

        phases.push(PhaseLog {
            phase: pr.phase,
            accuracies: pr.accuracies.clone(),
            stabilized_retain_test: pr.stabilized_retain_test,
            tug_of_war,
            dbi,
            mia,
            margins,
            similarity,
            loss_trace: pr.loss_trace.clone(),
        });
    }

    let retain_pct: Option<Vec<f64>> = phases
        .iter()
        .map(|p| p.accuracies.get(&EvalSet::RetainTest).map(|a| a * 100.0))
        .collect();
    let knowledge_erosion = retain_pct.as_deref().and_then(metrics::knowledge_erosion);

    let pairs: Option<Vec<(f64, f64)>> = phases
        .windows(2)
        .map(|w| {
            let forget_now = w[0].accuracies.get(&EvalSet::ForgetTest)?;
            let forgot_after = w[1].accuracies.get(&EvalSet::ForgotTest)?;
            Some((forget_now * 100.0, forgot_after * 100.0))
        })
        .collect();
    let forgetting_reversal = pairs.as_deref().and_then(metrics::forgetting_reversal);

    Ok(RunLog {
        artifact: SCHEMA.to_string(),
        label: label.to_string(),
        repeat,
        algorithm: algo.clone(),
        origin_accuracies: origin_tables.to_vec(),
        phases,
        knowledge_erosion,
        forgetting_reversal,
    })
}

fn summarize(labels: &[String], runs: &[RunLog], n_phases: usize) -> Vec<AlgorithmSummary> {
    labels
        .iter()
        .map(|label| {
            let mine: Vec<&RunLog> = runs.iter().filter(|r| &r.label == label).collect();
            let phases = (0..n_phases)
                .map(|t| {
                    let logs: Vec<&PhaseLog> = mine.iter().map(|r| &r.phases[t]).collect();
                    let mut keys: Vec<EvalSet> = Vec::new();
                    for l in &logs {
                        for k in l.accuracies.keys() {
                            if !keys.contains(k) {
                                keys.push(*k);
                            }
                        }
                    }
                    let mut accuracies = BTreeMap::new();
                    for k in keys {
                        if let Some(ms) =
                            collect_opt(logs.iter().map(|l| l.accuracies.get(&k).copied()))
                        {
                            accuracies.insert(k, ms);
                        }
                    }
                    PhaseSummary {
                        phase: t + 1,
                        accuracies,
                        stabilized_retain_test: collect_opt(
                            logs.iter().map(|l| l.stabilized_retain_test),
                        ),
                        tug_of_war: collect_opt(logs.iter().map(|l| l.tug_of_war)),
                        dbi: collect_opt(logs.iter().map(|l| l.dbi.map(|d| d.value))),
                        mia: collect_opt(logs.iter().map(|l| l.mia.map(|m| m.score))),
                    }
                })
                .collect();
            AlgorithmSummary {
                label: label.clone(),
                phases,
                knowledge_erosion: collect_opt(mine.iter().map(|r| r.knowledge_erosion)),
                forgetting_reversal: collect_opt(mine.iter().map(|r| r.forgetting_reversal)),
            }
        })
        .collect()
}

const ALL_SETS: [EvalSet; 7] = [
    EvalSet::RetainTrain,
    EvalSet::RetainTest,
    EvalSet::ForgetTrain,
    EvalSet::ForgetTest,
    EvalSet::ForgotTrain,
    EvalSet::ForgotTest,
    EvalSet::FullTest,
];

/// Human-readable per-run table: accuracies in percent (two decimals, as
/// reports render them), metric columns where defined.
fn accuracy_tsv(run: &RunLog) -> String {
    let sets: Vec<EvalSet> = ALL_SETS
        .into_iter()
        .filter(|s| run.phases.iter().any(|p| p.accuracies.contains_key(s)))
        .collect();
    let mut out = String::from("phase");
    for s in &sets {
        let _ = write!(out, "\t{}", s.as_str());
    }
    out.push_str("\tstabilized_retain_test\ttug_of_war\tdbi\tmia\n");
    for p in &run.phases {
        let _ = write!(out, "{}", p.phase);
        for s in &sets {
            match p.accuracies.get(s) {
                Some(a) => {
                    let _ = write!(out, "\t{:.2}", a * 100.0);
                }
                None => out.push('\t'),
            }
        }
        match p.stabilized_retain_test {
            Some(a) => {
                let _ = write!(out, "\t{:.2}", a * 100.0);
            }
            None => out.push('\t'),
        }
        match p.tug_of_war {
            Some(t) => {
                let _ = write!(out, "\t{t:.4}");
            }
            None => out.push('\t'),
        }
        match p.dbi {
            Some(d) => {
                let _ = write!(out, "\t{:.4}", d.value);
            }
            None => out.push('\t'),
        }
        match p.mia {
            Some(m) => {
                let _ = write!(out, "\t{:.2}", m.score);
            }
            None => out.push('\t'),
        }
        out.push('\n');
    }
    out
}

fn losses_csv(trace: &[StepLoss]) -> String {
    let mut out = String::from("step,ce,recon,kl,sep,forget_kl\n");
    for s in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.step, s.ce, s.recon, s.kl, s.sep, s.forget_kl
        );
    }
    out
}

fn opt_ms(v: &Option<MeanStd>) -> (String, String) {
    match v {
        Some(ms) => (ms.mean.to_string(), ms.std.to_string()),
        None => ("undefined".to_string(), "undefined".to_string()),
    }
}

/// Emit every plot-data file from an aggregate. Used both at the end of a
/// run and by the standalone re-emission command; output depends only on the
/// aggregate's contents.
pub fn emit_plot_data(aggregate: &Aggregate, dir: &Path) -> Result<(), ExperimentError> {
    create_dir(dir)?;

    let mut tow = String::from("algorithm\tphase\ttow_mean\ttow_std\n");
    let mut dbi = String::from("algorithm\tphase\tdbi_mean\tdbi_std\n");
    let mut mia = String::from("algorithm\tphase\tmia_mean\tmia_std\n");
    let mut kefr = String::from("algorithm\tke_mean\tke_std\tfr_mean\tfr_std\n");
    for s in &aggregate.summary {
        for p in &s.phases {
            if let Some(ms) = &p.tug_of_war {
                let _ = writeln!(tow, "{}\t{}\t{}\t{}", s.label, p.phase, ms.mean, ms.std);
            }
            if let Some(ms) = &p.dbi {
                let _ = writeln!(dbi, "{}\t{}\t{}\t{}", s.label, p.phase, ms.mean, ms.std);
            }
            if let Some(ms) = &p.mia {
                let _ = writeln!(mia, "{}\t{}\t{}\t{}", s.label, p.phase, ms.mean, ms.std);
            }
        }
        let (ke_m, ke_s) = opt_ms(&s.knowledge_erosion);
        let (fr_m, fr_s) = opt_ms(&s.forgetting_reversal);
        let _ = writeln!(kefr, "{}\t{ke_m}\t{ke_s}\t{fr_m}\t{fr_s}", s.label);
    }
    write_file(&dir.join("tow_vs_phase.tsv"), &tow)?;
    write_file(&dir.join("dbi_vs_phase.tsv"), &dbi)?;
    write_file(&dir.join("mia_bars.tsv"), &mia)?;
    write_file(&dir.join("ke_fr_bars.tsv"), &kefr)?;

    // Margin histograms: one file per (algorithm, phase, row set), one count
    // column per repeat.
    for s in &aggregate.summary {
        let mut mine: Vec<&RunLog> =
            aggregate.runs.iter().filter(|r| r.label == s.label).collect();
        mine.sort_by_key(|r| r.repeat);
        let Some(first) = mine.first() else { continue };
        for (t, phase) in first.phases.iter().enumerate() {
            for tag in phase.margins.keys() {
                let hists: Vec<&HistogramLog> =
                    mine.iter().filter_map(|r| r.phases[t].margins.get(tag)).collect();
                let Some(h0) = hists.first() else { continue };
                let mut out = String::from("bin_lo\tbin_hi");
                for r in &mine {
                    let _ = write!(out, "\tcount_r{}", r.repeat);
                }
                out.push('\n');
                for b in 0..h0.counts.len() {
                    let _ = write!(out, "{}\t{}", h0.edges[b], h0.edges[b + 1]);
                    for h in &hists {
                        let _ = write!(out, "\t{}", h.counts[b]);
                    }
                    out.push('\n');
                }
                let name = format!("margins_{}_phase{}_{}.tsv", s.label, phase.phase, tag);
                write_file(&dir.join(name), &out)?;
            }
        }
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, content: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, content).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a stored aggregate file.
pub fn load_aggregate(path: &Path) -> Result<Aggregate, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_arithmetic() {
        let ms = mean_std(&[2.0, 4.0]);
        assert!((ms.mean - 3.0).abs() < 1e-15);
        assert!((ms.std - 2.0_f64.sqrt()).abs() < 1e-15);
        let one = mean_std(&[5.0]);
        assert_eq!(one.mean, 5.0);
        assert_eq!(one.std, 0.0);
        assert!(collect_opt([None, None].into_iter()).is_none());
        let mixed = collect_opt([Some(1.0), None, Some(3.0)].into_iter()).unwrap();
        assert!((mixed.mean - 2.0).abs() < 1e-15);
    }

    #[test]
    fn tow_set_rule_tracks_setting_and_phase() {
        assert_eq!(tow_sets(true, 1), vec![EvalSet::RetainTest, EvalSet::ForgetTest]);
        assert_eq!(
            tow_sets(true, 2),
            vec![EvalSet::RetainTest, EvalSet::ForgetTest, EvalSet::ForgotTest]
        );
        assert_eq!(
            tow_sets(false, 1),
            vec![EvalSet::RetainTrain, EvalSet::ForgetTrain, EvalSet::FullTest]
        );
        assert_eq!(tow_sets(false, 3).len(), 4);
    }

    #[test]
    fn histogram_log_carries_edges_and_mass() {
        let hist = metrics::margin_histogram(&[-0.5, 0.5, 3.0], -1.0, 1.0, 4);
        let log = HistogramLog::new(&hist, 2);
        assert_eq!(log.edges.len(), 5);
        assert_eq!(log.total(), 3);
        assert_eq!(log.excluded, 2);
        // 0.5 sits on the last bin's lower edge; 3.0 clamps into it.
        assert_eq!(log.counts, vec![0, 1, 0, 2]);
    }

    #[test]
    fn out_dir_resolution_respects_root_and_absolute_paths() {
        assert_eq!(resolve_out_dir("out", None), PathBuf::from("out"));
        assert_eq!(
            resolve_out_dir("out", Some(Path::new("/tmp/root"))),
            PathBuf::from("/tmp/root/out")
        );
        assert_eq!(
            resolve_out_dir("/abs/out", Some(Path::new("/tmp/root"))),
            PathBuf::from("/abs/out")
        );
    }

    #[test]
    fn small_experiment_round_trips_and_is_deterministic() {
        let text = r#"
schema = "unlearn-lab/v1"

[experiment]
repeats = 2
root_seed = 5
workers = 2
output_dir = "out"

[dataset]
kind = "gaussian_blobs"
classes = 4
dim = 4
samples_per_class = 30
seed = 11

[model]
extractor_widths = [12]
latent_dim = 3
encoder_widths = [8]
decoder_widths = [8]

[training]
epochs = 8

[phases]
forget = [[0], [1]]

[metrics]
margin_bins = 8
similarity_bins = 8

[[algorithms]]
kind = "retrain"
epochs = 2

[[algorithms]]
kind = "safer"
epochs = 2
"#;
        let cfg = crate::config::parse(text).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let out_a = tmp.path().join("a");
        let out_b = tmp.path().join("b");
        let outcome = run_experiment(&cfg, &out_a).unwrap();
        assert_eq!(outcome.n_failed(), 0);

        let agg = &outcome.aggregate;
        assert_eq!(agg.runs.len(), 4);
        let phase_records: usize = agg.runs.iter().map(|r| r.phases.len()).sum();
        assert_eq!(phase_records, 8);

        // Retrain's tug-of-war against itself is exactly 1.
        for run in agg.runs.iter().filter(|r| r.label == "retrain") {
            for p in &run.phases {
                assert_eq!(p.tug_of_war, Some(1.0));
            }
            assert!(run.knowledge_erosion.is_some());
            assert!(run.forgetting_reversal.is_some());
        }
        // Forgot-set entries appear only from the second phase on.
        for run in &agg.runs {
            assert!(!run.phases[0].accuracies.contains_key(&EvalSet::ForgotTest));
            assert!(run.phases[1].accuracies.contains_key(&EvalSet::ForgotTest));
            assert!(run.phases[1].margins.contains_key("forgot"));
            let m = &run.phases[0].margins["forget"];
            assert_eq!(m.total(), 24); // 30 per class, test fraction 0.2
        }

        // The stored aggregate reloads to the same value and re-emits
        // byte-identical plot files.
        let loaded = load_aggregate(&out_a.join("aggregate.json")).unwrap();
        assert_eq!(loaded, *agg);
        let replots = tmp.path().join("replots");
        emit_plot_data(&loaded, &replots).unwrap();
        for entry in std::fs::read_dir(out_a.join("plots")).unwrap() {
            let entry = entry.unwrap();
            let a = std::fs::read(entry.path()).unwrap();
            let b = std::fs::read(replots.join(entry.file_name())).unwrap();
            assert_eq!(a, b, "{:?}", entry.file_name());
        }

        // A second execution writes byte-identical artifacts (except the
        // timing sidecar).
        let again = run_experiment(&cfg, &out_b).unwrap();
        assert_eq!(again.aggregate, *agg);
        let a = std::fs::read(out_a.join("aggregate.json")).unwrap();
        let b = std::fs::read(out_b.join("aggregate.json")).unwrap();
        assert_eq!(a, b);
        let a = std::fs::read(out_a.join("runs/safer_s1/log.json")).unwrap();
        let b = std::fs::read(out_b.join("runs/safer_s1/log.json")).unwrap();
        assert_eq!(a, b);

        // Derived tables exist and carry the expected row counts.
        let tow = std::fs::read_to_string(out_a.join("plots/tow_vs_phase.tsv")).unwrap();
        assert_eq!(tow.lines().count(), 1 + 2 * 2); // header + 2 algorithms × 2 phases
        let acc = std::fs::read_to_string(out_a.join("runs/retrain_s0/accuracy.tsv")).unwrap();
        assert_eq!(acc.lines().count(), 3);
        assert!(out_a.join("runs/retrain_s0/phase2_losses.csv").exists());
        assert!(out_a.join("timings.tsv").exists());
    }
}
