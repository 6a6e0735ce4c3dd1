//! Command-line front end: `run`, `baseline`, `train`, `sample`, `probe` and
//! `report`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 output conflict,
//! 4 runtime failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{Profile, RunConfig};
use crate::datasets::{
    encode_idx_images, load_idx_images, load_idx_labels, write_atomic, Dataset, ImageSet,
    TaskStream,
};
use crate::error::Error;
use crate::metrics::{assemble_matrix, forgetting, mean, std, AccuracyMatrix};
use crate::pgm::write_contact_sheet;
use crate::protocol::{offline_baseline, run_cil, task_similarity_probe, RunRecord};
use crate::sampler::top_components;
use crate::scholar::{Scholar, ScholarConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFLICT: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ar", version, about = "Adiabatic replay experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a class-incremental experiment for every seed.
    Run(RunArgs),
    /// Joint training on all tasks at once (offline upper reference).
    Baseline(RunArgs),
    /// Fit a scholar on a class subset and save it as a checkpoint.
    Train(TrainArgs),
    /// Generate variants of query samples from a checkpoint.
    Sample(SampleArgs),
    /// Mean NLL of every task's test data after training on the first task.
    Probe(RunArgs),
    /// Rebuild summaries from the run records in a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub profile: Option<Profile>,
    /// Comma-separated seed list, overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub profile: Option<Profile>,
    /// Training classes, e.g. `0,4,6`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// IDX image file with the queries.
    #[arg(long)]
    pub queries: PathBuf,
    /// IDX label file used together with `--class` to pick queries.
    #[arg(long, requires = "class")]
    pub labels: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub class: Option<usize>,
    /// Use at most this many queries.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Number of variants; queries are cycled.
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
    /// Output directory for `variants-idx3-ubyte` and `variants.pgm`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding `record-*.json` files.
    pub dir: PathBuf,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        error: e.into(),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_RUNTIME,
        error: e.into(),
    }
}

/// Configuration and input problems map to 2, everything else to 4.
fn classify(e: Error) -> CliError {
    match e {
        Error::InvalidConfig(_)
        | Error::UnknownProblem { .. }
        | Error::NonSquareK(_)
        | Error::InvalidRatio(_)
        | Error::IoFailure { .. }
        | Error::WrongMagic { .. }
        | Error::TruncatedPayload { .. }
        | Error::Checkpoint(_)
        | Error::UnknownClass { .. }
        | Error::TooFewTasks(_) => usage(e),
        other => runtime(other),
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(command: Command) -> CliResult {
    match command {
        Command::Run(a) => cmd_run(&a),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Probe(a) => cmd_probe(&a),
        Command::Report(a) => cmd_report(&a.dir),
    }
}

fn load_config(a: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&a.config, a.profile).map_err(classify)?;
    if let Some(seeds) = &a.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate().map_err(classify)?;
    if a.jobs == 0 {
        return Err(usage(anyhow!("--jobs must be >= 1")));
    }
    Ok(cfg)
}

fn out_dir(a: &RunArgs, cfg: &RunConfig) -> PathBuf {
    a.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| {
            PathBuf::from("runs").join(format!(
                "{}-{}",
                file_safe(&cfg.problem),
                match cfg.profile {
                    Profile::Desk => "desk",
                    Profile::Full => "full",
                }
            ))
        })
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))
            .map_err(usage)?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError {
                code: EXIT_CONFLICT,
                error: anyhow!(
                    "output directory {} is not empty (use --force to overwrite)",
                    dir.display()
                ),
            });
        }
    }
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn load_stream(cfg: &RunConfig) -> CliResult<TaskStream> {
    let ds = Dataset::load(cfg.dataset, &cfg.data_dir).map_err(classify)?;
    crate::datasets::make_cil_problem(&cfg.problem, &ds).map_err(classify)
}

fn seed_stream(full: &TaskStream, cfg: &RunConfig, seed: u64) -> TaskStream {
    if cfg.train_fraction < 1.0 {
        full.subsample_train(cfg.train_fraction, seed)
    } else {
        full.clone()
    }
}

/// Runs `work` for every seed on up to `jobs` threads, keeping seed order.
fn per_seed<T: Send>(seeds: &[u64], jobs: usize, work: impl Fn(u64) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(seeds.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let out = work(seeds[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|o| o.expect("every seed ran"))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    write_atomic(path, text.as_bytes()).map_err(runtime)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    write_atomic(path, text.as_bytes()).map_err(runtime)
}

fn cmd_run(a: &RunArgs) -> CliResult {
    let cfg = load_config(a)?;
    let dir = out_dir(a, &cfg);
    prepare_dir(&dir, a.force)?;
    let full = load_stream(&cfg)?;
    // records of an earlier run would otherwise leak into the summaries
    for stale in record_paths(&dir)? {
        fs::remove_file(&stale)
            .with_context(|| format!("removing {}", stale.display()))
            .map_err(runtime)?;
    }
    write_text(
        &dir.join("config.toml"),
        &toml::to_string(&cfg).map_err(runtime)?,
    )?;
    let plan = cfg.plan();
    let results = per_seed(&cfg.seeds, a.jobs, |seed| {
        let stream = seed_stream(&full, &cfg, seed);
        let rec = run_cil(&stream, &cfg.scholar, &plan, seed)?;
        write_json(&dir.join(format!("record-seed{seed}.json")), &rec)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok::<_, Error>(rec)
    });
    let mut records = Vec::new();
    for (seed, r) in cfg.seeds.iter().zip(results) {
        let rec = r.map_err(runtime)?;
        match &rec.failure {
            Some(f) => eprintln!("seed {seed}: failed: {f}"),
            None => eprintln!(
                "seed {seed}: final baseline accuracy {:.3}",
                rec.stages.last().map_or(0.0, |s| s.baseline_accuracy)
            ),
        }
        records.push(rec);
    }
    let failed = records.iter().filter(|r| !r.is_complete()).count();
    let summary = write_reports(&dir, &records)?;
    print!("{summary}");
    if failed > 0 {
        return Err(runtime(anyhow!(
            "{failed} of {} runs failed",
            records.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub problem: String,
    pub seed: u64,
    pub accuracy: f64,
}

fn cmd_baseline(a: &RunArgs) -> CliResult {
    let cfg = load_config(a)?;
    let dir = out_dir(a, &cfg);
    fs::create_dir_all(&dir).map_err(runtime)?;
    let path = dir.join("baseline.csv");
    if path.exists() && !a.force {
        return Err(CliError {
            code: EXIT_CONFLICT,
            error: anyhow!("{} exists (use --force to overwrite)", path.display()),
        });
    }
    let full = load_stream(&cfg)?;
    let results = per_seed(&cfg.seeds, a.jobs, |seed| {
        offline_baseline(&seed_stream(&full, &cfg, seed), &cfg.scholar, seed)
    });
    let mut rows = Vec::new();
    for (&seed, r) in cfg.seeds.iter().zip(results) {
        rows.push(BaselineRow {
            problem: cfg.problem.clone(),
            seed,
            accuracy: r.map_err(runtime)?,
        });
    }
    let mut wr = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        wr.serialize(r).map_err(runtime)?;
    }
    write_atomic(&path, &wr.into_inner().map_err(runtime)?).map_err(runtime)?;
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    println!(
        "{} offline baseline over {} seeds: {:.3} +- {:.3}",
        cfg.problem,
        acc.len(),
        mean(&acc),
        std(&acc)
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let mut cfg = RunConfig::load(&a.config, a.profile).map_err(classify)?;
    if let Some(k) = a.k {
        cfg.scholar.k = k;
    }
    if let Some(e) = a.epochs {
        cfg.scholar.initial_epochs = e;
    }
    cfg.scholar.seed = a.seed;
    cfg.validate().map_err(classify)?;
    if a.out.exists() && !a.force {
        return Err(CliError {
            code: EXIT_CONFLICT,
            error: anyhow!("{} exists (use --force to overwrite)", a.out.display()),
        });
    }
    let ds = Dataset::load(cfg.dataset, &cfg.data_dir).map_err(classify)?;
    let classes = a.classes.iter().copied().collect();
    let task = ds.train.restrict(&classes);
    if task.is_empty() {
        return Err(usage(anyhow!(
            "no training samples for classes {:?}",
            a.classes
        )));
    }
    let task = if cfg.train_fraction < 1.0 {
        task.subsample(cfg.train_fraction, a.seed)
    } else {
        task
    };
    let mut scholar =
        Scholar::new(cfg.scholar.clone(), task.images.dim(), ds.num_classes()).map_err(classify)?;
    let log = scholar.initial_fit(&task).map_err(runtime)?;
    scholar.save(&a.out).map_err(runtime)?;
    let test = ds.test.restrict(&classes);
    println!(
        "trained K={} on {} samples for {} epochs; test accuracy {:.3}; wrote {}",
        cfg.scholar.k,
        task.len(),
        log.gmm.len(),
        scholar.evaluate(&test).map_err(runtime)?,
        a.out.display()
    );
    Ok(())
}

fn load_queries(a: &SampleArgs) -> CliResult<ImageSet> {
    let images = load_idx_images(&a.queries).map_err(classify)?;
    let mut idx: Vec<usize> = match (&a.labels, a.class) {
        (Some(path), Some(class)) => {
            let labels = load_idx_labels(path).map_err(classify)?;
            if labels.len() != images.count() {
                return Err(usage(anyhow!(
                    "{} labels for {} query images",
                    labels.len(),
                    images.count()
                )));
            }
            (0..labels.len())
                .filter(|&i| labels.get(i) == class)
                .collect()
        }
        _ => (0..images.count()).collect(),
    };
    if let Some(n) = a.limit {
        idx.truncate(n);
    }
    if idx.is_empty() {
        return Err(usage(anyhow!("no query samples selected")));
    }
    Ok(images.select(&idx))
}

fn cmd_sample(a: &SampleArgs) -> CliResult {
    if a.count == 0 {
        return Err(usage(anyhow!("--count must be >= 1")));
    }
    let scholar = Scholar::load(&a.checkpoint).map_err(classify)?;
    let queries = load_queries(a)?;
    if queries.dim() != scholar.dim() {
        return Err(usage(anyhow!(
            "queries have {} features, checkpoint expects {}",
            queries.dim(),
            scholar.dim()
        )));
    }
    prepare_dir(&a.out, a.force)?;
    let gmm = scholar.gmm().map_err(runtime)?;
    let cycled: Vec<usize> = (0..a.count).map(|i| i % queries.count()).collect();
    let q = queries.select(&cycled);
    let cfg = crate::sampler::SamplerConfig {
        s: scholar.config().top_s,
        rho: scholar.config().rho,
        seed: a.seed,
    };
    let variants = crate::sampler::generate_variants_traced(gmm, &q, &cfg, 1).map_err(runtime)?;
    write_atomic(
        &a.out.join("variants-idx3-ubyte"),
        &encode_idx_images(&variants.images),
    )
    .map_err(runtime)?;
    write_contact_sheet(a.out.join("variants.pgm"), &variants.images, 8).map_err(runtime)?;
    println!("query,top_components,drawn_component");
    for (i, x) in q.rows().enumerate() {
        let top = top_components(gmm, x, cfg.s).map_err(runtime)?;
        let top: Vec<String> = top.iter().map(usize::to_string).collect();
        println!("{},{},{}", cycled[i], top.join(" "), variants.components[i]);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub problem: String,
    pub seed: u64,
    pub task: usize,
    pub mean_nll: f64,
}

fn cmd_probe(a: &RunArgs) -> CliResult {
    let cfg = load_config(a)?;
    let dir = out_dir(a, &cfg);
    fs::create_dir_all(&dir).map_err(runtime)?;
    let path = dir.join("probe.csv");
    if path.exists() && !a.force {
        return Err(CliError {
            code: EXIT_CONFLICT,
            error: anyhow!("{} exists (use --force to overwrite)", path.display()),
        });
    }
    let full = load_stream(&cfg)?;
    let results = per_seed(&cfg.seeds, a.jobs, |seed| {
        let stream = seed_stream(&full, &cfg, seed);
        let config = ScholarConfig {
            seed,
            ..cfg.scholar.clone()
        };
        let mut s = Scholar::new(config, stream.dim(), stream.num_classes())?;
        s.initial_fit(&stream.tasks[0])?;
        let sets: Vec<ImageSet> = stream.test_tasks.iter().map(|t| t.images.clone()).collect();
        task_similarity_probe(&s, &sets)
    });
    let mut wr = csv::Writer::from_writer(Vec::new());
    for (&seed, r) in cfg.seeds.iter().zip(results) {
        let nll = r.map_err(runtime)?;
        println!("seed {seed}: {nll:?}");
        for (i, v) in nll.into_iter().enumerate() {
            wr.serialize(ProbeRow {
                problem: cfg.problem.clone(),
                seed,
                task: i + 1,
                mean_nll: v,
            })
            .map_err(runtime)?;
        }
    }
    write_atomic(&path, &wr.into_inner().map_err(runtime)?).map_err(runtime)
}

/// Seed-aggregated figures of one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub problem: String,
    pub seeds: usize,
    pub alpha_base: Option<(f64, f64)>,
    pub alpha_init: (f64, f64),
    pub alpha_init_final: (f64, f64),
    pub alpha_base_final: (f64, f64),
    pub forgetting_final: (f64, f64),
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    (mean(v), std(v))
}

/// Aggregates complete records of a single problem.
pub fn summarize(records: &[RunRecord], baseline: &[f64]) -> crate::Result<ProblemSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::IncompleteRecord("no records".into()))?;
    let ms = records
        .iter()
        .map(assemble_matrix)
        .collect::<crate::Result<Vec<_>>>()?;
    let pick = |f: &dyn Fn(&AccuracyMatrix) -> Option<f64>| -> crate::Result<(f64, f64)> {
        let v = ms
            .iter()
            .map(|m| f(m).ok_or_else(|| Error::IncompleteRecord("missing entry".into())))
            .collect::<crate::Result<Vec<_>>>()?;
        Ok(mean_std(&v))
    };
    let forget = ms
        .iter()
        .map(|m| forgetting(m, m.tasks()).map(|r| r.average))
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(ProblemSummary {
        problem: first.problem.clone(),
        seeds: records.len(),
        alpha_base: (!baseline.is_empty()).then(|| mean_std(baseline)),
        alpha_init: pick(&|m| m.alpha_init())?,
        alpha_init_final: pick(&|m| m.alpha_init_final())?,
        alpha_base_final: pick(&|m| m.baseline_final())?,
        forgetting_final: mean_std(&forget),
    })
}

fn fmt_pm((m, s): (f64, f64)) -> String {
    format!("{m:.3} +- {s:.3}")
}

/// Writes every derived file for `records` into `dir` and returns the
/// human-readable summary.
pub fn write_reports(dir: &Path, records: &[RunRecord]) -> CliResult<String> {
    let baseline = read_baseline(dir)?;
    let mut groups: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.problem.clone()).or_default().push(r.clone());
    }
    let mut text = String::new();
    let mut rows = Vec::new();
    for (problem, recs) in &groups {
        let tag = file_safe(problem);
        let (complete, partial): (Vec<_>, Vec<_>) =
            recs.iter().cloned().partition(RunRecord::is_complete);
        let _ = writeln!(text, "## {problem}");
        for p in &partial {
            let _ = writeln!(
                text,
                "seed {} incomplete: {}",
                p.seed,
                p.failure.as_deref().unwrap_or("missing stages")
            );
        }
        write_curves(dir, &tag, recs)?;
        if complete.is_empty() {
            let _ = writeln!(text, "no complete runs\n");
            continue;
        }
        let ms = complete
            .iter()
            .map(assemble_matrix)
            .collect::<crate::Result<Vec<_>>>()
            .map_err(runtime)?;
        let mean_m = AccuracyMatrix::mean(&ms).map_err(runtime)?;
        write_text(
            &dir.join(format!("{tag}-accuracy-mean.csv")),
            &mean_m.to_csv_string(),
        )?;
        write_text(
            &dir.join(format!("{tag}-accuracy-std.csv")),
            &AccuracyMatrix::std(&ms).map_err(runtime)?.to_csv_string(),
        )?;
        write_forgetting(dir, &tag, &complete, &ms)?;
        let base: Vec<f64> = baseline
            .iter()
            .filter(|b| &b.problem == problem)
            .map(|b| b.accuracy)
            .collect();
        let s = summarize(&complete, &base).map_err(runtime)?;
        let _ = writeln!(text, "seeds              {}", s.seeds);
        if let Some(b) = s.alpha_base {
            let _ = writeln!(text, "alpha_base         {}", fmt_pm(b));
        }
        let _ = writeln!(text, "alpha_init         {}", fmt_pm(s.alpha_init));
        let _ = writeln!(text, "alpha_init_final   {}", fmt_pm(s.alpha_init_final));
        let _ = writeln!(text, "alpha_base_final   {}", fmt_pm(s.alpha_base_final));
        let _ = writeln!(text, "forgetting_final   {}\n", fmt_pm(s.forgetting_final));
        rows.push(s);
    }
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record([
        "problem",
        "seeds",
        "alpha_base",
        "alpha_base_std",
        "alpha_init",
        "alpha_init_std",
        "alpha_init_final",
        "alpha_init_final_std",
        "alpha_base_final",
        "alpha_base_final_std",
        "forgetting_final",
        "forgetting_final_std",
    ])
    .map_err(runtime)?;
    for s in &rows {
        let f = |v: f64| format!("{v:.6}");
        let (bm, bs) = s
            .alpha_base
            .map_or((String::new(), String::new()), |(m, sd)| (f(m), f(sd)));
        wr.write_record([
            s.problem.clone(),
            s.seeds.to_string(),
            bm,
            bs,
            f(s.alpha_init.0),
            f(s.alpha_init.1),
            f(s.alpha_init_final.0),
            f(s.alpha_init_final.1),
            f(s.alpha_base_final.0),
            f(s.alpha_base_final.1),
            f(s.forgetting_final.0),
            f(s.forgetting_final.1),
        ])
        .map_err(runtime)?;
    }
    write_atomic(&dir.join("summary.csv"), &wr.into_inner().map_err(runtime)?).map_err(runtime)?;
    write_text(&dir.join("summary.txt"), &text)?;
    Ok(text)
}

fn write_forgetting(
    dir: &Path,
    tag: &str,
    records: &[RunRecord],
    ms: &[AccuracyMatrix],
) -> CliResult {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(["seed", "stage", "task", "forgetting"])
        .map_err(runtime)?;
    for (r, m) in records.iter().zip(ms) {
        for stage in 2..=m.tasks() {
            let rep = forgetting(m, stage).map_err(runtime)?;
            for (i, v) in rep.per_task.iter().enumerate() {
                wr.write_record([
                    r.seed.to_string(),
                    stage.to_string(),
                    (i + 1).to_string(),
                    format!("{v:.6}"),
                ])
                .map_err(runtime)?;
            }
            wr.write_record([
                r.seed.to_string(),
                stage.to_string(),
                "mean".into(),
                format!("{:.6}", rep.average),
            ])
            .map_err(runtime)?;
        }
    }
    write_atomic(
        &dir.join(format!("{tag}-forgetting.csv")),
        &wr.into_inner().map_err(runtime)?,
    )
    .map_err(runtime)
}

/// Generated counts, loss curves and likelihood probes.
fn write_curves(dir: &Path, tag: &str, records: &[RunRecord]) -> CliResult {
    let mut counts = csv::Writer::from_writer(Vec::new());
    counts
        .write_record(["seed", "task", "real", "generated"])
        .map_err(runtime)?;
    let mut losses = csv::Writer::from_writer(Vec::new());
    losses
        .write_record(["seed", "task", "epoch", "loss", "radius"])
        .map_err(runtime)?;
    let mut probe = csv::Writer::from_writer(Vec::new());
    probe
        .write_record(["seed", "task", "mean_nll"])
        .map_err(runtime)?;
    for r in records {
        for s in &r.stages {
            counts
                .write_record([
                    r.seed.to_string(),
                    s.stage.to_string(),
                    s.log.real_samples.to_string(),
                    s.log.generated.to_string(),
                ])
                .map_err(runtime)?;
            for (e, (l, rad)) in s.log.gmm.losses.iter().zip(&s.log.gmm.radii).enumerate() {
                losses
                    .write_record([
                        r.seed.to_string(),
                        s.stage.to_string(),
                        (e + 1).to_string(),
                        format!("{l:.6}"),
                        format!("{rad:.6}"),
                    ])
                    .map_err(runtime)?;
            }
        }
        for (i, v) in r.probe_after_first.iter().enumerate() {
            probe
                .write_record([r.seed.to_string(), (i + 1).to_string(), format!("{v:.6}")])
                .map_err(runtime)?;
        }
    }
    for (name, wr) in [
        ("generated-counts", counts),
        ("loss-curves", losses),
        ("nll-probe", probe),
    ] {
        write_atomic(
            &dir.join(format!("{tag}-{name}.csv")),
            &wr.into_inner().map_err(runtime)?,
        )
        .map_err(runtime)?;
    }
    Ok(())
}

fn read_baseline(dir: &Path) -> CliResult<Vec<BaselineRow>> {
    let path = dir.join("baseline.csv");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rd = csv::Reader::from_path(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    rd.deserialize()
        .collect::<Result<Vec<BaselineRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(usage)
}

fn record_paths(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(usage)?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("record-") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every `record-*.json` in `dir`, sorted by file name.
pub fn read_records(dir: &Path) -> CliResult<Vec<RunRecord>> {
    let paths = record_paths(dir)?;
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for p in paths {
        let parsed = fs::read_to_string(&p)
            .map_err(anyhow::Error::from)
            .and_then(|t| serde_json::from_str::<RunRecord>(&t).map_err(anyhow::Error::from));
        match parsed {
            Ok(r) => out.push(r),
            Err(e) => bad.push(format!("{}: {e}", p.display())),
        }
    }
    for b in &bad {
        eprintln!("skipping {b}");
    }
    if out.is_empty() {
        return Err(usage(anyhow!(
            "no readable run records in {}{}",
            dir.display(),
            if bad.is_empty() {
                ""
            } else {
                " (see skipped files)"
            }
        )));
    }
    Ok(out)
}

fn cmd_report(dir: &Path) -> CliResult {
    let records = read_records(dir)?;
    print!("{}", write_reports(dir, &records)?);
    Ok(())
}
