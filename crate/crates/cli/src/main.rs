//! Command-line entry point binding the whole pipeline: corpus generation,
//! training (one entry point, methods selected by flag), evaluation,
//! probing, and report aggregation.
//!
//! Exit codes: 0 success, 2 usage (bad flags, missing files, invalid
//! config), 1 anything else.

mod config;
mod lock;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use codi_core::baselines::{train_baseline, BaselineKind};
use codi_core::checkpoint::{self, CheckpointMeta};
use codi_core::codi::{build_train_item, CodiConfig, TeacherMode, TrainItem};
use codi_core::error::CoreError;
use codi_core::eval::{evaluate, EvalOptions, EvalReport, Method, CSV_HEADER};
use codi_core::manifest::{sidecar_path, CorpusFingerprint, RunManifest};
use codi_core::model::Model;
use codi_core::optim::AdamW;
use codi_core::probe::{intermediate_match_rate, probe_problem, ProbeOptions};
use codi_core::problems::{generate_corpus, read_problems, write_problems, GenConfig, ValueRange};
use codi_core::tokenizer::Tokenizer;
use codi_core::train::{train_codi, ResumeState, StepMetrics, TrainObserver};

use crate::config::{parse_config, parse_distance};
use crate::lock::DirLock;

/// Working precision for training and inference. Checkpoints store f64 bytes
/// on disk either way, so files stay portable across this choice.
type Dtype = f32;

#[derive(Parser)]
#[command(name = "codi", version, about = "Continuous chain-of-thought training, desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-step arithmetic corpus (JSONL).
    GenData(GenDataArgs),
    /// Train a method on a corpus; emits metrics, a checkpoint, a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a problem set.
    Eval(EvalArgs),
    /// Decode and attribute a checkpoint's continuous thoughts.
    Probe(ProbeArgs),
    /// Aggregate eval reports into one CSV (no recomputation).
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    max_steps: usize,
    /// Quantity range lower bound.
    #[arg(long, default_value_t = 10)]
    lo: i64,
    /// Quantity range upper bound.
    #[arg(long, default_value_t = 99)]
    hi: i64,
    /// Shift the range one order of magnitude up (out-of-distribution).
    #[arg(long)]
    ood: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// codi | cot-sft | no-cot | res | op-res
    #[arg(long)]
    method: String,
    /// Training corpus (JSONL from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Flat key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to $CODI_OUT_ROOT/<method>-seed<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Problems for periodic accuracy eval (enables eval_every).
    #[arg(long)]
    eval_set: Option<PathBuf>,
    /// Cap on periodic-eval problems.
    #[arg(long, default_value_t = 200)]
    eval_limit: usize,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write checkpoint-step<N>.bin every N steps.
    #[arg(long)]
    save_every: Option<u64>,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    num_latent: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// l1 | smooth-l1
    #[arg(long)]
    distance: Option<String>,
    /// Keep the final reasoning step in the teacher sequence.
    #[arg(long)]
    keep_final_step: bool,
    /// Inject raw hidden states instead of projected thoughts.
    #[arg(long)]
    no_projection: bool,
    /// Distill from a separately trained frozen teacher.
    #[arg(long)]
    separate_teacher: bool,
    /// With a separate teacher, keep the explicit task on the student too.
    #[arg(long)]
    multitask_student: bool,
    /// Disable layer-wise teacher-std normalization of the distill loss.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Problem set (JSONL).
    #[arg(long)]
    set: PathBuf,
    /// Defaults to the method recorded in the checkpoint.
    #[arg(long)]
    method: Option<String>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    num_latent: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comparator average CoT tokens for the compression ratio; defaults
    /// to the eval set's reference reasoning length.
    #[arg(long)]
    comparator: Option<f64>,
    #[arg(long)]
    no_projection: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Problems for match rates and the detailed probe.
    #[arg(long)]
    set: PathBuf,
    /// Which problem gets the per-thought breakdown.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Cap on problems scanned for match rates.
    #[arg(long, default_value_t = 200)]
    limit: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    num_latent: Option<usize>,
    #[arg(long)]
    no_projection: bool,
    /// Include incorrectly answered problems in the match rate.
    #[arg(long)]
    include_incorrect: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories or files containing eval-*.json reports.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Wrapper persisted by `eval` and consumed by `report`.
#[derive(Serialize, Deserialize)]
struct EvalRecord {
    method: String,
    dataset: String,
    report: EvalReport,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Probe(a) => probe(a),
        Cmd::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Usage-class failures (bad input, not broken computation) exit 2.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            if matches!(core, CoreError::InvalidConfig(_) | CoreError::UnknownToken(_)) {
                return 2;
            }
            if let CoreError::Io(io) = core {
                if io.kind() == std::io::ErrorKind::NotFound {
                    return 2;
                }
            }
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
    }
    1
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut range = ValueRange { lo: a.lo, hi: a.hi };
    if a.ood {
        range = range.ood();
    }
    let cfg = GenConfig { seed: a.seed, size: a.size, max_steps: a.max_steps, range };
    let problems = generate_corpus(&cfg).context("corpus generation failed")?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_problems(&a.out, &problems)?;
    fs::write(sidecar_path(&a.out), serde_json::to_string_pretty(&cfg)?)?;
    println!("wrote {} problems to {}", problems.len(), a.out.display());
    Ok(())
}

fn out_root() -> PathBuf {
    std::env::var_os("CODI_OUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn resolve_train_config(a: &TrainArgs) -> anyhow::Result<CodiConfig> {
    let mut cfg = CodiConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        parse_config(&text, &mut cfg).map_err(usage)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.num_latent {
        cfg.num_latent = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.total_steps {
        cfg.total_steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.peak_lr {
        cfg.peak_lr = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = &a.distance {
        cfg.distance = parse_distance(v).map_err(usage)?;
    }
    if a.keep_final_step {
        cfg.keep_final_step = true;
    }
    if a.no_projection {
        cfg.use_projection = false;
    }
    if a.separate_teacher {
        cfg.teacher_mode = TeacherMode::Separate;
    }
    if a.multitask_student {
        cfg.multitask_student = true;
    }
    if a.no_normalize {
        cfg.normalize_by_teacher_std = false;
    }
    if let Some(v) = a.hidden_dim {
        cfg.model.hidden_dim = v;
    }
    if let Some(v) = a.num_layers {
        cfg.model.num_layers = v;
    }
    if let Some(v) = a.num_heads {
        cfg.model.num_heads = v;
    }
    if let Some(v) = a.max_seq_len {
        cfg.model.max_seq_len = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Streams metrics to JSONL, runs the periodic accuracy eval, and writes
/// interval checkpoints.
struct RunObserver {
    metrics: std::io::BufWriter<fs::File>,
    out_dir: PathBuf,
    method: Method,
    eval_set: Vec<codi_core::problems::Problem>,
    eval_opts: EvalOptions,
    eval_every: usize,
    save_every: Option<u64>,
    meta: CheckpointMeta,
    tok: Tokenizer,
}

impl TrainObserver<Dtype> for RunObserver {
    fn eval(&mut self, model: &Model<Dtype>, step: u64) -> codi_core::error::Result<Option<f64>> {
        if self.eval_every == 0
            || self.eval_set.is_empty()
            || step % self.eval_every as u64 != 0
        {
            return Ok(None);
        }
        let report = evaluate(model, &self.tok, &self.eval_set, self.method, &self.eval_opts)?;
        Ok(Some(report.accuracy))
    }

    fn on_step(&mut self, m: &StepMetrics) -> codi_core::error::Result<()> {
        let line = serde_json::to_string(m)?;
        writeln!(self.metrics, "{line}")?;
        Ok(())
    }

    fn on_state(
        &mut self,
        model: &Model<Dtype>,
        opt: &AdamW<Dtype>,
        step: u64,
    ) -> codi_core::error::Result<()> {
        if let Some(every) = self.save_every {
            if every > 0 && step % every == 0 {
                let mut meta = self.meta.clone();
                meta.step = step;
                checkpoint::save(
                    &self.out_dir.join(format!("checkpoint-step{step}.bin")),
                    model,
                    Some(opt),
                    &meta,
                )?;
            }
        }
        Ok(())
    }
}

fn method_of(name: &str) -> anyhow::Result<Method> {
    Method::parse(name)
        .ok_or_else(|| usage(format!("unknown method {name:?} (codi|cot-sft|no-cot|res|op-res)")))
}

fn baseline_kind(method: Method) -> Option<BaselineKind> {
    match method {
        Method::Codi => None,
        Method::CotSft => Some(BaselineKind::CotSft),
        Method::NoCot => Some(BaselineKind::NoCotSft),
        Method::Res => Some(BaselineKind::ResSft),
        Method::OpRes => Some(BaselineKind::OpResSft),
    }
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let method = method_of(&a.method)?;
    let cfg = resolve_train_config(&a)?;
    let problems = read_problems(&a.data)
        .with_context(|| format!("cannot read corpus {}", a.data.display()))?;
    let out_dir = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("{}-seed{}", method.name(), cfg.seed)));
    fs::create_dir_all(&out_dir)?;
    let _lock = DirLock::acquire(&out_dir)?;

    let eval_set = match &a.eval_set {
        Some(path) => {
            let mut s = read_problems(path)?;
            s.truncate(a.eval_limit);
            s
        }
        None => Vec::new(),
    };
    let num_latent = if method.is_latent() { cfg.num_latent } else { 0 };
    let mut eval_opts = EvalOptions::for_method(method, num_latent);
    eval_opts.use_projection = cfg.use_projection;
    // Periodic eval is a progress signal; keep it cheap and greedy.
    eval_opts.samples = 1;
    eval_opts.temperature = 0.0;

    let meta = CheckpointMeta { step: 0, method: method.name().to_string(), num_latent };
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut observer = RunObserver {
        metrics: std::io::BufWriter::new(fs::File::create(&metrics_path)?),
        out_dir: out_dir.clone(),
        method,
        eval_set,
        eval_opts,
        eval_every: cfg.eval_every,
        save_every: a.save_every,
        meta: meta.clone(),
        tok: Tokenizer::new(),
    };

    let resume = match &a.resume {
        Some(path) => {
            let (model, opt, meta) = checkpoint::load::<Dtype>(path)?;
            let opt = opt.ok_or_else(|| {
                usage(format!("checkpoint {} has no optimizer state", path.display()))
            })?;
            Some(ResumeState { model, opt, step: meta.step })
        }
        None => None,
    };

    let tok = Tokenizer::new();
    let output = match baseline_kind(method) {
        None => {
            let items: Vec<TrainItem> = problems
                .iter()
                .map(|p| build_train_item(&tok, p, cfg.keep_final_step))
                .collect::<codi_core::error::Result<_>>()?;
            train_codi(&cfg, &items, &mut observer, resume)?
        }
        Some(kind) => train_baseline(kind, &cfg, &problems, &mut observer, resume)?,
    };
    observer.metrics.flush()?;

    let mut final_meta = meta;
    final_meta.step = output.total_steps;
    let ckpt_path = out_dir.join("checkpoint.bin");
    checkpoint::save(&ckpt_path, &output.model, Some(&output.opt), &final_meta)?;

    let mut manifest = RunManifest::new(invocation());
    manifest.method = Some(method.name().to_string());
    manifest.config = Some(cfg);
    manifest.corpus.push(CorpusFingerprint::from_file(&a.data)?);
    if let Some(es) = &a.eval_set {
        manifest.corpus.push(CorpusFingerprint::from_file(es)?);
    }
    manifest.outputs = vec![metrics_path, ckpt_path];
    manifest.write(&out_dir)?;

    let last = output.metrics.last().map_or(f64::NAN, |m| m.loss_total);
    println!(
        "trained {} for {} steps (final loss {:.4}); artifacts in {}",
        method.name(),
        output.total_steps,
        last,
        out_dir.display()
    );
    Ok(())
}

/// The invocation as typed, minus the binary path.
fn invocation() -> String {
    std::env::args().skip(1).collect::<Vec<_>>().join(" ")
}

/// Checkpoint directory manifest, when one exists.
fn manifest_config(checkpoint: &Path) -> Option<CodiConfig> {
    let dir = checkpoint.parent()?;
    RunManifest::read(dir).ok()?.config
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (model, _, meta) = checkpoint::load::<Dtype>(&a.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let problems = read_problems(&a.set)?;
    if problems.is_empty() {
        return Err(usage("eval set is empty"));
    }
    let method = match &a.method {
        Some(name) => method_of(name)?,
        None => method_of(&meta.method)?,
    };
    let cfg = manifest_config(&a.checkpoint);
    let num_latent = a
        .num_latent
        .unwrap_or(if meta.num_latent > 0 { meta.num_latent } else { 6 });
    let mut opts = EvalOptions::for_method(method, num_latent);
    if let Some(c) = &cfg {
        opts.use_projection = c.use_projection;
    }
    if a.no_projection {
        opts.use_projection = false;
    }
    if let Some(s) = a.samples {
        opts.samples = s;
    }
    if let Some(t) = a.temperature {
        opts.temperature = t;
    }
    opts.seed = a.seed;
    opts.comparator_avg_cot = a.comparator;

    let tok = Tokenizer::new();
    let report = evaluate(&model, &tok, &problems, method, &opts)?;

    let dataset = a
        .set
        .file_stem()
        .map_or_else(|| "set".to_string(), |s| s.to_string_lossy().into_owned());
    let out_dir = a
        .out
        .clone()
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let record = EvalRecord { method: method.name().to_string(), dataset: dataset.clone(), report };
    let json_path = out_dir.join(format!("eval-{}-{}.json", method.name(), dataset));
    fs::write(&json_path, serde_json::to_string_pretty(&record)?)?;
    let csv_path = out_dir.join(format!("eval-{}-{}.csv", method.name(), dataset));
    fs::write(
        &csv_path,
        format!("{CSV_HEADER}\n{}\n", record.report.csv_row(method.name(), &dataset)),
    )?;

    println!(
        "{}: accuracy {:.3}, reasoning {:.1} tokens, {:.1} passes, {:.1}ms/problem, compression {:.2}x",
        method.name(),
        record.report.accuracy,
        record.report.avg_reasoning_tokens,
        record.report.avg_forward_passes,
        1e3 * record.report.wall_time_per_problem,
        record.report.compression_ratio,
    );
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

fn probe(a: ProbeArgs) -> anyhow::Result<()> {
    let (model, _, meta) = checkpoint::load::<Dtype>(&a.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let mut problems = read_problems(&a.set)?;
    if problems.is_empty() {
        return Err(usage("probe set is empty"));
    }
    if a.index >= problems.len() {
        return Err(usage(format!("--index {} out of range ({} problems)", a.index, problems.len())));
    }
    let cfg = manifest_config(&a.checkpoint);
    let mut opts = ProbeOptions {
        num_latent: a
            .num_latent
            .unwrap_or(if meta.num_latent > 0 { meta.num_latent } else { 6 }),
        top_k: a.top_k,
        only_correct: !a.include_incorrect,
        ..ProbeOptions::default()
    };
    if let Some(c) = &cfg {
        opts.use_projection = c.use_projection;
    }
    if a.no_projection {
        opts.use_projection = false;
    }

    let tok = Tokenizer::new();
    let subject = problems[a.index].clone();
    problems.truncate(a.limit);
    let rates = intermediate_match_rate(&model, &tok, &problems, &opts)?;
    let report = probe_problem(&model, &tok, &subject, &opts, rates)?;

    let out_dir = a
        .out
        .clone()
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let json_path = out_dir.join("probe.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    let md_path = out_dir.join("probe.md");
    fs::write(&md_path, report.to_markdown())?;
    println!("{}", report.to_markdown());
    println!("wrote {} and {}", json_path.display(), md_path.display());
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut records: Vec<EvalRecord> = Vec::new();
    for input in &a.inputs {
        if input.is_dir() {
            let mut paths: Vec<PathBuf> = fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .map(|n| {
                            let n = n.to_string_lossy();
                            n.starts_with("eval-") && n.ends_with(".json")
                        })
                        .unwrap_or(false)
                })
                .collect();
            paths.sort();
            for p in paths {
                records.push(serde_json::from_str(&fs::read_to_string(&p)?)?);
            }
        } else {
            records.push(serde_json::from_str(&fs::read_to_string(input)?)?);
        }
    }
    if records.is_empty() {
        return Err(anyhow!("no eval reports under {:?}", a.inputs));
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.report.csv_row(&r.method, &r.dataset));
        csv.push('\n');
    }
    match &a.out {
        Some(path) => {
            fs::write(path, &csv)?;
            println!("wrote {} rows to {}", records.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
