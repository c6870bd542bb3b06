use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use lie_mem::checkpoint;
use lie_mem::config::{Overrides, RunConfig};
use lie_mem::evaluation::evaluate;
use lie_mem::models::{decode_cap, Decode, ModelKind};
use lie_mem::pca::pca_project;
use lie_mem::tasks::{generate, write_dataset, Regime, Task, TaskSpec};
use lie_mem::trace::{read_jsonl, write_jsonl, HeadKind, Phase};
use lie_mem::training::{grid_search, run_training_with, select_best, worker_threads, EvalPoint, Progress};
use lie_mem::{Error, Graph32, Model32};

/// Lie-access neural Turing machines: training, evaluation and trace tools.
#[derive(Parser, Debug)]
#[command(name = "lie-mem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write a checkpoint plus its run record.
    Train(Common),
    /// Score a checkpoint; prints a JSON report.
    Eval(EvalArgs),
    /// Run a hyperparameter grid and keep the best run.
    Grid(Common),
    /// Write task instances as `input<TAB>target` lines.
    GenData(GenArgs),
    /// Export memory accesses of one instance as JSON lines.
    Trace(TraceArgs),
    /// Project trace keys onto their principal components.
    Pca(PcaArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TaskArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// Smallest in-sample size.
    #[arg(long)]
    min: Option<usize>,
    /// Largest in-sample size.
    #[arg(long)]
    max: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// `in-sample` or `2x`.
    #[arg(long, default_value = "2x")]
    regime: String,
    /// Instances to score; defaults to the configured evaluation count.
    #[arg(long)]
    count: Option<usize>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value = "in-sample")]
    regime: String,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Seed of the traced instance.
    #[arg(long, default_value_t = 0)]
    instance_seed: u64,
    #[arg(long, default_value = "in-sample")]
    regime: String,
    #[arg(long, default_value = "trace.jsonl")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PcaArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Target dimension, 1 or 2.
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Failure::Usage(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Grid(a) => grid(a),
        Command::GenData(a) => gen_data(a),
        Command::Trace(a) => trace(a),
        Command::Pca(a) => pca(a),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: Option<u64>,
    version: &'static str,
    outputs: Vec<String>,
}

fn write_manifest(path: &Path, command: &str, config_text: &str, seed: Option<u64>, outputs: &[&Path]) -> Result<(), Failure> {
    let manifest = Manifest {
        command,
        config_sha256: hex::encode(Sha256::digest(config_text.as_bytes())),
        seed,
        version: env!("CARGO_PKG_VERSION"),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `file.ext` → `file.ext.manifest.json`.
fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn parse_task(s: &str) -> Result<Task, Failure> {
    Task::parse(s).ok_or_else(|| usage(format!("unknown task {s:?}")))
}

fn parse_model(s: &str) -> Result<ModelKind, Failure> {
    ModelKind::parse(s).ok_or_else(|| usage(format!("unknown model {s:?}")))
}

fn parse_regime(s: &str) -> Result<Regime, Failure> {
    Regime::parse(s).ok_or_else(|| usage(format!("unknown regime {s:?} (in-sample or 2x)")))
}

fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(usage(format!("config file {} not found", p.display())));
            }
            Ok(RunConfig::load(p, ov)?)
        }
        None => Ok(RunConfig::parse("", ov)?),
    }
}

fn common_config(a: &Common) -> Result<RunConfig, Failure> {
    let ov = Overrides {
        task: a.task.as_deref().map(parse_task).transpose()?,
        model: a.model.as_deref().map(parse_model).transpose()?,
        seed: a.seed,
    };
    load_config(a.config.as_deref(), &ov)
}

/// Task spec from flags, falling back to the config and then to `vocab`.
fn task_spec(a: &TaskArgs, vocab: Option<usize>) -> Result<(TaskSpec, RunConfig), Failure> {
    let ov = Overrides { task: a.task.as_deref().map(parse_task).transpose()?, model: None, seed: a.seed };
    let cfg = load_config(a.config.as_deref(), &ov)?;
    let mut spec = cfg.task.clone();
    if a.config.is_none() {
        if let Some(v) = vocab {
            spec.vocab = v;
        }
    }
    if let Some(v) = a.min {
        spec.min = v;
    }
    if let Some(v) = a.max {
        spec.max = v;
    }
    if let Some(v) = a.vocab {
        spec.vocab = v;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok((spec, cfg))
}

struct Log;

impl Progress for Log {
    fn eval(&mut self, p: &EvalPoint) {
        eprintln!("update {:>6}  fine {:.4}  coarse {:.4}", p.update, p.fine, p.coarse);
    }
}

fn train(a: Common) -> Result<(), Failure> {
    let cfg = common_config(&a)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (mut record, model) = run_training_with(&cfg.model, &cfg.train, &cfg.task, &mut Log)?;
    let ckpt = a.out.join("model.ckpt");
    checkpoint::save(&ckpt, &model)?;
    record.checkpoint = Some(ckpt.display().to_string());
    let runs = a.out.join("runs.jsonl");
    append_line(&runs, &record.to_json_line()?)?;
    let config_path = a.out.join("config.cfg");
    let text = cfg.to_flat_string()?;
    fs::write(&config_path, &text).context("writing config")?;
    write_manifest(&a.out.join("manifest.json"), "train", &text, Some(cfg.train.seed), &[&ckpt, &runs, &config_path])?;
    eprintln!("fine {:.4} coarse {:.4} after {} updates", record.fine, record.coarse, record.updates);
    if let Some(why) = &record.failed {
        return Err(Failure::Runtime(anyhow::anyhow!("run failed: {why}")));
    }
    Ok(())
}

fn append_line(path: &Path, line: &str) -> Result<(), Failure> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{line}").context("writing run record")?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let model: Model32 = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (spec, cfg) = task_spec(&a.task, Some(model.config().content_vocab))?;
    if spec.vocab != model.config().content_vocab {
        return Err(usage(format!("task vocabulary {} does not match the model's {}", spec.vocab, model.config().content_vocab)));
    }
    let regime = parse_regime(&a.regime)?;
    let count = a.count.unwrap_or(cfg.train.eval_count);
    let seed = a.task.seed.unwrap_or(cfg.train.eval_seed);
    let instances = generate(&TaskSpec { seed, ..spec.clone() }, count, regime)?;
    let report = evaluate(&model, Some(spec.task), &instances)?;
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    println!("{json}");
    if let Some(out) = &a.out {
        fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
        let text = format!("checkpoint = {:?}\nregime = {:?}\ncount = {count}\n{}", a.checkpoint.display().to_string(), a.regime, cfg.to_flat_string()?);
        write_manifest(&manifest_beside(out), "eval", &text, Some(seed), &[out])?;
    }
    Ok(())
}

fn grid(a: Common) -> Result<(), Failure> {
    let cfg = common_config(&a)?;
    let grid = cfg.grid.clone().unwrap_or_else(|| lie_mem::training::Grid::table(cfg.model.kind));
    let cells = grid.cells(&cfg.model, &cfg.train);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let runs = a.out.join("runs.jsonl");
    let threads = worker_threads();
    eprintln!("{} runs on {threads} workers", cells.len());
    let sink = |r: &lie_mem::training::RunRecord| {
        if let Ok(line) = r.to_json_line() {
            let _ = append_line(&runs, &line);
        }
        eprintln!("lr {} delay {} init {:?} seed {}: fine {:.4} coarse {:.4}", r.train.learning_rate, r.train.decay_delay, r.train.init, r.train.seed, r.fine, r.coarse);
    };
    let records = grid_search(&cells, &cfg.task, threads, sink)?;
    let best_path = a.out.join("best.json");
    match select_best(&records) {
        Some(best) => {
            let json = serde_json::to_string_pretty(best).map_err(anyhow::Error::from)?;
            fs::write(&best_path, json + "\n").context("writing best run")?;
        }
        None => return Err(Failure::Runtime(anyhow::anyhow!("every run failed"))),
    }
    let text = cfg.to_flat_string()?;
    write_manifest(&a.out.join("manifest.json"), "grid", &text, a.seed, &[&runs, &best_path])?;
    Ok(())
}

fn gen_data(a: GenArgs) -> Result<(), Failure> {
    let (spec, cfg) = task_spec(&a.task, None)?;
    let regime = parse_regime(&a.regime)?;
    let data = generate(&spec, a.count, regime)?;
    match &a.out {
        Some(out) => {
            let f = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
            write_dataset(std::io::BufWriter::new(f), &data)?;
            let text = format!("regime = {:?}\ncount = {}\n{}", a.regime, a.count, cfg.to_flat_string()?);
            write_manifest(&manifest_beside(out), "gen-data", &text, Some(spec.seed), &[out])?;
        }
        None => write_dataset(std::io::stdout().lock(), &data)?,
    }
    Ok(())
}

fn trace(a: TraceArgs) -> Result<(), Failure> {
    let model: Model32 = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (spec, cfg) = task_spec(&a.task, Some(model.config().content_vocab))?;
    let regime = parse_regime(&a.regime)?;
    let inst = generate(&TaskSpec { seed: a.instance_seed, ..spec }, 1, regime)?.remove(0);
    let mut g = Graph32::new();
    g.set_recording(false);
    let bound = model.params().bind(&mut g);
    let fwd = model.encode_decode(&mut g, &bound, &inst.input, Decode::Greedy { max_steps: decode_cap(inst.target.len()) }, true)?;
    let f = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_jsonl(std::io::BufWriter::new(f), &fwd.trace)?;
    let text = format!("checkpoint = {:?}\ninstance_seed = {}\n{}", a.checkpoint.display().to_string(), a.instance_seed, cfg.to_flat_string()?);
    write_manifest(&manifest_beside(&a.out), "trace", &text, Some(a.instance_seed), &[&a.out])?;
    eprintln!("{} events, {} memories", fwd.trace.len(), fwd.memory_len);
    Ok(())
}

#[derive(Serialize)]
struct Projected {
    phase: Phase,
    step: usize,
    head: HeadKind,
    coords: Vec<f64>,
}

fn pca(a: PcaArgs) -> Result<(), Failure> {
    if !(1..=2).contains(&a.dim) {
        return Err(usage("--dim must be 1 or 2"));
    }
    let f = fs::File::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?;
    let events = read_jsonl(BufReader::new(f))?;
    let keys: Vec<Vec<f64>> = events.iter().map(|e| e.key.clone()).collect();
    let proj = pca_project(&keys, a.dim)?;
    let mut text = String::new();
    for (e, c) in events.iter().zip(&proj.coords) {
        let row = Projected { phase: e.phase, step: e.step, head: e.head, coords: c.clone() };
        text.push_str(&serde_json::to_string(&row).map_err(anyhow::Error::from)?);
        text.push('\n');
    }
    match &a.out {
        Some(out) => {
            fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
            let cfg = format!("trace = {:?}\ndim = {}\n", a.trace.display().to_string(), a.dim);
            write_manifest(&manifest_beside(out), "pca", &cfg, a.seed, &[out])?;
        }
        None => print!("{text}"),
    }
    eprintln!("explained variance {:?}", proj.explained_variance);
    Ok(())
}
