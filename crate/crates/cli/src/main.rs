use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avmaster::ablation::{ablate, suite, Variant};
use avmaster::archive::{write_archive, FeatureArchive};
use avmaster::checkpoint::{load_checkpoint, save_checkpoint};
use avmaster::gradcheck::{gradcheck, GradcheckOptions};
use avmaster::objectives::{CombineMode, InferenceConfig};
use avmaster::params::declare;
use avmaster::synthetic::{Task, TaskSpec};
use avmaster::train::{evaluate, probe_focus_trajectory, DataInfo, EpochRecord, RunManifest, TrainConfig, Trainer};
use avmaster::types::Sample;
use avmaster::{AvMaster, Error, ModelConfig, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const MANIFEST: &str = "manifest.json";
const METRICS: &str = "metrics.ndjson";
const CHECKPOINT: &str = "checkpoint";

/// Data generation, training, evaluation and diagnostics for the avmaster model.
///
/// Structured output goes to stdout as JSON; logs go to stderr (RUST_LOG).
#[derive(Parser)]
#[command(name = "avm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic planted-signal archive.
    Gen(GenArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Score a trained run on a dataset.
    Eval(EvalArgs),
    /// Train and compare ablation variants.
    Ablate(AblateArgs),
    /// Accuracy when each focus-scan step's templates replace the final ones.
    Probe(ProbeArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
    /// Summarise a run, an archive or a configuration.
    Inspect(InspectArgs),
}

/// Contents of a `--config` file. Both sections are optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataSource {
    /// AVM-FEAT archive directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Task spec JSON; samples are generated in memory.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// Task spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Index of the first sample.
    #[arg(long, default_value_t = 0)]
    start: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: DataSource,
    /// Samples to generate with --spec.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint already in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Decoder {
    Qa,
    Ap,
    Vp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Combine {
    Add,
    Mul,
    Wadd,
}

impl From<Combine> for CombineMode {
    fn from(c: Combine) -> Self {
        match c {
            Combine::Add => CombineMode::Add,
            Combine::Mul => CombineMode::Mul,
            Combine::Wadd => CombineMode::WAdd,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    source: DataSource,
    /// Samples to generate with --spec.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// First index to generate with --spec, disjoint from training by default.
    #[arg(long, default_value_t = 1_000_000)]
    start: u64,
    /// Leave a decoder out of the combination; repeatable.
    #[arg(long, value_enum)]
    disable: Vec<Decoder>,
    /// How enabled decoder distributions are combined.
    #[arg(long, value_enum, default_value = "add")]
    combine: Combine,
}

#[derive(Args)]
struct AblateArgs {
    /// Named variant suite: components, sharing, combine, losses or segments.
    #[arg(long, required_unless_present = "variants")]
    suite: Option<String>,
    /// Comma-separated variant names, instead of a suite.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Run config JSON for the base model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task spec JSON (defaults to the built-in planted task).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    train_n: usize,
    #[arg(long, default_value_t = 500)]
    test_n: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    source: DataSource,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 1_000_000)]
    start: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config JSON; the built-in tiny configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Check at most this many entries per tensor; 0 checks all.
    #[arg(long, default_value_t = 0)]
    max_entries: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var("AVM_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("AVM_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn read_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut rc = match path {
        None => RunConfig::default(),
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
    };
    if let Some(seed) = seed_override()? {
        rc.model.seed = seed;
        rc.train.seed = seed;
    }
    rc.model.validate()?;
    Ok(rc)
}

fn read_spec(path: &Path) -> Result<TaskSpec> {
    let spec: TaskSpec =
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::Spec(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

struct Loaded {
    samples: Vec<Sample>,
    info: DataInfo,
    num_answers: Option<usize>,
}

fn load_source(source: &DataSource, n: usize, start: u64) -> Result<Loaded> {
    if let Some(dir) = &source.data {
        let archive = FeatureArchive::open(dir)?;
        let samples = archive.samples().collect::<Result<Vec<_>>>()?;
        let info = DataInfo::of(dir.display().to_string(), &samples);
        return Ok(Loaded {
            samples,
            info,
            num_answers: archive.manifest.num_answers,
        });
    }
    let path = source.spec.as_ref().expect("clap requires --data or --spec");
    let spec = read_spec(path)?;
    let num_answers = Some(spec.num_answers);
    let samples = Task::new(spec)?.generate(start, n);
    let info = DataInfo::of(format!("{} [{start}, {})", path.display(), start + n as u64), &samples);
    Ok(Loaded {
        samples,
        info,
        num_answers,
    })
}

/// Raw widths, sequence bounds and answer count come from the data.
fn fit_to_data(config: &mut ModelConfig, data: &Loaded) -> Result<()> {
    let first = data.samples.first().ok_or(Error::EmptyDataset)?;
    config.audio_width = first.audio.width();
    config.visual_width = first.visual.width();
    config.text_width = first.question.word.cols();
    config.max_segments = data.samples.iter().map(Sample::segments).max().unwrap_or(1);
    config.max_question_len = data.samples.iter().map(|s| s.question.tokens()).max().unwrap_or(1);
    let seen = data.samples.iter().map(|s| s.answer + 1).max().unwrap_or(1);
    config.num_answers = data.num_answers.unwrap_or(seen).max(seen);
    config.validate()
}

fn append_record(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(io_err(path))
}

fn cmd_gen(a: &GenArgs) -> Result<Value> {
    let spec = read_spec(&a.spec)?;
    let num_answers = spec.num_answers;
    let samples = Task::new(spec)?.generate(a.start, a.n);
    let manifest = write_archive(&samples, &a.out, Some(num_answers))?;
    let mut hist = vec![0usize; num_answers];
    for s in &samples {
        hist[s.answer] += 1;
    }
    Ok(json!({
        "out": a.out,
        "samples": manifest.samples.len(),
        "answers": hist,
        "sha256": DataInfo::of("", &samples).sha256,
    }))
}

fn cmd_train(a: &TrainArgs) -> Result<Value> {
    let data = load_source(&a.source, a.n, 0)?;
    let ckpt = a.out.join(CHECKPOINT);
    let metrics = a.out.join(METRICS);
    let (mut trainer, mut manifest) = if a.resume {
        let (trainer, manifest) = load_checkpoint(&ckpt)?;
        let manifest = manifest.ok_or_else(|| Error::Checkpoint("checkpoint carries no run manifest".into()))?;
        if manifest.data.sha256 != data.info.sha256 {
            return Err(Error::Config("resume data differs from the data the run was trained on".into()));
        }
        (trainer, manifest)
    } else {
        let mut rc = read_run_config(a.config.as_deref())?;
        fit_to_data(&mut rc.model, &data)?;
        if a.out.join(MANIFEST).exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume or choose another --out",
                a.out.display()
            )));
        }
        fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
        fs::write(&metrics, "").map_err(io_err(&metrics))?;
        let model = AvMaster::init(rc.model.clone(), rc.model.seed)?;
        let trainer = Trainer::new(model, rc.train)?;
        let manifest = RunManifest::new(&rc.model, &rc.train, data.info.clone());
        (trainer, manifest)
    };
    log::info!(
        "training {} parameters on {} samples from epoch {}",
        trainer.model.params.len(),
        data.samples.len(),
        trainer.epoch
    );
    trainer.fit(&data.samples, &mut manifest, |rec| append_record(&metrics, rec))?;
    save_checkpoint(&trainer, Some(&manifest), &ckpt)?;
    write_json(&a.out.join(MANIFEST), &manifest)?;
    log::info!("wall clock {:.1}s", manifest.wall_clock_secs);
    Ok(json!({
        "run": a.out,
        "epochs": manifest.epochs.len(),
        "final": manifest.epochs.last(),
        "data": manifest.data,
    }))
}

fn load_run(run: &Path) -> Result<AvMaster> {
    Ok(load_checkpoint(&run.join(CHECKPOINT))?.0.model)
}

fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let model = load_run(&a.run)?;
    let data = load_source(&a.source, a.n, a.start)?;
    let ic = InferenceConfig {
        enable_qa: !a.disable.contains(&Decoder::Qa),
        enable_ap: !a.disable.contains(&Decoder::Ap),
        enable_vp: !a.disable.contains(&Decoder::Vp),
        combine: a.combine.into(),
    };
    Ok(serde_json::to_value(evaluate(&model, &data.samples, &ic)?)?)
}

fn cmd_ablate(a: &AblateArgs) -> Result<Value> {
    let variants: Vec<Variant> = match &a.suite {
        Some(name) => suite(name)?,
        None => a.variants.iter().map(|v| v.parse()).collect::<Result<_>>()?,
    };
    let mut rc = read_run_config(a.config.as_deref())?;
    let spec = match &a.spec {
        Some(p) => read_spec(p)?,
        None => TaskSpec::default(),
    };
    spec.fit(&mut rc.model);
    let task = Task::new(spec)?;
    let train = task.generate(0, a.train_n);
    let test = task.generate(1_000_000, a.test_n);
    let seeds = match seed_override()? {
        Some(s) => vec![s],
        None => a.seeds.clone(),
    };
    let table = ablate(&rc.model, &rc.train, &train, &test, &variants, &seeds)?;
    if let Some(out) = &a.out {
        write_json(out, &table)?;
    }
    Ok(serde_json::to_value(table)?)
}

fn cmd_probe(a: &ProbeArgs) -> Result<Value> {
    let model = load_run(&a.run)?;
    let data = load_source(&a.source, a.n, a.start)?;
    let ic = InferenceConfig::default();
    let series = probe_focus_trajectory(&model, &data.samples, &ic)?;
    let eval = evaluate(&model, &data.samples, &ic)?;
    Ok(json!({ "series": series, "evaluation_accuracy": eval.accuracy }))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(Value, bool)> {
    let config = match &a.config {
        Some(p) => read_run_config(Some(p))?.model,
        None => {
            let mut c = ModelConfig::tiny();
            if let Some(seed) = seed_override()? {
                c.seed = seed;
            }
            c
        }
    };
    let opts = GradcheckOptions {
        tolerance: a.tolerance,
        max_entries: a.max_entries,
        batch: a.batch,
        seed: config.seed,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&config, &opts)?;
    let passed = report.passed;
    Ok((serde_json::to_value(report)?, passed))
}

fn param_summary(config: &ModelConfig) -> Value {
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in declare(config) {
        let e = groups.entry(s.group.to_string()).or_default();
        e.0 += 1;
        e.1 += s.rows * s.cols;
    }
    let total: usize = groups.values().map(|g| g.1).sum();
    json!({
        "total": total,
        "groups": groups
            .into_iter()
            .map(|(k, (tensors, scalars))| (k, json!({ "tensors": tensors, "scalars": scalars })))
            .collect::<serde_json::Map<_, _>>(),
    })
}

fn cmd_inspect(a: &InspectArgs) -> Result<Value> {
    if let Some(run) = &a.run {
        let (trainer, manifest) = load_checkpoint(&run.join(CHECKPOINT))?;
        return Ok(json!({
            "config": trainer.model.config,
            "parameters": param_summary(&trainer.model.config),
            "next_epoch": trainer.epoch,
            "optimizer_steps": trainer.opt.step,
            "variant": manifest.as_ref().and_then(|m| m.variant.clone()),
            "data": manifest.as_ref().map(|m| &m.data),
            "last_epoch": manifest.as_ref().and_then(|m| m.epochs.last()),
        }));
    }
    if let Some(dir) = &a.data {
        let archive = FeatureArchive::open(dir)?;
        let mut qtypes: BTreeMap<String, usize> = BTreeMap::new();
        let mut answers: BTreeMap<usize, usize> = BTreeMap::new();
        let mut shapes: BTreeMap<String, usize> = BTreeMap::new();
        for e in &archive.manifest.samples {
            *qtypes.entry(e.qtype.to_string()).or_default() += 1;
            *answers.entry(e.answer).or_default() += 1;
            let key = format!(
                "T={} L={} audio={} visual={} text={}",
                e.segments, e.tokens, e.widths.audio, e.widths.visual, e.widths.text
            );
            *shapes.entry(key).or_default() += 1;
        }
        return Ok(json!({
            "samples": archive.len(),
            "num_answers": archive.manifest.num_answers,
            "qtypes": qtypes,
            "answers": answers,
            "shapes": shapes,
        }));
    }
    let path = a.config.as_ref().expect("clap requires one target");
    let rc = read_run_config(Some(path))?;
    Ok(json!({
        "model": rc.model,
        "train": rc.train,
        "parameters": param_summary(&rc.model),
    }))
}

fn print(value: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?).map_err(io_err(Path::new("<stdout>")))
}

fn run(cli: Cli) -> Result<bool> {
    let (value, ok) = match &cli.command {
        Command::Gen(a) => (cmd_gen(a)?, true),
        Command::Train(a) => (cmd_train(a)?, true),
        Command::Eval(a) => (cmd_eval(a)?, true),
        Command::Ablate(a) => (cmd_ablate(a)?, true),
        Command::Probe(a) => (cmd_probe(a)?, true),
        Command::Gradcheck(a) => cmd_gradcheck(a)?,
        Command::Inspect(a) => (cmd_inspect(a)?, true),
    };
    print(&value)?;
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
