//! Command-line pipeline: synth → pretrain → metatrain → eval, plus the
//! finite-difference gradient audit.
//!
//! Exit codes: 0 success, 1 runtime failure (divergence, I/O, failed
//! gradient audit), 2 usage or validation error. Every command echoes its
//! fully resolved configuration to stderr so a run can be reproduced from
//! the log alone.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use motioncast::error::{Error, Result};
use motioncast::eval::evaluate;
use motioncast::gradcheck::{run_gradcheck, GradCheckConfig};
use motioncast::manifest::DatasetManifest;
use motioncast::meta::meta_train;
use motioncast::model::{config_diff, read_checkpoint, write_checkpoint, ModelConfig};
use motioncast::pretrain::pretrain;
use motioncast::runconfig::RunConfig;
use motioncast::seeds::rng_for;
use motioncast::split::{build_setup_split, SetupKind, SetupSpec};
use motioncast::synth::{gen_synthetic, tree_topology, SynthSpec};
use motioncast::{Model, ParamSet, SampleTask};

/// Seed stream tag for building per-entry self-supervised companions.
const TASK_STREAM: u64 = 0x7a5c;

#[derive(Parser)]
#[command(
    name = "motioncast",
    version,
    about = "Motion forecasting with self-supervised test-time adaptation"
)]
struct Cli {
    /// Worker threads for data-parallel sections (results are identical at
    /// any count; 1 forces fully sequential execution).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic kinematic-chain motion corpus
    Synth(SynthArgs),
    /// Jointly pre-train the forecast, scramble and repair branches
    Pretrain(PretrainArgs),
    /// Meta-auxiliary training from a pre-trained checkpoint
    Metatrain(MetatrainArgs),
    /// Evaluate a checkpoint on a held-out split, with or without adaptation
    Eval(EvalArgs),
    /// Audit analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the corpus (created if absent)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    categories: usize,
    #[arg(long, default_value_t = 3)]
    subjects: usize,
    /// Sequences per (category, subject) pair
    #[arg(long = "seqs-per", default_value_t = 20)]
    seqs_per: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 17)]
    joints: usize,
    /// Observed frames per sequence
    #[arg(long = "obs-len", default_value_t = 25)]
    obs_len: usize,
    /// Future frames per sequence
    #[arg(long, default_value_t = 25)]
    horizon: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
}

#[derive(Args)]
struct PretrainArgs {
    /// Corpus directory containing manifest.tsv
    #[arg(long)]
    data: PathBuf,
    /// key=value run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "learning-rate")]
    learning_rate: Option<f64>,
    /// Training log path (default: <out>.log.tsv)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct MetatrainArgs {
    /// Corpus directory containing manifest.tsv
    #[arg(long)]
    data: PathBuf,
    /// Pre-trained checkpoint to start from
    #[arg(long)]
    init: PathBuf,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// key=value run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inner (adaptation) learning rate α
    #[arg(long)]
    alpha: Option<f64>,
    /// Outer (meta) learning rate β
    #[arg(long)]
    beta: Option<f64>,
    /// Inner gradient steps per task during training
    #[arg(long = "inner-steps")]
    inner_steps: Option<usize>,
    /// first = ignore the inner Hessian, exact = differentiate through it
    #[arg(long)]
    order: Option<String>,
    #[arg(long = "meta-batch")]
    meta_batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training log path (default: <out>.log.tsv)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus directory containing manifest.tsv
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Split protocol: i|ii|iii|iv
    #[arg(long)]
    setup: String,
    /// Held-out subject (i/ii) or category (iii/iv) id
    #[arg(long)]
    holdout: String,
    /// key=value run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Adapt to each test sequence before forecasting
    #[arg(long, conflicts_with = "no_tta")]
    tta: bool,
    /// Disable adaptation (same as --steps 0)
    #[arg(long = "no-tta", conflicts_with = "steps")]
    no_tta: bool,
    /// Adaptation steps per sequence (implies --tta when > 0)
    #[arg(long)]
    steps: Option<usize>,
    /// Adaptation learning rate α
    #[arg(long)]
    alpha: Option<f64>,
    /// CSV report path; a .summary.json sidecar is written next to it
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "eval-seed", default_value_t = 0)]
    eval_seed: u64,
    /// Comma-separated forecast horizons in milliseconds
    #[arg(long, default_value = "80,160,320,400,1000")]
    horizons: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// key=value run configuration file (model defaults to the miniature)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probed entries per parameter group
    #[arg(long, default_value_t = 5)]
    entries: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            std::process::exit(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            std::process::exit(1);
        }
    }
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Diverged(_) | Error::Io { .. } => 1,
        _ => 2,
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Metatrain(a) => cmd_metatrain(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing {what}: {}",
            path.display()
        )))
    }
}

fn echo_config(run: &RunConfig) {
    eprint!("resolved configuration:\n{}", run.render());
}

/// Base config, optional file, then CLI overrides via (key, value) pairs.
fn resolve_config(
    base: RunConfig,
    file: Option<&Path>,
    overrides: &[(&str, Option<String>)],
) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = file {
        require_file(path, "config file")?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.apply(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(data: &Path) -> Result<DatasetManifest> {
    let manifest_path = data.join("manifest.tsv");
    require_file(&manifest_path, "manifest")?;
    DatasetManifest::read(&manifest_path)
}

fn load_tasks_for(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<SampleTask>> {
    manifest.load_tasks(
        cfg.model.obs_len,
        cfg.model.horizon,
        cfg.model.corruption_ratio,
        |i| rng_for(cfg.train.seed, &[TASK_STREAM, i as u64]),
    )
}

fn open_log(out_ckpt: &Path, explicit: Option<&Path>) -> Result<(PathBuf, BufWriter<File>)> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(format!("{}.log.tsv", out_ckpt.display())),
    };
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, BufWriter::new(file)))
}

/// The checkpoint's stored model config must survive the file/flag overlay
/// unchanged; any drift is reported key by key.
fn reject_config_drift(ckpt_cfg: &ModelConfig, resolved: &ModelConfig) -> Result<()> {
    let diff = config_diff(ckpt_cfg, resolved);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "model configuration disagrees with the checkpoint:\n  {}",
            diff.join("\n  ")
        )))
    }
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let spec = SynthSpec {
        n_categories: a.categories,
        n_subjects: a.subjects,
        seqs_per_pair: a.seqs_per,
        n_joints: a.joints,
        obs_len: a.obs_len,
        horizon: a.horizon,
        fps: a.fps,
        seed: a.seed,
    };
    spec.validate()?;
    eprint!(
        "resolved configuration:\ncategories={}\nsubjects={}\nseqs_per={}\njoints={}\n\
         obs_len={}\nhorizon={}\nfps={}\nseed={}\n",
        spec.n_categories,
        spec.n_subjects,
        spec.seqs_per_pair,
        spec.n_joints,
        spec.obs_len,
        spec.horizon,
        spec.fps,
        spec.seed
    );
    let manifest = gen_synthetic(&spec, &a.out)?;
    println!(
        "wrote {} sequences to {}",
        manifest.entries.len(),
        a.out.display()
    );
    Ok(0)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<i32> {
    let cfg = resolve_config(
        RunConfig::default(),
        a.config.as_deref(),
        &[
            ("seed", a.seed.map(|v| v.to_string())),
            ("epochs", a.epochs.map(|v| v.to_string())),
            ("batch_size", a.batch_size.map(|v| v.to_string())),
            ("learning_rate", a.learning_rate.map(|v| v.to_string())),
        ],
    )?;
    echo_config(&cfg);

    let manifest = load_corpus(&a.data)?;
    let topo = manifest.load_topology()?;
    let model = Model::new(cfg.model.clone(), topo)?;
    let tasks = load_tasks_for(&manifest, &cfg)?;
    let init = ParamSet::init(&cfg.model, cfg.train.seed);

    let (log_path, mut log) = open_log(&a.out, a.log.as_deref())?;
    let params = pretrain(&model, &tasks, &init, &cfg.train, &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    write_checkpoint(&a.out, &cfg.model, &params)?;
    println!("checkpoint written to {}", a.out.display());
    println!("training log written to {}", log_path.display());
    Ok(0)
}

fn cmd_metatrain(a: MetatrainArgs) -> Result<i32> {
    require_file(&a.init, "init checkpoint")?;
    let (ckpt_cfg, init_params) = read_checkpoint(&a.init)?;
    let base = RunConfig {
        model: ckpt_cfg.clone(),
        ..RunConfig::default()
    };
    let cfg = resolve_config(
        base,
        a.config.as_deref(),
        &[
            ("alpha", a.alpha.map(|v| v.to_string())),
            ("beta", a.beta.map(|v| v.to_string())),
            ("inner_steps_train", a.inner_steps.map(|v| v.to_string())),
            ("order", a.order.clone()),
            ("meta_batch", a.meta_batch.map(|v| v.to_string())),
            ("epochs", a.epochs.map(|v| v.to_string())),
            ("seed", a.seed.map(|v| v.to_string())),
        ],
    )?;
    reject_config_drift(&ckpt_cfg, &cfg.model)?;
    echo_config(&cfg);

    let manifest = load_corpus(&a.data)?;
    let topo = manifest.load_topology()?;
    let model = Model::new(cfg.model.clone(), topo)?;
    let tasks = load_tasks_for(&manifest, &cfg)?;

    let (log_path, mut log) = open_log(&a.out, a.log.as_deref())?;
    let params = meta_train(
        &model,
        &init_params,
        &tasks,
        &cfg.meta,
        cfg.train.epochs,
        cfg.train.eta,
        cfg.train.mu,
        cfg.train.seed,
        &mut log,
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    write_checkpoint(&a.out, &cfg.model, &params)?;
    println!("checkpoint written to {}", a.out.display());
    println!("training log written to {}", log_path.display());
    Ok(0)
}

fn parse_horizons(text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<u32>()
                .map_err(|_| Error::Config(format!("bad horizon {part:?} in --horizons")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::Config("--horizons lists no horizons".into()));
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    require_file(&a.ckpt, "checkpoint")?;
    let (ckpt_cfg, params) = read_checkpoint(&a.ckpt)?;
    let base = RunConfig {
        model: ckpt_cfg.clone(),
        ..RunConfig::default()
    };
    let mut cfg = resolve_config(
        base,
        a.config.as_deref(),
        &[("alpha", a.alpha.map(|v| v.to_string()))],
    )?;
    reject_config_drift(&ckpt_cfg, &cfg.model)?;

    let steps = if a.no_tta {
        0
    } else if let Some(s) = a.steps {
        s
    } else if a.tta {
        cfg.meta.tta_steps
    } else {
        0
    };
    cfg.meta.tta_steps = steps;
    echo_config(&cfg);
    eprintln!("adaptation: steps={} alpha={}", steps, cfg.meta.alpha);

    let kind = SetupKind::from_str(&a.setup)?;
    let setup = SetupSpec {
        kind,
        held_out_id: a.holdout.clone(),
    };
    let manifest = load_corpus(&a.data)?;
    let (_train_split, test_split) = build_setup_split(&manifest, &setup)?;

    let topo = manifest.load_topology()?;
    let model = Model::new(cfg.model.clone(), topo)?;
    let horizons = parse_horizons(&a.horizons)?;

    let report = evaluate(
        &model,
        &params,
        &test_split,
        &cfg.meta,
        &horizons,
        steps > 0,
        a.eval_seed,
        cfg.train.mu,
    )?;

    std::fs::write(&a.out, report.to_csv()).map_err(|e| Error::io(&a.out, e))?;
    let summary_path = PathBuf::from(format!("{}.summary.json", a.out.display()));
    let summary = serde_json::to_string_pretty(&report.summary())
        .map_err(|e| Error::Format(format!("cannot serialize summary: {e}")))?;
    std::fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;

    let overall = report.overall();
    println!(
        "evaluated {} sequences: overall MPJPE {:.3} mm",
        overall.n_sequences, overall.mean
    );
    println!("report written to {}", a.out.display());
    println!("summary written to {}", summary_path.display());
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if a.entries == 0 {
        return Err(Error::Config("--entries must be at least 1".into()));
    }
    let base = RunConfig {
        model: ModelConfig::miniature(),
        ..RunConfig::default()
    };
    let cfg = resolve_config(base, a.config.as_deref(), &[])?;
    echo_config(&cfg);

    let topo = tree_topology(cfg.model.n_joints)?;
    let model = Model::new(cfg.model.clone(), topo)?;
    let check = GradCheckConfig {
        seed: a.seed,
        entries_per_group: a.entries,
        eta: cfg.train.eta,
        mu: cfg.train.mu,
        ..GradCheckConfig::default()
    };
    let report = run_gradcheck(&model, &check)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(0)
    } else {
        eprintln!(
            "error: gradient audit failed for: {}",
            report.failing_groups().join(", ")
        );
        Ok(1)
    }
}
