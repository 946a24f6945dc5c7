mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use config::{ConfigError, RunConfig};
use xvpr_core::convert::{convert_stream, merge_records};
use xvpr_core::evaluation::{evaluate, Mode};
use xvpr_core::event_io::{
    make_splits, parse_events, parse_geotags, read_manifest, write_manifest, Modality,
    SampleRecord, Split,
};
use xvpr_core::frame::load_frame;
use xvpr_core::gradcheck::{layer_suite, STEP, TOLERANCE};
use xvpr_core::model::{fingerprint_hex, Model};
use xvpr_core::retrieval::{build_db, format_results_csv, query, PlaceDatabase};
use xvpr_core::synth::generate;
use xvpr_core::training::{format_loss_log, train};

/// Event-camera to image place recognition.
#[derive(Parser, Debug)]
#[command(name = "xvpr", version)]
struct Cli {
    /// key=value config file applied over the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random choice (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render an event recording into frames and append them to a manifest.
    Convert(ConvertArgs),
    /// Assign geographically separated train/val/test splits.
    Split(SplitArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Encode the images of a manifest into a place database.
    BuildDb(BuildDbArgs),
    /// Look up one frame and print the ranked candidates as CSV.
    Query(QueryArgs),
    /// Compute Recall@N tables for the event queries of a manifest.
    Eval(EvalArgs),
    /// Write a seeded synthetic benchmark.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients of every layer.
    Gradcheck,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Event text file.
    #[arg(long)]
    events: PathBuf,
    /// Geotag track file.
    #[arg(long)]
    geotags: PathBuf,
    /// Directory for the frame files.
    #[arg(long)]
    out: PathBuf,
    /// Manifest to create or update (default: <out>/manifest.csv).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Prefix of frame names and record ids (default: the event file stem).
    #[arg(long)]
    stem: Option<String>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV (default: <out>.loss.csv).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildDbArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only images whose scenario tag matches.
    #[arg(long)]
    scenario: Option<String>,
    /// Only images in this split.
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frame file (.frm) or image.
    #[arg(long)]
    frame: PathBuf,
    #[arg(long, default_value = "event")]
    modality: Modality,
    /// Shortlist depth (default: the top_n config key).
    #[arg(long)]
    top_n: Option<usize>,
    /// Skip re-ranking.
    #[arg(long)]
    retrieval_only: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Retrieval,
    Hybrid,
    Both,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Split whose event records are the queries.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for `recall_<mode>.csv` and `.md` (default: print only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Overrides the places config key.
    #[arg(long)]
    places: Option<usize>,
    /// Comma-separated scenario tags; overrides the scenarios config key.
    #[arg(long)]
    scenarios: Option<String>,
}

/// A failure caused by how the tool was invoked rather than by its inputs.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn run_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for o in &cli.overrides {
        cfg.assign(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(threads) = cli.threads {
        cfg.set("threads", &threads.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_convert(cfg: &RunConfig, a: &ConvertArgs) -> anyhow::Result<()> {
    let stream = parse_events(&a.events)?;
    let track = parse_geotags(&a.geotags)?;
    let stem = match &a.stem {
        Some(s) => s.clone(),
        None => a
            .events
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Usage("cannot derive a stem from the event path; pass --stem".into()))?,
    };
    let records = convert_stream(
        &stream,
        &track,
        cfg.delta_t()?,
        &cfg.frame()?,
        &a.out,
        &stem,
    )?;
    if records.is_empty() {
        warn!(
            "{} holds no complete window; nothing written",
            a.events.display()
        );
        return Ok(());
    }
    let manifest = a
        .manifest
        .clone()
        .unwrap_or_else(|| a.out.join("manifest.csv"));
    let mut all = if manifest.exists() {
        read_manifest(&manifest)?
    } else {
        Vec::new()
    };
    let n = records.len();
    merge_records(&mut all, records);
    write_manifest(&manifest, &all)?;
    info!(
        "{n} frames written; manifest {} now has {} records",
        manifest.display(),
        all.len()
    );
    Ok(())
}

fn cmd_split(cfg: &RunConfig, a: &SplitArgs) -> anyhow::Result<()> {
    let records = read_manifest(&a.manifest)?;
    let split = make_splits(&records, cfg.splits()?)?;
    for s in [Split::Train, Split::Val, Split::Test] {
        info!(
            "{s}: {} records",
            split.iter().filter(|r| r.split == s).count()
        );
    }
    let dropped = records.len() - split.len();
    if dropped > 0 {
        info!("{dropped} boundary records dropped to keep the splits apart");
    }
    write_manifest(&a.out, &split)?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> anyhow::Result<()> {
    let records = read_manifest(&a.manifest)?;
    let outcome = train(&records, cfg.model()?, &cfg.train()?)?;
    outcome.model.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    fs::write(&log_path, format_loss_log(&outcome.log))
        .with_context(|| format!("writing {}", log_path.display()))?;
    info!(
        "best epoch {}; checkpoint {} ({})",
        outcome.best_epoch,
        a.out.display(),
        fingerprint_hex(&outcome.model.fingerprint())
    );
    Ok(())
}

fn cmd_build_db(a: &BuildDbArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let records: Vec<SampleRecord> = read_manifest(&a.manifest)?
        .into_iter()
        .filter(|r| r.modality == Modality::Image)
        .filter(|r| a.scenario.as_deref().is_none_or(|s| r.scenario() == s))
        .filter(|r| a.split.is_none_or(|s| r.split == s))
        .collect();
    let db = build_db(&records, &model)?;
    db.save(&a.out)?;
    info!("{} entries written to {}", db.len(), a.out.display());
    Ok(())
}

fn cmd_query(cfg: &RunConfig, a: &QueryArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let db = PlaceDatabase::load(&a.db)?;
    let frame = load_frame(
        &a.frame,
        Model::channels(a.modality),
        model.config.input_height,
        model.config.input_width,
    )?;
    let top_n = match a.top_n {
        Some(n) => n,
        None => cfg.get("top_n")?,
    };
    let result = query(
        &db,
        &model,
        &a.frame.display().to_string(),
        &frame,
        a.modality,
        top_n,
        !a.retrieval_only,
    )?;
    print!("{}", format_results_csv(&[result]));
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let db = PlaceDatabase::load(&a.db)?;
    let queries: Vec<SampleRecord> = read_manifest(&a.manifest)?
        .into_iter()
        .filter(|r| r.modality == Modality::Event && r.split == a.split)
        .collect();
    if queries.is_empty() {
        bail!(
            "{} has no event records in the {} split",
            a.manifest.display(),
            a.split
        );
    }
    let modes: &[Mode] = match a.mode {
        ModeArg::Retrieval => &[Mode::RetrievalOnly],
        ModeArg::Hybrid => &[Mode::Hybrid],
        ModeArg::Both => &[Mode::RetrievalOnly, Mode::Hybrid],
    };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for &mode in modes {
        let (table, _) = evaluate(&db, &model, &queries, &cfg.eval(mode)?)?;
        println!(
            "{mode} ({} queries)\n{}",
            queries.len(),
            table.to_markdown()
        );
        if let Some(dir) = &a.out {
            for (ext, text) in [("csv", table.to_csv()), ("md", table.to_markdown())] {
                let path = dir.join(format!("recall_{mode}.{ext}"));
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    if let Some(p) = a.places {
        cfg.set("places", &p.to_string())?;
    }
    if let Some(s) = &a.scenarios {
        cfg.set("scenarios", s)?;
    }
    let records = generate(&a.out, &cfg.synth()?)?;
    info!(
        "{} records written under {}",
        records.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> anyhow::Result<bool> {
    let report = layer_suite(cfg.seed()?, STEP)?;
    let mut ok = true;
    for c in &report {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<26} max relative error {:.3e}",
            c.layer, c.max_rel_error
        );
        ok &= c.passed();
    }
    println!("tolerance {TOLERANCE:e}, step {STEP:e}");
    Ok(ok)
}

/// Exit status: 0 success, 1 usage or configuration error, 2 data error.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<ConfigError>() || err.is::<Usage>() {
        1
    } else {
        2
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = run_config(cli)?;
    let threads = cfg.threads()?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Convert(a) => cmd_convert(&cfg, a)?,
        Command::Split(a) => cmd_split(&cfg, a)?,
        Command::Train(a) => cmd_train(&cfg, a)?,
        Command::BuildDb(a) => cmd_build_db(a)?,
        Command::Query(a) => cmd_query(&cfg, a)?,
        Command::Eval(a) => cmd_eval(&cfg, a)?,
        Command::Synth(a) => cmd_synth(&cfg, a)?,
        Command::Gradcheck => return cmd_gradcheck(&cfg),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
