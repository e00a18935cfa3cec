//! The `inpaint` command: argument grammar, subcommand dispatch, run
//! manifests and the exit-code contract (0 ok, 1 usage, 2 runtime failure).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{info, warn, LevelFilter};
use serde_json::{json, Value};

use inpaint_core::eval::{evaluate, EvalOptions, EvalReport, Metric};
use inpaint_core::frequency::{checkerboard_score, ffl, ripple_score, spectrum_image};
use inpaint_core::gradsuite::{registry, run_case, GradOutcome};
use inpaint_core::io::{ingest_images, load_image, save_image, write_atomic};
use inpaint_core::masks::{generate_set, save_mask};
use inpaint_core::train::{
    load_dataset, resume_training, run_training, synth_item, CheckpointManifest, DataSource, TrainConfig,
};
use inpaint_core::{Error, MaskPolicy, MaskType};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "inpaint", version, about = "Inpainting laboratory: masks, training, evaluation and spectra")]
pub struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training configuration file (TOML); used by `train`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output of the run.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded hole masks as PBM files.
    GenMasks(GenMasksArgs),
    /// Write images of the procedural synthetic collection as PPM files.
    SynthData(SynthDataArgs),
    /// Train (or resume) a generator/discriminator pair.
    Train(TrainArgs),
    /// Score a checkpoint per mask type.
    Eval(EvalArgs),
    /// Spectrum images and artifact scores of input images.
    Spectrum(SpectrumArgs),
    /// Finite-difference checks of every loss and the generator.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenMasksArgs {
    /// Fix the mask type instead of drawing it from the policy.
    #[arg(long = "type")]
    pub kind: Option<MaskType>,
    /// lama, lama-plus or general.
    #[arg(long, default_value = "general")]
    pub policy: MaskPolicy,
    #[arg(long, default_value_t = 7)]
    pub count: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Total step count (overrides the configuration).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train on a directory of PPM/PGM images instead of synthetic data.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of images to score (all of them); defaults to the
    /// validation split of the checkpoint's configuration.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "general")]
    pub policy: MaskPolicy,
    /// Comma-separated: l1, psnr, ssim, proxy_fid, raw_checkerboard, raw_ripple.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<Metric>>,
    /// Earlier report; adds per-metric delta columns.
    #[arg(long)]
    pub baseline_report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Reference image for the focal frequency loss column.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run every registered check.
    #[arg(long)]
    pub all: bool,
    /// Run the named check (repeatable).
    #[arg(long = "case")]
    pub cases: Vec<String>,
    /// Print the registered check names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Outcome of a subcommand: files written and its exit status.
struct Run {
    outputs: Vec<PathBuf>,
    details: Value,
    exit: i32,
}

impl Run {
    fn ok(outputs: Vec<PathBuf>, details: Value) -> Self {
        Self {
            outputs,
            details,
            exit: EXIT_OK,
        }
    }
}

/// Parses `argv` (including the program name), runs it and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                return EXIT_OK;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", <Cli as clap::CommandFactory>::command().render_usage());
            }
            return EXIT_USAGE;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_target(false)
        .try_init();
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &args) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = <Cli as clap::CommandFactory>::command();
            let name = subcommand_name(&cli.command);
            let usage = cmd
                .find_subcommand_mut(name)
                .map(|s| s.render_usage())
                .unwrap_or_else(|| cmd.render_usage());
            eprintln!("{usage}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::GenMasks(_) => "gen-masks",
        Command::SynthData(_) => "synth-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Spectrum(_) => "spectrum",
        Command::Gradcheck(_) => "gradcheck",
    }
}

fn execute(cli: &Cli, args: &[String]) -> CliResult<i32> {
    let name = subcommand_name(&cli.command);
    if cli.config.is_some() && !matches!(cli.command, Command::Train(_)) {
        return Err(CliError::Usage(format!("--config applies to train, not {name}")));
    }
    if let Command::Gradcheck(g) = &cli.command {
        if g.list {
            for case in registry() {
                println!("{}", case.name);
            }
            return Ok(EXIT_OK);
        }
    }
    create_dir(&cli.out_dir)?;
    let seed = cli.seed.unwrap_or(0);
    let (config, run) = match &cli.command {
        Command::GenMasks(a) => gen_masks(a, seed, &cli.out_dir)?,
        Command::SynthData(a) => synth_data(a, seed, &cli.out_dir)?,
        Command::Train(a) => train(a, cli, &cli.out_dir)?,
        Command::Eval(a) => eval(a, seed, &cli.out_dir)?,
        Command::Spectrum(a) => spectrum(a, &cli.out_dir)?,
        Command::Gradcheck(a) => gradcheck(a, &cli.out_dir)?,
    };
    let manifest = json!({
        "command": name,
        "argv": args,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "out_dir": cli.out_dir,
        "config": config,
        "outputs": run.outputs,
        "exit_code": run.exit,
        "details": run.details,
    });
    write_json(&cli.out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(run.exit)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn gen_masks(a: &GenMasksArgs, seed: u64, out: &Path) -> CliResult<(Value, Run)> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let drawn = generate_set(a.policy, a.kind, a.count, a.size, seed)?;
    let mut outputs = Vec::new();
    let mut items = Vec::new();
    for (i, d) in drawn.iter().enumerate() {
        let path = out.join(format!("mask_{i:04}_{}.pbm", d.kind.name()));
        save_mask(&d.mask, &path)?;
        items.push(json!({
            "file": path.file_name().map(|n| n.to_string_lossy().into_owned()),
            "type": d.kind,
            "seed": d.seed,
            "coverage": d.mask.coverage(),
        }));
        outputs.push(path);
    }
    info!("wrote {} masks to {}", outputs.len(), out.display());
    let config = json!({
        "policy": a.policy,
        "type": a.kind,
        "count": a.count,
        "size": a.size,
        "seed": seed,
    });
    Ok((config, Run::ok(outputs, json!({ "masks": items }))))
}

fn synth_data(a: &SynthDataArgs, seed: u64, out: &Path) -> CliResult<(Value, Run)> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    if a.size < 2 {
        return Err(CliError::Usage("--size must be at least 2".into()));
    }
    let mut outputs = Vec::new();
    let mut items = Vec::new();
    for i in 0..a.count {
        let (class, image) = synth_item(i, a.size, seed);
        let class = json!(class);
        let label = class.as_str().unwrap_or("image");
        let path = out.join(format!("image_{i:04}_{label}.ppm"));
        save_image(&image, &path)?;
        items.push(json!({ "index": i, "class": class }));
        outputs.push(path);
    }
    info!("wrote {} images to {}", outputs.len(), out.display());
    let config = json!({ "count": a.count, "size": a.size, "seed": seed });
    Ok((config, Run::ok(outputs, json!({ "images": items }))))
}

fn resolve_train_config(a: &TrainArgs, cli: &Cli) -> CliResult<TrainConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_toml(&text).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(steps) = a.steps {
        config.steps = steps;
    }
    if let Some(dir) = &a.data {
        config.data_source = DataSource::Directory;
        config.data_dir = Some(dir.clone());
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

fn train(a: &TrainArgs, cli: &Cli, out: &Path) -> CliResult<(Value, Run)> {
    let (config, outcome, resumed_from) = match &a.resume {
        Some(ckpt) => {
            if cli.config.is_some() || cli.seed.is_some() || a.data.is_some() {
                return Err(CliError::Usage(
                    "--resume takes its configuration from the checkpoint; drop --config/--seed/--data".into(),
                ));
            }
            let (manifest, _) = inpaint_core::train::checkpoint::read(ckpt)?;
            let until = a.steps.unwrap_or(manifest.config.steps);
            if until < manifest.step {
                return Err(CliError::Usage(format!(
                    "--steps {until} is before the checkpoint's step {}",
                    manifest.step
                )));
            }
            let mut config = manifest.config.clone();
            config.steps = until;
            info!("resuming {} at step {} until {until}", ckpt.display(), manifest.step);
            (config, resume_training(ckpt, until, out)?, Some((ckpt.clone(), manifest)))
        }
        None => {
            let config = resolve_train_config(a, cli)?;
            info!("training {} steps into {}", config.steps, out.display());
            (config.clone(), run_training(&config, out)?, None)
        }
    };
    let toml_path = out.join("config.toml");
    write_atomic(&toml_path, config.to_toml()?.as_bytes())?;
    let mut checkpoints: Vec<PathBuf> = std::fs::read_dir(out)
        .map_err(|e| Error::io(out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    checkpoints.sort();
    let mut outputs = checkpoints;
    outputs.push(outcome.metrics.clone());
    outputs.push(toml_path);
    let details = json!({
        "final_checkpoint": outcome.final_checkpoint,
        "metrics": outcome.metrics,
        "resumed_from": resumed_from.as_ref().map(|(p, m): &(PathBuf, CheckpointManifest)| json!({
            "checkpoint": p,
            "step": m.step,
        })),
    });
    Ok((json!(config), Run::ok(outputs, details)))
}

fn eval(a: &EvalArgs, seed: u64, out: &Path) -> CliResult<(Value, Run)> {
    let (manifest, _) = inpaint_core::train::checkpoint::read(&a.checkpoint)?;
    let images = match &a.data {
        Some(dir) => {
            let ingested = ingest_images(dir, manifest.config.resolution, 1.0)?;
            for (name, reason) in &ingested.skipped {
                warn!("skipped {name}: {reason}");
            }
            ingested.train.into_iter().chain(ingested.val).map(|(_, t)| t).collect::<Vec<_>>()
        }
        None => load_dataset(&manifest.config)?.val,
    };
    let options = EvalOptions {
        policy: a.policy,
        seed,
        metrics: a.metrics.clone().unwrap_or_else(|| EvalOptions::default().metrics),
    };
    let mut report = evaluate(&a.checkpoint, &images, &options)?;
    if let Some(path) = &a.baseline_report {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        report = report.with_baseline(&EvalReport::from_json(&text)?);
    }
    let (json_path, table_path) = (out.join("report.json"), out.join("report.txt"));
    report.write(&json_path, &table_path)?;
    print!("{}", report.to_table());
    let config = json!({
        "checkpoint": a.checkpoint,
        "checkpoint_step": manifest.step,
        "data": a.data,
        "policy": a.policy,
        "seed": seed,
        "metrics": options.metrics,
        "baseline_report": a.baseline_report,
        "train_config": manifest.config,
    });
    let details = json!({ "images": report.images, "failures": report.failures });
    Ok((config, Run::ok(vec![json_path, table_path], details)))
}

fn spectrum(a: &SpectrumArgs, out: &Path) -> CliResult<(Value, Run)> {
    if !(a.alpha >= 0.0 && a.alpha.is_finite()) {
        return Err(CliError::Usage(format!("--alpha must be a finite value ≥ 0, got {}", a.alpha)));
    }
    let reference = a.reference.as_deref().map(load_image).transpose()?;
    let mut outputs = Vec::new();
    let mut records = Vec::new();
    for (i, path) in a.inputs.iter().enumerate() {
        let image = load_image(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let spec_path = out.join(format!("spectrum_{i:04}_{stem}.pgm"));
        save_image(&spectrum_image(&image)?.to_tensor(), &spec_path)?;
        let ffl_value = match &reference {
            Some(r) => Some(ffl(r, &image, a.alpha)?.value),
            None => None,
        };
        records.push(json!({
            "input": path,
            "spectrum": spec_path,
            "checkerboard_score": checkerboard_score(&image)?,
            "ripple_score": ripple_score(&image)?,
            "ffl": ffl_value,
        }));
        outputs.push(spec_path);
    }
    let record_path = out.join("spectrum.json");
    write_json(&record_path, &json!({ "reference": a.reference, "alpha": a.alpha, "records": records }))?;
    let mut table = format!("{:<32} {:>12} {:>12} {:>14}\n", "input", "checkerboard", "ripple", "ffl");
    for r in &records {
        let num = |k: &str| r[k].as_f64().map_or("n/a".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            table,
            "{:<32} {:>12} {:>12} {:>14}",
            r["input"].as_str().unwrap_or(""),
            num("checkerboard_score"),
            num("ripple_score"),
            num("ffl")
        );
    }
    print!("{table}");
    outputs.push(record_path);
    let config = json!({ "inputs": a.inputs, "reference": a.reference, "alpha": a.alpha });
    Ok((config, Run::ok(outputs, Value::Null)))
}

/// Aligned pass/fail table of gradient-check outcomes.
pub fn gradcheck_table(outcomes: &[GradOutcome]) -> String {
    let mut out = format!(
        "{:<18} {:>10} {:>12} {:>12} {:>6}\n",
        "check", "tolerance", "max_rel_err", "max_abs_err", "result"
    );
    for o in outcomes {
        let (rel, abs) = match &o.report {
            Some(r) => (format!("{:.3e}", r.max_rel_err), format!("{:.3e}", r.max_abs_err)),
            None => ("error".into(), "error".into()),
        };
        let status = if o.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{:<18} {:>10.0e} {:>12} {:>12} {:>6}", o.name, o.tolerance, rel, abs, status);
        if let Some(e) = &o.error {
            let _ = writeln!(out, "  {e}");
        }
    }
    out
}

fn gradcheck(a: &GradcheckArgs, out: &Path) -> CliResult<(Value, Run)> {
    let cases = registry();
    let selected: Vec<_> = if a.all {
        cases.iter().collect()
    } else if a.cases.is_empty() {
        return Err(CliError::Usage("gradcheck needs --all, --case NAME or --list".into()));
    } else {
        a.cases
            .iter()
            .map(|name| {
                cases
                    .iter()
                    .find(|c| c.name == name)
                    .ok_or_else(|| CliError::Usage(format!("unknown check {name:?}; see --list")))
            })
            .collect::<CliResult<_>>()?
    };
    let outcomes: Vec<GradOutcome> = selected.into_iter().map(run_case).collect();
    print!("{}", gradcheck_table(&outcomes));
    let passed = outcomes.iter().filter(|o| o.passed()).count();
    println!("{passed}/{} passed", outcomes.len());
    let path = out.join("gradcheck.json");
    write_json(&path, &json!(outcomes))?;
    let names: Vec<&str> = outcomes.iter().map(|o| o.name.as_str()).collect();
    let mut run = Run::ok(vec![path], json!({ "passed": passed, "total": outcomes.len() }));
    if passed != outcomes.len() {
        run.exit = EXIT_RUNTIME;
    }
    Ok((json!({ "all": a.all, "cases": names }), run))
}
