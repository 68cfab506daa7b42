//! `srs` command-line runner.
//!
//! Every subcommand prints one JSON document on stdout. Failures print
//! `{"error": {"kind": ..., "message": ...}}` instead and exit nonzero.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use srs_core::data::{write_csv, SeriesFrame};
use srs_core::eval::{
    plugin_bench, prepare_data, read_json, run_ablation, run_experiment, run_seeds, sweep,
    viz_trace, write_artifacts, write_json, EvalError, ExperimentConfig, SelectBy, SweepParam,
    TraceRecord, CHECKPOINT_STEM, PROTOCOL_LOOKBACKS,
};
use srs_core::models::Ablation;

#[derive(Parser, Debug)]
#[command(
    name = "srs",
    version,
    about = "Selective representation space forecasting experiments"
)]
struct Cli {
    /// flat `key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override one config key; repeatable. `--model.patch_size 24` works too.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train, evaluate on the test split and write artifacts
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the configured test split
    Eval(EvalArgs),
    /// Train every ablation variant
    Ablate(AblateArgs),
    /// One run per value of a hyper-parameter
    Sweep(SweepArgs),
    /// Patch-transformer host with and without SRS over several seeds
    PluginBench(PluginArgs),
    /// Render a trace file as SVG
    Viz(VizArgs),
    /// Write the configured synthetic series as CSV
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// output directory (default: run.output_dir)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// repeat with seeds train.seed .. train.seed + k - 1 and report mean and std
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// run the benchmark lookbacks instead of a single one
    #[arg(long, value_name = "PARAM")]
    sweep: Option<String>,
    #[arg(long, value_name = "CRITERION")]
    select_best: Option<String>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// checkpoint stem or either of its files (default: <out>/checkpoint)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// comma-separated variants (default: all)
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[arg(long, value_name = "CRITERION")]
    select_best: Option<String>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct PluginArgs {
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    trace: PathBuf,
    /// SVG path (default: trace path with .svg)
    #[arg(long)]
    out: Option<PathBuf>,
    /// re-read context and target from the configured series
    #[arg(long)]
    with_source: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// CSV path
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<srs_core::data::DataError> for Failure {
    fn from(e: srs_core::data::DataError) -> Self {
        EvalError::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: "usage",
        message: message.into(),
    }
}

/// Rewrites `--a.b=v` and `--a.b v` into `--set a.b=v`.
fn expand_key_flags(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match key {
            Some(k) if k.contains('=') => out.extend(["--set".to_string(), k.to_string()]),
            Some(k) => {
                let v = it.next().unwrap_or_default();
                out.extend(["--set".to_string(), format!("{k}={v}")]);
            }
            None => out.push(a),
        }
    }
    out
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&cli.set)?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: &OutArg) -> PathBuf {
    out.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn paths(files: &[PathBuf]) -> Vec<String> {
    files.iter().map(|p| p.display().to_string()).collect()
}

fn select_by(arg: &Option<String>) -> Result<Option<SelectBy>, Failure> {
    arg.as_deref()
        .map(str::parse)
        .transpose()
        .map_err(Failure::from)
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value, Failure> {
    serde_json::to_value(v).map_err(|e| EvalError::from(e).into())
}

fn cmd_train(cfg: &ExperimentConfig, args: &TrainArgs) -> Result<Value, Failure> {
    let dir = out_dir(cfg, &args.out);
    let select = select_by(&args.select_best)?;
    if let Some(name) = &args.sweep {
        let param: SweepParam = name.parse()?;
        if param != SweepParam::Lookback {
            return Err(usage(format!(
                "train --sweep supports `lookback` only, got `{name}`; use `srs sweep` for others"
            )));
        }
        let table = sweep(cfg, param, &PROTOCOL_LOOKBACKS, select, Some(&dir))?;
        let path = dir.join("sweep.json");
        write_json(&path, &table)?;
        return Ok(json!({
            "command": "train",
            "output_dir": dir.display().to_string(),
            "sweep": to_value(&table)?,
            "best": table.selected_row().map(to_value).transpose()?,
        }));
    }
    if select.is_some() {
        return Err(usage("--select-best needs --sweep"));
    }
    if args.seeds > 1 {
        let summary = run_seeds(cfg, args.seeds, Some(&dir))?;
        write_json(&dir.join("seeds.json"), &summary)?;
        return Ok(
            json!({ "command": "train", "output_dir": dir.display().to_string(), "seeds": to_value(&summary)? }),
        );
    }
    let outcome = run_experiment(cfg)?;
    let files = write_artifacts(&dir, &outcome)?;
    Ok(json!({
        "command": "train",
        "output_dir": dir.display().to_string(),
        "config_hash": outcome.summary.config_hash,
        "metrics": to_value(&outcome.report)?,
        "best_epoch": outcome.summary.record.best_epoch,
        "stop": to_value(&outcome.summary.record.stop)?,
        "files": paths(&files),
    }))
}

fn checkpoint_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin" | "json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn cmd_eval(cfg: &ExperimentConfig, args: &EvalArgs) -> Result<Value, Failure> {
    let stem = match &args.checkpoint {
        Some(p) => checkpoint_stem(p),
        None => out_dir(cfg, &args.out).join(CHECKPOINT_STEM),
    };
    let report = srs_core::eval::evaluate_checkpoint(cfg, &stem)?;
    Ok(
        json!({ "command": "eval", "checkpoint": stem.display().to_string(), "metrics": to_value(&report)? }),
    )
}

fn cmd_ablate(cfg: &ExperimentConfig, args: &AblateArgs) -> Result<Value, Failure> {
    let variants = if args.variants.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        args.variants
            .iter()
            .map(|v| v.parse::<Ablation>().map_err(|e| usage(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    let dir = out_dir(cfg, &args.out);
    let table = run_ablation(cfg, &variants, Some(&dir))?;
    write_json(&dir.join("ablation.json"), &table)?;
    Ok(
        json!({ "command": "ablate", "output_dir": dir.display().to_string(), "ablation": to_value(&table)? }),
    )
}

fn cmd_sweep(cfg: &ExperimentConfig, args: &SweepArgs) -> Result<Value, Failure> {
    let param: SweepParam = args.param.parse()?;
    let dir = out_dir(cfg, &args.out);
    let table = sweep(
        cfg,
        param,
        &args.values,
        select_by(&args.select_best)?,
        Some(&dir),
    )?;
    write_json(&dir.join("sweep.json"), &table)?;
    Ok(json!({
        "command": "sweep",
        "output_dir": dir.display().to_string(),
        "sweep": to_value(&table)?,
        "best": table.selected_row().map(to_value).transpose()?,
    }))
}

fn cmd_plugin(cfg: &ExperimentConfig, args: &PluginArgs) -> Result<Value, Failure> {
    if args.seeds == 0 {
        return Err(usage("--seeds needs at least 1"));
    }
    let dir = out_dir(cfg, &args.out);
    let table = plugin_bench(cfg, args.seeds, Some(&dir))?;
    write_json(&dir.join("plugin.json"), &table)?;
    Ok(
        json!({ "command": "plugin-bench", "output_dir": dir.display().to_string(), "plugin": to_value(&table)? }),
    )
}

/// The prepared region holding the first traced window.
fn source_region(cfg: &ExperimentConfig, trace: &Path) -> Result<SeriesFrame, Failure> {
    let records: Vec<TraceRecord> = read_json(trace)?;
    let first = records
        .first()
        .ok_or_else(|| Failure::from(EvalError::Trace("trace file holds no records".into())))?;
    let data = prepare_data(cfg)?;
    let origin = first.window_origin;
    [data.test, data.val, data.train]
        .into_iter()
        .find(|r| origin >= r.offset && origin < r.offset + r.len())
        .ok_or_else(|| {
            EvalError::Trace(format!(
                "window {origin} lies outside the configured series"
            ))
            .into()
        })
}

fn cmd_viz(cfg: &ExperimentConfig, args: &VizArgs) -> Result<Value, Failure> {
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.trace.with_extension("svg"));
    let source = if args.with_source {
        Some(source_region(cfg, &args.trace)?)
    } else {
        None
    };
    let panels = viz_trace(&args.trace, source.as_ref(), &out)?;
    Ok(json!({ "command": "viz", "svg": out.display().to_string(), "panels": panels }))
}

fn cmd_synth(cfg: &ExperimentConfig, args: &SynthArgs) -> Result<Value, Failure> {
    let frame = srs_core::data::synth_generate(&cfg.synth_spec())?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    let file = std::fs::File::create(&args.out).map_err(|source| EvalError::Io {
        path: args.out.display().to_string(),
        source,
    })?;
    write_csv(&frame, std::io::BufWriter::new(file))?;
    Ok(json!({
        "command": "synth",
        "csv": args.out.display().to_string(),
        "length": frame.len(),
        "channels": frame.n_channels(),
    }))
}

fn run(cli: &Cli) -> Result<Value, Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Ablate(a) => cmd_ablate(&cfg, a),
        Command::Sweep(a) => cmd_sweep(&cfg, a),
        Command::PluginBench(a) => cmd_plugin(&cfg, a),
        Command::Viz(a) => cmd_viz(&cfg, a),
        Command::Synth(a) => cmd_synth(&cfg, a),
    }
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn fail(f: Failure, code: u8) -> ExitCode {
    emit(&json!({ "error": { "kind": f.kind, "message": f.message } }).to_string());
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_key_flags(std::env::args())) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = write!(std::io::stdout().lock(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(usage(e.render().to_string().trim_end()), 2),
    };
    match run(&cli) {
        Ok(v) => {
            emit(&serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(f) => fail(f, 1),
    }
}
