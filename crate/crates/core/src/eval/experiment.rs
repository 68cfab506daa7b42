use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{mean_std, MetricAccumulator, MetricReport};
use super::{EvalError, ExperimentConfig};
use crate::data::{
    load_csv, split, standardize, synth_generate, ChannelStats, CsvOptions, SeriesFrame, WindowSet,
};
use crate::models::{Ablation, Backbone, Forecaster};
use crate::patching::PatchGeometry;
use crate::srs::SelectionTrace;
use crate::train::{train, RunRecord};

pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_STEM: &str = "checkpoint";

/// Globally standardized series cut into chronological regions.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub name: String,
    pub train: SeriesFrame,
    pub val: SeriesFrame,
    pub test: SeriesFrame,
    pub stats: ChannelStats,
}

/// Loads (or generates) the series, truncates it to `max_rows`, z-scores it
/// with train-region statistics and splits it; each region must hold one
/// full window.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, EvalError> {
    let frame = match &cfg.data_path {
        Some(path) => load_csv(
            path,
            &CsvOptions {
                forward_fill: cfg.forward_fill,
                frequency: String::new(),
            },
        )?,
        None => synth_generate(&cfg.synth_spec())?,
    };
    let frame = match cfg.max_rows {
        Some(rows) if rows < frame.len() => frame.slice(0, rows),
        _ => frame,
    };
    let (frame, stats) = standardize(&frame, &cfg.split);
    let m = cfg.model_config();
    let (train, val, test) = split(&frame, &cfg.split, m.lookback + m.horizon)?;
    Ok(PreparedData {
        name: cfg.data_name.clone(),
        train,
        val,
        test,
        stats,
    })
}

/// Selection of one channel in one test window, with the data needed to plot it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub channel: usize,
    /// first context step, as an index into the full series
    pub window_origin: usize,
    /// start of each sampled patch in the padded context, in sampling order
    pub selected_starts: Vec<usize>,
    /// output slot `j` holds sampled patch `reassembly_order[j]`
    pub reassembly_order: Vec<usize>,
    pub scores: TraceScores,
    pub patch_size: usize,
    pub context: Vec<f64>,
    pub forecast: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceScores {
    /// winning selection score per sampling slot
    pub selection: Vec<f64>,
    /// reassembly score per sampled patch
    pub reassembly: Vec<f64>,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub config: std::collections::BTreeMap<String, String>,
    pub geometry: PatchGeometry,
    pub params: usize,
    pub record: RunRecord,
    pub data_stats: ChannelStats,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricReport,
    pub summary: RunSummary,
    pub traces: Vec<TraceRecord>,
    pub model: Forecaster<f32>,
}

/// Test metrics over every window of `set`, batch by batch.
pub fn evaluate_report(
    model: &Forecaster<f32>,
    set: &WindowSet<'_>,
    dataset: &str,
    batch_size: usize,
) -> Result<MetricReport, EvalError> {
    let mut acc = MetricAccumulator::new();
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = set.batch::<f32>(chunk);
        let (pred, _) = model.predict(&b.x)?;
        acc.add(&pred, &b.y)?;
    }
    let (mse, mae) = acc.finish();
    let cfg = model.config();
    Ok(MetricReport {
        dataset: dataset.to_string(),
        lookback: cfg.lookback,
        horizon: cfg.horizon,
        seed: model.seed(),
        ablation: cfg.ablation.to_string(),
        mse,
        mae,
        windows: set.len(),
        count: acc.count(),
        per_step: acc.per_step(),
    })
}

/// Traces of the first `windows` windows of `set` for every channel.
pub fn collect_traces(
    model: &Forecaster<f32>,
    set: &WindowSet<'_>,
    windows: usize,
) -> Result<Vec<TraceRecord>, EvalError> {
    let w = windows.min(set.len());
    if w == 0 {
        return Ok(Vec::new());
    }
    let idx: Vec<usize> = (0..w).collect();
    let b = set.batch::<f32>(&idx);
    let (pred, trace) = model.predict(&b.x)?;
    let Some(trace) = trace else {
        return Ok(Vec::new());
    };
    let n = set.channels();
    let (t, l) = (set.lookback, set.horizon);
    let p = model.geometry().patch_size;
    let mut out = Vec::with_capacity(w * n);
    for c in 0..n {
        for (wi, &origin) in b.origins.iter().enumerate() {
            let row = wi * n + c;
            out.push(trace_record(
                &trace,
                row,
                c,
                origin,
                p,
                &b.x.data()[row * t..(row + 1) * t],
                &pred.data()[row * l..(row + 1) * l],
                &b.y.data()[row * l..(row + 1) * l],
            ));
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn trace_record(
    trace: &SelectionTrace,
    row: usize,
    channel: usize,
    origin: usize,
    patch_size: usize,
    context: &[f32],
    forecast: &[f32],
    target: &[f32],
) -> TraceRecord {
    let k = trace.slots;
    let widen = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect();
    TraceRecord {
        channel,
        window_origin: origin,
        selected_starts: trace.row_selected(row).to_vec(),
        reassembly_order: trace.row_order(row).to_vec(),
        scores: TraceScores {
            selection: trace.select_scores[row * k..(row + 1) * k].to_vec(),
            reassembly: trace.reorder_scores[row * k..(row + 1) * k].to_vec(),
        },
        patch_size,
        context: widen(context),
        forecast: widen(forecast),
        target: widen(target),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pretty JSON written to `path`, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Trains one model, evaluates the test split and collects traces.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, EvalError> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let m = cfg.model_config();
    let train_set = WindowSet::new(&data.train, m.lookback, m.horizon, cfg.window_stride)?;
    let val_set = WindowSet::new(&data.val, m.lookback, m.horizon, 1)?;
    let test_set = WindowSet::new(&data.test, m.lookback, m.horizon, 1)?;
    let mut model = Forecaster::<f32>::new(m.clone(), cfg.train.seed)?;
    let mut record = train(&mut model, &train_set, &val_set, &cfg.train)?;
    let report = evaluate_report(&model, &test_set, &data.name, 64)?;
    record.test = Some(crate::train::Metrics {
        mse: report.mse,
        mae: report.mae,
        count: report.count,
    });
    let traces = collect_traces(&model, &test_set, cfg.trace_windows)?;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        config: cfg.to_map(),
        geometry: *model.geometry(),
        params: model.param_count(),
        record,
        data_stats: data.stats,
    };
    Ok(RunOutcome {
        report,
        summary,
        traces,
        model,
    })
}

/// Writes `metrics.json`, `run.json`, `trace-c<channel>.json` and the checkpoint into `dir`.
pub fn write_artifacts(dir: &Path, outcome: &RunOutcome) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = vec![dir.join(METRICS_FILE), dir.join(RUN_FILE)];
    write_json(&written[0], &outcome.report)?;
    write_json(&written[1], &outcome.summary)?;
    let mut channels: Vec<usize> = outcome.traces.iter().map(|t| t.channel).collect();
    channels.dedup();
    for c in channels {
        let records: Vec<&TraceRecord> = outcome.traces.iter().filter(|t| t.channel == c).collect();
        let path = dir.join(format!("trace-c{c}.json"));
        write_json(&path, &records)?;
        written.push(path);
    }
    let stem = dir.join(CHECKPOINT_STEM);
    outcome.model.save(&stem, &outcome.summary.config_hash)?;
    written.push(stem.with_extension("bin"));
    written.push(stem.with_extension("json"));
    Ok(written)
}

/// Re-evaluates a saved checkpoint on the test split described by `cfg`.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, stem: &Path) -> Result<MetricReport, EvalError> {
    let (model, manifest) = Forecaster::<f32>::load(stem)?;
    let mut cfg = cfg.clone();
    cfg.model = manifest.model.clone();
    cfg.stride = Some(manifest.model.stride);
    let data = prepare_data(&cfg)?;
    let test_set = WindowSet::new(
        &data.test,
        manifest.model.lookback,
        manifest.model.horizon,
        1,
    )?;
    evaluate_report(&model, &test_set, &data.name, 64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub params: usize,
    pub best_val_loss: f64,
    pub mse: f64,
    pub mae: f64,
    /// `1 - mse / mse(no_srs)`
    pub improvement_over_no_srs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub dataset: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }
}

/// Runs every ablation of the configured model; with `out`, each run writes
/// its artifacts under `out/<ablation>`.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    variants: &[Ablation],
    out: Option<&Path>,
) -> Result<AblationTable, EvalError> {
    let mut rows = Vec::new();
    for &a in variants {
        let mut c = cfg.clone();
        c.model.ablation = a;
        let outcome = run_experiment(&c)?;
        if let Some(dir) = out {
            write_artifacts(&dir.join(a.as_str()), &outcome)?;
        }
        rows.push(AblationRow {
            ablation: a,
            params: outcome.summary.params,
            best_val_loss: outcome.summary.record.best_val_loss,
            mse: outcome.report.mse,
            mae: outcome.report.mae,
            improvement_over_no_srs: f64::NAN,
        });
    }
    if let Some(base) = rows
        .iter()
        .find(|r| r.ablation == Ablation::NoSrs)
        .map(|r| r.mse)
    {
        for r in &mut rows {
            r.improvement_over_no_srs = 1.0 - r.mse / base;
        }
    }
    Ok(AblationTable {
        dataset: cfg.data_name.clone(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    PatchSize,
    Lookback,
    ScorerLayers,
    ScorerHidden,
}

impl SweepParam {
    pub const ALL: [SweepParam; 4] = [
        Self::PatchSize,
        Self::Lookback,
        Self::ScorerLayers,
        Self::ScorerHidden,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PatchSize => "patch_size",
            Self::Lookback => "lookback",
            Self::ScorerLayers => "scorer_layers",
            Self::ScorerHidden => "scorer_hidden",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Self::PatchSize => "model.patch_size",
            Self::Lookback => "model.lookback",
            Self::ScorerLayers => "model.scorer_layers",
            Self::ScorerHidden => "model.scorer_hidden",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let name = s.trim().trim_start_matches("model.");
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == name)
            .ok_or_else(|| EvalError::UnknownSweepParam {
                name: s.to_string(),
                valid: Self::ALL.map(Self::as_str).join(", "),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectBy {
    /// lowest best-epoch validation loss
    Val,
}

impl std::str::FromStr for SelectBy {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "val" => Ok(Self::Val),
            _ => Err(EvalError::Config(format!(
                "unknown selection criterion `{s}` (valid: val)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub best_val_loss: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
    pub select_by: Option<SelectBy>,
    /// index into `rows` of the selected run
    pub selected: Option<usize>,
}

impl SweepTable {
    pub fn selected_row(&self) -> Option<&SweepRow> {
        self.selected.map(|i| &self.rows[i])
    }
}

/// One run per value of `param`, each in `out/<param>-<value>` when `out` is given.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[usize],
    select_by: Option<SelectBy>,
    out: Option<&Path>,
) -> Result<SweepTable, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        c.set(param.key(), &v.to_string())?;
        let outcome = run_experiment(&c)?;
        if let Some(dir) = out {
            write_artifacts(&dir.join(format!("{}-{v}", param.as_str())), &outcome)?;
        }
        rows.push(SweepRow {
            value: v,
            best_val_loss: outcome.summary.record.best_val_loss,
            report: outcome.report,
        });
    }
    let selected = select_by.map(|SelectBy::Val| {
        (0..rows.len())
            .min_by(|&a, &b| rows[a].best_val_loss.total_cmp(&rows[b].best_val_loss))
            .expect("non-empty")
    });
    Ok(SweepTable {
        parameter: param,
        rows,
        select_by,
        selected,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub runs: Vec<MetricReport>,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

/// `k` runs with seeds `train.seed, train.seed + 1, ...`, summarized as mean and sample std.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    k: usize,
    out: Option<&Path>,
) -> Result<SeedSummary, EvalError> {
    if k == 0 {
        return Err(EvalError::Config("--seeds needs at least 1".into()));
    }
    let seeds: Vec<u64> = (0..k as u64).map(|i| cfg.train.seed + i).collect();
    let mut runs = Vec::with_capacity(k);
    for &s in &seeds {
        let mut c = cfg.clone();
        c.train.seed = s;
        let outcome = run_experiment(&c)?;
        if let Some(dir) = out {
            write_artifacts(&dir.join(format!("seed-{s}")), &outcome)?;
        }
        runs.push(outcome.report);
    }
    let (mse_mean, mse_std) = mean_std(&runs.iter().map(|r| r.mse).collect::<Vec<_>>());
    let (mae_mean, mae_std) = mean_std(&runs.iter().map(|r| r.mae).collect::<Vec<_>>());
    Ok(SeedSummary {
        seeds,
        runs,
        mse_mean,
        mse_std,
        mae_mean,
        mae_std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginRow {
    pub seed: u64,
    pub host_mse: f64,
    pub host_srs_mse: f64,
    pub host_mae: f64,
    pub host_srs_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginTable {
    pub dataset: String,
    pub rows: Vec<PluginRow>,
    /// seeds where the host with SRS has MSE no higher than the host alone
    pub srs_wins: usize,
}

/// Patch-transformer host with and without SRS over `seeds` consecutive seeds.
pub fn plugin_bench(
    cfg: &ExperimentConfig,
    seeds: usize,
    out: Option<&Path>,
) -> Result<PluginTable, EvalError> {
    let mut rows = Vec::with_capacity(seeds);
    for i in 0..seeds as u64 {
        let mut base = cfg.clone();
        base.model.backbone = Backbone::Transformer;
        base.train.seed = cfg.train.seed + i;
        let mut arms = Vec::with_capacity(2);
        for a in [Ablation::NoSrs, Ablation::Full] {
            let mut c = base.clone();
            c.model.ablation = a;
            let outcome = run_experiment(&c)?;
            if let Some(dir) = out {
                write_artifacts(
                    &dir.join(format!(
                        "seed-{}-{}",
                        base.train.seed,
                        if a == Ablation::Full { "srs" } else { "host" }
                    )),
                    &outcome,
                )?;
            }
            arms.push(outcome.report);
        }
        rows.push(PluginRow {
            seed: base.train.seed,
            host_mse: arms[0].mse,
            host_srs_mse: arms[1].mse,
            host_mae: arms[0].mae,
            host_srs_mae: arms[1].mae,
        });
    }
    let srs_wins = rows.iter().filter(|r| r.host_srs_mse <= r.host_mse).count();
    Ok(PluginTable {
        dataset: cfg.data_name.clone(),
        rows,
        srs_wins,
    })
}
