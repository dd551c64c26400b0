use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mmforge::data::{
    self, chronological_split, impute_and_clip, integrity_check, load_csv, load_processed, normalize, save_processed,
    select_features, synth_generate, CsvSchema, MtsDataset, SplitKind, Timestamp,
};
use mmforge::eval::{self, write_grid_csv, write_predictions, write_report_rows, EvalOptions, ReportRow};
use mmforge::meta::{EpochRecord, TrainMode};
use mmforge::model::{ForwardMode, Model, ModelConfig, ParamSet};
use mmforge::rng::Rng;
use mmforge::tensor::Tensor;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, StepContext};

pub const CONFIG_FILE: &str = "config.resolved";
pub const CHECKPOINT_FILE: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const SYNTH_FILE: &str = "data.csv";

/// Output directory with the overwrite guard applied.
struct OutDir {
    path: PathBuf,
}

impl OutDir {
    /// Refuses to continue if any of `files` already exists, unless `force`.
    /// An existing resolved config is accepted when it is byte-identical to
    /// the one this run would write.
    fn prepare(cfg: &RunConfig, files: &[&str], force: bool) -> Result<Self, CliError> {
        let path = cfg.output_dir()?.to_path_buf();
        if !force {
            let resolved = cfg.to_toml()?;
            let clash: Vec<&str> = files
                .iter()
                .chain(std::iter::once(&CONFIG_FILE))
                .copied()
                .filter(|f| {
                    let p = path.join(f);
                    p.exists() && !(*f == CONFIG_FILE && fs::read_to_string(&p).is_ok_and(|t| t == resolved))
                })
                .collect();
            if !clash.is_empty() {
                return Err(CliError::Usage(format!(
                    "{} already contains {}; pass --force to overwrite",
                    path.display(),
                    clash.join(", ")
                )));
            }
        }
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        let out = Self { path };
        out.write(CONFIG_FILE, cfg.to_toml()?.as_bytes())?;
        Ok(out)
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.join(name);
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    fn write_with(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> mmforge::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }
}

fn processed_dataset(cfg: &RunConfig) -> Result<MtsDataset, CliError> {
    let dir = cfg
        .data
        .processed
        .as_deref()
        .ok_or_else(|| CliError::Usage("no processed dataset; pass --dataset or set data.processed".into()))?;
    let ds = load_processed(dir).step("loading processed dataset")?;
    if ds.norm_stats().is_none() || ds.split().is_none() {
        return Err(CliError::Usage(format!("{} is not a preprocessed dataset", dir.display())));
    }
    Ok(ds)
}

/// Fills `num_features` from the dataset, or checks that it matches.
fn resolve_features(model: &mut ModelConfig, ds: &MtsDataset) -> Result<(), CliError> {
    let v = ds.dims().2;
    if model.num_features == 0 {
        model.num_features = v;
    } else if model.num_features != v {
        return Err(CliError::Usage(format!(
            "model.num_features is {} but the dataset has {v} features",
            model.num_features
        )));
    }
    Ok(())
}

fn load_checkpoint(model: &Model, path: &Path) -> Result<ParamSet, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let params = ParamSet::load(path).step("reading checkpoint")?;
    model
        .check_params(&params)
        .map_err(|e| CliError::Usage(format!("checkpoint {} does not fit the model configuration: {e}", path.display())))?;
    Ok(params)
}

fn checkpoint_path(cfg: &RunConfig, given: Option<PathBuf>) -> Result<PathBuf, CliError> {
    match given {
        Some(p) => Ok(p),
        None => Ok(cfg.output_dir()?.join(CHECKPOINT_FILE)),
    }
}

pub fn synth(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let s = &cfg.synth;
    let out = OutDir::prepare(cfg, &[SYNTH_FILE], force)?;
    let ds = synth_generate(s.entities, s.length, &s.spec, cfg.seed).step("generating")?;
    out.write_with(SYNTH_FILE, |b| data::write_csv(&ds, b))?;
    let (e, t, v) = ds.dims();
    println!("wrote {} ({e} entities × {t} steps × {v} features)", out.join(SYNTH_FILE).display());
    Ok(())
}

#[derive(Serialize)]
struct PreprocessReport<'a> {
    config_hash: String,
    entities: usize,
    timesteps: usize,
    features: Vec<String>,
    dropped_features: Vec<String>,
    split: (usize, usize, usize),
    imputed: usize,
    clipped: usize,
    per_feature: &'a [data::FeatureCleaning],
    integrity: data::IntegrityReport,
}

pub const PREPROCESS_REPORT: &str = "preprocess_report.json";

pub fn preprocess(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let d = &cfg.data;
    let raw = d
        .raw
        .as_deref()
        .ok_or_else(|| CliError::Usage("no raw dataset; pass --dataset or set data.raw".into()))?;
    let files = [data::PROCESSED_VALUES, data::NORM_STATS, data::DATASET_META, PREPROCESS_REPORT];
    let out = OutDir::prepare(cfg, &files, force)?;
    let schema = CsvSchema {
        entity: d.entity_column.clone(),
        timestamp: d.timestamp_column.clone(),
    };
    let loaded = load_csv(raw, &schema).step("load_csv")?;
    let (cleaned, cleaning) = impute_and_clip(&loaded, d.outlier_z).step("impute_and_clip")?;
    let selected = match d.min_relative_spread {
        Some(m) => select_features(&cleaned, m).step("select_features")?,
        None => cleaned,
    };
    let dropped = loaded
        .feature_names()
        .iter()
        .filter(|f| !selected.feature_names().contains(f))
        .cloned()
        .collect();
    let lengths = d.split_lengths(selected.dims().1)?;
    let split = chronological_split(&selected, lengths.0, lengths.1, lengths.2).step("chronological_split")?;
    let normalized = normalize(&split).step("normalize")?;
    let integrity = integrity_check(&normalized).step("integrity_check")?;
    save_processed(&normalized, &out.path).step("saving")?;
    let (entities, timesteps, _) = normalized.dims();
    out.write_json(
        PREPROCESS_REPORT,
        &PreprocessReport {
            config_hash: cfg.hash(),
            entities,
            timesteps,
            features: normalized.feature_names().to_vec(),
            dropped_features: dropped,
            split: lengths,
            imputed: cleaning.total_imputed(),
            clipped: cleaning.total_clipped(),
            per_feature: &cleaning.features,
            integrity,
        },
    )?;
    println!(
        "preprocessed {entities} entities × {timesteps} steps: {} imputed, {} clipped, split {}/{}/{}",
        cleaning.total_imputed(),
        cleaning.total_clipped(),
        lengths.0,
        lengths.1,
        lengths.2
    );
    Ok(())
}

fn history_csv(mode: TrainMode, history: &[EpochRecord]) -> Vec<u8> {
    let mut s = format!("epoch,{},val_mse\n", mode.loss_column());
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_mse));
    }
    s.into_bytes()
}

#[derive(Serialize)]
struct TrainSummary {
    config_hash: String,
    mode: TrainMode,
    parameters: usize,
    best_epoch: Option<usize>,
    best_val_mse: Option<f64>,
}

pub const TRAIN_SUMMARY: &str = "train_summary.json";

pub fn train(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let ds = processed_dataset(cfg)?;
    let mut cfg = cfg.clone();
    resolve_features(&mut cfg.model, &ds)?;
    let out = OutDir::prepare(&cfg, &[CHECKPOINT_FILE, HISTORY_FILE, TRAIN_SUMMARY], force)?;
    let exp = cfg.experiment();
    let (model, outcome) = match exp.train(&ds, cfg.seed) {
        Ok(r) => r,
        Err(mmforge::Error::Diverged { epoch, history, source }) => {
            let mode = if cfg.model.uses_maml() { TrainMode::Meta } else { TrainMode::Plain };
            out.write(HISTORY_FILE, &history_csv(mode, &history))?;
            return Err(CliError::Core(mmforge::Error::Diverged { epoch, history, source }));
        }
        Err(e) => return Err(CliError::Step { step: "training", source: e }),
    };
    outcome.params.save(out.join(CHECKPOINT_FILE)).step("writing checkpoint")?;
    out.write(HISTORY_FILE, &history_csv(outcome.mode, &outcome.history))?;
    let best_val_mse = outcome.best_epoch.map(|e| outcome.history[e - 1].val_mse);
    out.write_json(
        TRAIN_SUMMARY,
        &TrainSummary {
            config_hash: cfg.hash(),
            mode: outcome.mode,
            parameters: model.config().param_count(),
            best_epoch: outcome.best_epoch,
            best_val_mse,
        },
    )?;
    match (outcome.best_epoch, best_val_mse) {
        (Some(e), Some(v)) => println!(
            "trained {} ({:?} path, {} parameters): best val_mse {v:.6} at epoch {e}",
            model.config().variant,
            outcome.mode,
            model.config().param_count()
        ),
        _ => println!("no epochs run; checkpoint holds the initial parameters"),
    }
    Ok(())
}

pub const REPORT_JSON: &str = "report.json";

pub struct EvaluateArgs {
    pub checkpoint: Option<PathBuf>,
    pub split: SplitKind,
}

pub fn evaluate(cfg: &RunConfig, args: EvaluateArgs, force: bool) -> Result<(), CliError> {
    let ds = processed_dataset(cfg)?;
    let mut cfg = cfg.clone();
    resolve_features(&mut cfg.model, &ds)?;
    let model = Model::new(cfg.model.clone())?;
    let ckpt = checkpoint_path(&cfg, args.checkpoint)?;
    let params = load_checkpoint(&model, &ckpt)?;
    let out = OutDir::prepare(&cfg, &[REPORT_FILE, REPORT_JSON, PREDICTIONS_FILE], force)?;
    let opts = EvalOptions {
        seed: cfg.seed,
        ..cfg.eval.clone()
    };
    let mut ev = eval::evaluate(&model, &params, &ds, args.split, &opts).step("evaluating")?;
    ev.report.meta.config_hash = Some(cfg.hash());
    let row = ReportRow::new(cfg.model.variant.to_string(), cfg.seed, &ev.report.scores());
    out.write_with(REPORT_FILE, |b| write_report_rows(&[row], b))?;
    out.write_json(REPORT_JSON, &ev.report)?;
    out.write_with(PREDICTIONS_FILE, |b| write_predictions(&ev.predictions, b))?;
    print!("{}", ev.report.table());
    Ok(())
}

pub fn ablate(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let ds = processed_dataset(cfg)?;
    let mut cfg = cfg.clone();
    resolve_features(&mut cfg.model, &ds)?;
    let seeds = if cfg.ablate.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.ablate.seeds.clone()
    };
    let out = OutDir::prepare(&cfg, &[REPORT_FILE], force)?;
    let grid = eval::run_ablation(&ds, &cfg.experiment(), &seeds).step("ablation")?;
    out.write_with(REPORT_FILE, |b| write_grid_csv(&grid, b))?;
    print!("{}", grid.table());
    Ok(())
}

pub struct ForecastArgs {
    pub checkpoint: Option<PathBuf>,
    pub entity: String,
    pub from: String,
}

#[derive(Serialize)]
struct ForecastRow<'a> {
    entity: &'a str,
    timestamp: String,
    feature: &'a str,
    y_pred: f64,
    mc_std: f64,
}

pub fn forecast(cfg: &RunConfig, args: ForecastArgs, force: bool) -> Result<(), CliError> {
    let ds = processed_dataset(cfg)?;
    let mut cfg = cfg.clone();
    resolve_features(&mut cfg.model, &ds)?;
    let model = Model::new(cfg.model.clone())?;
    let ckpt = checkpoint_path(&cfg, args.checkpoint)?;
    let params = load_checkpoint(&model, &ckpt)?;
    let e = ds.entity_index(&args.entity).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown entity {:?}; available: {}",
            args.entity,
            ds.entities().join(", ")
        ))
    })?;
    let from: Timestamp = args.from.parse()?;
    let (_, nt, nv) = ds.dims();
    let t0 = (0..=nt)
        .find(|&t| ds.timestamp_at(t) == from)
        .ok_or_else(|| CliError::Usage(format!("timestamp {from} is not on the dataset time axis")))?;
    let l = cfg.model.lookback;
    if t0 < l {
        return Err(CliError::Usage(format!(
            "forecasting from {from} needs {l} steps of history; only {t0} are available"
        )));
    }
    let out = OutDir::prepare(&cfg, &[FORECAST_FILE], force)?;
    let mut window = Vec::with_capacity(l * nv);
    for t in t0 - l..t0 {
        window.extend((0..nv).map(|v| ds.value(e, t, v)));
    }
    let x = Tensor::new(vec![l, nv], window).map_err(mmforge::Error::from)?;
    let mode = if cfg.eval.mc { ForwardMode::McInfer } else { ForwardMode::Deterministic };
    let mut f = model.forecast(&params, &x, mode, &Rng::new(cfg.seed)).step("forecasting")?;
    let stats = ds.norm_stats().expect("checked when loading").to_vec();
    f.denormalize(&stats);
    let raw = f.denormalized.as_ref().expect("just filled");
    let mut w = csv::Writer::from_writer(Vec::new());
    for h in 0..cfg.model.horizon {
        for v in 0..nv {
            w.serialize(ForecastRow {
                entity: &args.entity,
                timestamp: ds.timestamp_at(t0 + h).to_string(),
                feature: &ds.feature_names()[v],
                y_pred: raw.at(h, v),
                mc_std: f.mc_std.as_ref().map_or(0.0, |s| s.at(h, v) * stats[v].sigma),
            })
            .map_err(mmforge::Error::from)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    out.write(FORECAST_FILE, &bytes)?;
    std::io::stdout().write_all(&bytes).map_err(|e| CliError::io("<stdout>", e))?;
    Ok(())
}
