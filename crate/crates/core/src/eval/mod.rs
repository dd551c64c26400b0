//! Scoring: MAE/MSE/MAPE over forecast windows, prediction dumps, and the
//! variant comparison / ablation grid.

mod ablation;
mod metrics;

pub use ablation::{
    ablation_variants, compare, median, run_ablation, write_grid_csv, AblationVariant, Experiment, Grid, GridRun,
    MedianRow, RunResult,
};
pub use metrics::{mae, mape, mse, MAPE_EPS};

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{make_windows, MtsDataset, SplitKind, WindowSample};
use crate::error::{Error, Result};
use crate::model::{Forecast, ForwardMode, Model, ParamSet};
use crate::par;
use crate::rng::Rng;

fn default_mape_eps() -> f64 {
    MAPE_EPS
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Average MC-dropout passes instead of one deterministic pass. Models
    /// without MC dropout score deterministically either way.
    #[serde(default = "yes")]
    pub mc: bool,
    /// Window stride; defaults to the horizon (non-overlapping targets).
    #[serde(default)]
    pub stride: Option<usize>,
    /// Score in raw units instead of normalized space.
    #[serde(default)]
    pub denormalized: bool,
    /// Forecast prefixes to score and average; empty means the full horizon.
    #[serde(default)]
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mape_eps")]
    pub mape_eps: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mc: true,
            stride: None,
            denormalized: false,
            horizons: Vec::new(),
            seed: 0,
            mape_eps: MAPE_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mse: f64,
    pub mae: f64,
    pub mape_percent: f64,
    pub n_points: usize,
    pub n_excluded_mape: usize,
}

impl Scores {
    pub fn compute(y: &[f64], y_hat: &[f64], eps: f64) -> Result<Self> {
        let (mape_percent, n_excluded_mape) = mape(y, y_hat, eps)?;
        Ok(Self {
            mse: mse(y, y_hat)?,
            mae: mae(y, y_hat)?,
            mape_percent,
            n_points: y.len(),
            n_excluded_mape,
        })
    }

    /// Metric-wise mean; counts are taken from the last entry.
    fn average(all: &[Scores]) -> Scores {
        let n = all.len() as f64;
        let last = &all[all.len() - 1];
        Scores {
            mse: all.iter().map(|s| s.mse).sum::<f64>() / n,
            mae: all.iter().map(|s| s.mae).sum::<f64>() / n,
            mape_percent: all.iter().map(|s| s.mape_percent).sum::<f64>() / n,
            n_points: last.n_points,
            n_excluded_mape: last.n_excluded_mape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScores {
    pub feature: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonScores {
    pub horizon: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: Option<String>,
    pub seed: u64,
    pub version: String,
    pub split: SplitKind,
    pub mc: bool,
    pub denormalized: bool,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub mape_percent: f64,
    pub n_points: usize,
    pub n_excluded_mape: usize,
    pub per_feature: Vec<FeatureScores>,
    pub per_horizon: Vec<HorizonScores>,
    pub meta: RunMeta,
}

impl MetricsReport {
    pub fn scores(&self) -> Scores {
        Scores {
            mse: self.mse,
            mae: self.mae,
            mape_percent: self.mape_percent,
            n_points: self.n_points,
            n_excluded_mape: self.n_excluded_mape,
        }
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>12} {:>12} {:>12} {:>9}", "scope", "mse", "mae", "mape_%", "points");
        let mut row = |name: &str, sc: &Scores| {
            let _ = writeln!(
                s,
                "{:<16} {:>12.6} {:>12.6} {:>12.4} {:>9}",
                name, sc.mse, sc.mae, sc.mape_percent, sc.n_points
            );
        };
        row("overall", &self.scores());
        for f in &self.per_feature {
            row(&f.feature, &f.scores);
        }
        if self.per_horizon.len() > 1 {
            for h in &self.per_horizon {
                row(&format!("horizon {}", h.horizon), &h.scores);
            }
        }
        s
    }
}

/// One row of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub entity: String,
    pub timestamp: String,
    pub feature: String,
    pub y_true: f64,
    pub y_pred: f64,
    pub mc_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<PredictionRow>,
}

/// Scores `model` on every window of `split`.
pub fn evaluate(model: &Model, params: &ParamSet, ds: &MtsDataset, split: SplitKind, opts: &EvalOptions) -> Result<Evaluation> {
    model.check_params(params)?;
    let mode = if opts.mc { ForwardMode::McInfer } else { ForwardMode::Deterministic };
    let c = model.config();
    evaluate_with(ds, split, c.lookback, c.horizon, opts, |w, rng| model.forecast(params, &w.input, mode, rng))
}

/// Scores an arbitrary predictor. Window `i` gets `Rng::new(seed).substream(i)`.
pub fn evaluate_with<F>(
    ds: &MtsDataset,
    split: SplitKind,
    lookback: usize,
    horizon: usize,
    opts: &EvalOptions,
    predictor: F,
) -> Result<Evaluation>
where
    F: Fn(&WindowSample, &Rng) -> Result<Forecast> + Sync + Send,
{
    let stride = opts.stride.unwrap_or(horizon);
    let windows = make_windows(ds, split, lookback, horizon, stride)?;
    if windows.is_empty() {
        return Err(Error::Input(format!(
            "{split:?} split yields no evaluation windows for lookback {lookback}, horizon {horizon}"
        )));
    }
    let horizons = if opts.horizons.is_empty() {
        vec![horizon]
    } else {
        let mut h = opts.horizons.clone();
        h.sort_unstable();
        h.dedup();
        if h[0] == 0 || h[h.len() - 1] > horizon {
            return Err(Error::Config(format!("evaluation horizons must lie in 1..={horizon}")));
        }
        h
    };
    let stats = if opts.denormalized {
        Some(
            ds.norm_stats()
                .ok_or_else(|| Error::Input("raw-unit metrics need a normalized dataset".into()))?
                .to_vec(),
        )
    } else {
        None
    };
    let root = Rng::new(opts.seed);
    let forecasts = par::try_map_indexed(windows.len(), |i| {
        let f = predictor(&windows[i], &root.substream(i as u64))?;
        if f.values.shape() != windows[i].target.shape() {
            return Err(Error::Input(format!(
                "forecast shape {:?} does not match target shape {:?}",
                f.values.shape(),
                windows[i].target.shape()
            )));
        }
        if !f.values.is_finite() {
            return Err(Error::Metric(format!("non-finite forecast for window {i}")));
        }
        Ok(f)
    })?;

    let nv = ds.dims().2;
    let scale = |v: usize, z: f64| stats.as_ref().map_or(z, |s| z * s[v].sigma + s[v].mu);
    let spread = |v: usize, z: f64| stats.as_ref().map_or(z, |s| z * s[v].sigma);

    // y[h][v] collects the points at forecast step h for feature v, window order
    let mut y = vec![vec![Vec::with_capacity(windows.len()); nv]; horizon];
    let mut y_hat = y.clone();
    let mut predictions = Vec::with_capacity(windows.len() * horizon * nv);
    for (w, f) in windows.iter().zip(&forecasts) {
        for h in 0..horizon {
            let t = w.target_start() + h;
            for v in 0..nv {
                let yt = scale(v, w.target.at(h, v));
                let yp = scale(v, f.values.at(h, v));
                y[h][v].push(yt);
                y_hat[h][v].push(yp);
                predictions.push(PredictionRow {
                    entity: ds.entities()[w.entity].clone(),
                    timestamp: ds.timestamps()[t].to_string(),
                    feature: ds.feature_names()[v].clone(),
                    y_true: yt,
                    y_pred: yp,
                    mc_std: f.mc_std.as_ref().map_or(0.0, |s| spread(v, s.at(h, v))),
                });
            }
        }
    }
    let gather = |src: &Vec<Vec<Vec<f64>>>, steps: usize, feature: Option<usize>| -> Vec<f64> {
        let mut out = Vec::new();
        // window-major, then step, then feature, matching the dump order
        for i in 0..windows.len() {
            for step in src.iter().take(steps) {
                for (v, col) in step.iter().enumerate() {
                    if feature.is_none_or(|f| f == v) {
                        out.push(col[i]);
                    }
                }
            }
        }
        out
    };
    let score = |steps: usize, feature: Option<usize>| {
        Scores::compute(&gather(&y, steps, feature), &gather(&y_hat, steps, feature), opts.mape_eps)
    };
    let per_horizon: Vec<HorizonScores> = horizons
        .iter()
        .map(|&h| Ok(HorizonScores { horizon: h, scores: score(h, None)? }))
        .collect::<Result<_>>()?;
    let per_feature = (0..nv)
        .map(|v| {
            let all: Vec<Scores> = horizons.iter().map(|&h| score(h, Some(v))).collect::<Result<_>>()?;
            Ok(FeatureScores {
                feature: ds.feature_names()[v].clone(),
                scores: Scores::average(&all),
            })
        })
        .collect::<Result<_>>()?;
    let overall = Scores::average(&per_horizon.iter().map(|h| h.scores.clone()).collect::<Vec<_>>());
    Ok(Evaluation {
        report: MetricsReport {
            mse: overall.mse,
            mae: overall.mae,
            mape_percent: overall.mape_percent,
            n_points: overall.n_points,
            n_excluded_mape: overall.n_excluded_mape,
            per_feature,
            per_horizon,
            meta: RunMeta {
                config_hash: None,
                seed: opts.seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                split,
                mc: opts.mc,
                denormalized: opts.denormalized,
                windows: windows.len(),
            },
        },
        predictions,
    })
}

pub fn write_predictions<W: Write>(rows: &[PredictionRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(["entity", "timestamp", "feature", "y_true", "y_pred", "mc_std"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// One line of the machine-readable report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub seed: String,
    pub mse: f64,
    pub mae: f64,
    pub mape_percent: f64,
    pub n_points: usize,
    pub n_excluded_mape: usize,
}

impl ReportRow {
    pub fn new(variant: impl Into<String>, seed: impl ToString, s: &Scores) -> Self {
        Self {
            variant: variant.into(),
            seed: seed.to_string(),
            mse: s.mse,
            mae: s.mae,
            mape_percent: s.mape_percent,
            n_points: s.n_points,
            n_excluded_mape: s.n_excluded_mape,
        }
    }
}

pub fn write_report_rows<W: Write>(rows: &[ReportRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
