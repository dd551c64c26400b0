use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalOptions, Evaluation, MetricsReport, ReportRow, Scores};
use crate::data::{MtsDataset, SplitKind};
use crate::error::{Error, Result};
use crate::meta::{self, MetaConfig, TrainOptions, TrainOutcome};
use crate::model::{Model, ModelConfig, ParamSet, Variant};
use crate::par;
use crate::rng::Rng;

/// Everything one seeded train-and-score run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub train: TrainOptions,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
}

impl Experiment {
    /// Model and its seeded initial parameters (`Rng::new(seed).substream(0)`).
    pub fn init(&self, seed: u64) -> Result<(Model, ParamSet)> {
        let model = Model::new(self.model.clone())?;
        let params = model.init_params(&mut Rng::new(seed).substream(0));
        Ok((model, params))
    }

    /// Trains on `substream(1)` of the seed, validates and scores with the
    /// seed itself.
    pub fn train(&self, ds: &MtsDataset, seed: u64) -> Result<(Model, TrainOutcome)> {
        let (model, init) = self.init(seed)?;
        let opts = TrainOptions {
            eval_seed: seed,
            ..self.train.clone()
        };
        let outcome = meta::train(&model, init, ds, &self.meta, &opts, &Rng::new(seed).substream(1))?;
        Ok((model, outcome))
    }

    pub fn run(&self, ds: &MtsDataset, seed: u64, split: SplitKind) -> Result<RunResult> {
        let (model, outcome) = self.train(ds, seed)?;
        let opts = EvalOptions {
            seed,
            ..self.eval.clone()
        };
        let evaluation = evaluate(&model, &outcome.params, ds, split, &opts)?;
        Ok(RunResult { outcome, evaluation })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub variant: String,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedianRow {
    pub variant: String,
    pub scores: Scores,
}

/// Seeded runs of several named variants on one dataset and split.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub runs: Vec<GridRun>,
    pub medians: Vec<MedianRow>,
}

impl Grid {
    pub fn median_of(&self, variant: &str) -> Option<&Scores> {
        self.medians.iter().find(|m| m.variant == variant).map(|m| &m.scores)
    }

    /// Per-run rows followed by one `median` row per variant.
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows: Vec<ReportRow> = self
            .runs
            .iter()
            .map(|r| ReportRow::new(r.variant.clone(), r.seed, &r.report.scores()))
            .collect();
        rows.extend(self.medians.iter().map(|m| ReportRow::new(m.variant.clone(), "median", &m.scores)));
        rows
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>12} {:>12} {:>12}", "variant", "seed", "mse", "mae", "mape_%");
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{:<24} {:>8} {:>12.6} {:>12.6} {:>12.4}",
                r.variant, r.seed, r.mse, r.mae, r.mape_percent
            );
        }
        s
    }
}

pub fn write_grid_csv<W: Write>(grid: &Grid, writer: W) -> Result<()> {
    super::write_report_rows(&grid.rows(), writer)
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and scores every `(variant, seed)` pair on `split`. Runs are
/// independent and may execute in parallel; output order is variant-major.
pub fn compare(ds: &MtsDataset, variants: &[(String, Experiment)], seeds: &[u64], split: SplitKind) -> Result<Grid> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if variants.is_empty() {
        return Err(Error::Config("at least one variant is required".into()));
    }
    let mut names: Vec<&str> = variants.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("variant names must be unique".into()));
    }
    let ns = seeds.len();
    let runs = par::try_map_indexed(variants.len() * ns, |i| {
        let (name, exp) = &variants[i / ns];
        let seed = seeds[i % ns];
        exp.run(ds, seed, split)
            .map(|r| GridRun {
                variant: name.clone(),
                seed,
                report: r.evaluation.report,
            })
            .map_err(|e| Error::Variant {
                variant: name.clone(),
                source: Box::new(e),
            })
    })?;
    let medians = variants
        .iter()
        .enumerate()
        .map(|(vi, (name, _))| {
            let rs = &runs[vi * ns..(vi + 1) * ns];
            let pick = |f: fn(&MetricsReport) -> f64| median(&rs.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
            MedianRow {
                variant: name.clone(),
                scores: Scores {
                    mse: pick(|r| r.mse),
                    mae: pick(|r| r.mae),
                    mape_percent: pick(|r| r.mape_percent),
                    n_points: pick(|r| r.n_points as f64).round() as usize,
                    n_excluded_mape: pick(|r| r.n_excluded_mape as f64).round() as usize,
                },
            }
        })
        .collect();
    Ok(Grid { runs, medians })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub disable_maml: bool,
    pub disable_mc_dropout: bool,
}

/// Full model, each component removed, and both removed.
pub fn ablation_variants() -> [AblationVariant; 4] {
    let v = |name, disable_maml, disable_mc_dropout| AblationVariant {
        name,
        disable_maml,
        disable_mc_dropout,
    };
    [
        v("full", false, false),
        v("no_maml", true, false),
        v("no_mc_dropout", false, true),
        v("no_maml_no_mc_dropout", true, true),
    ]
}

/// The four-variant ablation of an MMformer experiment, scored on the test
/// split.
pub fn run_ablation(ds: &MtsDataset, base: &Experiment, seeds: &[u64]) -> Result<Grid> {
    if base.model.variant != Variant::Mmformer {
        return Err(Error::Config(format!(
            "the ablation grid removes MMformer components; got variant {}",
            base.model.variant
        )));
    }
    let variants: Vec<(String, Experiment)> = ablation_variants()
        .iter()
        .map(|a| {
            let mut e = base.clone();
            e.model.disable_maml = a.disable_maml;
            e.model.disable_mc_dropout = a.disable_mc_dropout;
            (a.name.to_string(), e)
        })
        .collect();
    compare(ds, &variants, seeds, SplitKind::Test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chronological_split, normalize, toy};

    fn tiny() -> (MtsDataset, Experiment) {
        let raw = toy(2, 48, 2, |e, t, v| ((t as f64) * 0.4 + v as f64 + e as f64).sin() + 0.02 * t as f64);
        let ds = normalize(&chronological_split(&raw, 28, 10, 10).unwrap()).unwrap();
        let mut model = ModelConfig::new(Variant::Mmformer, 4, 2, 2);
        model.model_dim = 4;
        model.num_heads = 1;
        model.ffn_dim = 4;
        model.mc_passes = 2;
        let exp = Experiment {
            model,
            meta: MetaConfig {
                tasks_per_batch: 2,
                support_size: 2,
                query_size: 2,
                ..MetaConfig::default()
            },
            train: TrainOptions {
                epochs: 1,
                steps_per_epoch: 2,
                ..TrainOptions::default()
            },
            eval: EvalOptions::default(),
        };
        (ds, exp)
    }

    #[test]
    fn median_rule() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn flag_algebra() {
        let [full, a, b, both] = ablation_variants();
        assert!(!full.disable_maml && !full.disable_mc_dropout);
        assert_eq!(both.disable_maml, a.disable_maml || b.disable_maml);
        assert_eq!(both.disable_mc_dropout, a.disable_mc_dropout || b.disable_mc_dropout);
    }

    #[test]
    fn grid_shape_and_repeatability() {
        let (ds, exp) = tiny();
        let g1 = run_ablation(&ds, &exp, &[5]).unwrap();
        assert_eq!(g1.runs.len(), 4);
        assert_eq!(g1.rows().len(), 8);
        let g3 = run_ablation(&ds, &exp, &[1, 2, 3]).unwrap();
        assert_eq!(g3.rows().len(), 16);
        assert_eq!(g3, run_ablation(&ds, &exp, &[1, 2, 3]).unwrap());
        for r in &g3.runs {
            assert_eq!(r.report.n_points, g3.runs[0].report.n_points);
        }
    }

    #[test]
    fn rejects_non_mmformer_base() {
        let (ds, mut exp) = tiny();
        exp.model.variant = Variant::VariateTransformer;
        assert!(run_ablation(&ds, &exp, &[0]).is_err());
        assert!(run_ablation(&ds, &tiny().1, &[]).is_err());
    }
}
