//! Entity × time × feature cubes, preprocessing, splits and windows.

mod io;
mod preprocess;
mod synth;
mod window;

pub use io::{
    load_csv, load_processed, read_csv, read_norm_stats, save_processed, write_csv, write_norm_stats, CsvSchema, DATASET_META,
    NORM_STATS, PROCESSED_VALUES,
};
pub use preprocess::{impute_and_clip, rank_features, select_features, FeatureCleaning, FeatureRank, ImputeReport};
pub use synth::{synth_generate, FeatureSpec, SynthSpec};
pub use window::{make_windows, window_count, WindowSample};

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time axis label: an integer step index or an ISO-8601 calendar date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timestamp {
    Index(i64),
    Date(NaiveDate),
}

impl Timestamp {
    /// Position on a common integer axis (days for dates).
    pub fn ordinal(self) -> i64 {
        match self {
            Timestamp::Index(i) => i,
            Timestamp::Date(d) => i64::from(chrono::Datelike::num_days_from_ce(&d)),
        }
    }

    pub fn same_kind(self, other: Timestamp) -> bool {
        matches!(
            (self, other),
            (Timestamp::Index(_), Timestamp::Index(_)) | (Timestamp::Date(_), Timestamp::Date(_))
        )
    }

    /// The timestamp `delta` ordinal units later.
    pub fn shifted(self, delta: i64) -> Timestamp {
        match self {
            Timestamp::Index(i) => Timestamp::Index(i + delta),
            Timestamp::Date(d) => Timestamp::Date(d + chrono::Duration::days(delta)),
        }
    }
}

impl FromStr for Timestamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<i64>() {
            return Ok(Timestamp::Index(i));
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(Timestamp::Date)
            .map_err(|_| Error::Input(format!("unparseable timestamp {s:?}")))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timestamp::Index(i) => write!(f, "{i}"),
            Timestamp::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        })
    }
}

/// Chronological split boundaries: train `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStat {
    pub mu: f64,
    pub sigma: f64,
}

/// Entity × time × feature cube. Missing observations are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct MtsDataset {
    entities: Vec<String>,
    timestamps: Vec<Timestamp>,
    feature_names: Vec<String>,
    values: Vec<f64>,
    norm_stats: Option<Vec<NormStat>>,
    split: Option<Split>,
}

impl MtsDataset {
    pub fn new(
        entities: Vec<String>,
        timestamps: Vec<Timestamp>,
        feature_names: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let expected = entities.len() * timestamps.len() * feature_names.len();
        if values.len() != expected {
            return Err(Error::Input(format!(
                "cube of {}×{}×{} needs {expected} values, got {}",
                entities.len(),
                timestamps.len(),
                feature_names.len(),
                values.len()
            )));
        }
        if entities.is_empty() || timestamps.is_empty() || feature_names.is_empty() {
            return Err(Error::Input("dataset has an empty axis".into()));
        }
        if let Some(w) = timestamps.windows(2).find(|w| !(w[0] < w[1]) || !w[0].same_kind(w[1])) {
            return Err(Error::Input(format!(
                "timestamps must be strictly increasing and of one kind ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self {
            entities,
            timestamps,
            feature_names,
            values,
            norm_stats: None,
            split: None,
        })
    }

    /// `(entities, timesteps, features)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.entities.len(), self.timestamps.len(), self.feature_names.len())
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.entities.iter().position(|e| e == id)
    }

    fn offset(&self, e: usize, t: usize, v: usize) -> usize {
        let (_, tl, nv) = self.dims();
        (e * tl + t) * nv + v
    }

    pub fn value(&self, e: usize, t: usize, v: usize) -> f64 {
        self.values[self.offset(e, t, v)]
    }

    pub fn set_value(&mut self, e: usize, t: usize, v: usize, x: f64) {
        let i = self.offset(e, t, v);
        self.values[i] = x;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn series(&self, e: usize, v: usize) -> Vec<f64> {
        (0..self.timestamps.len()).map(|t| self.value(e, t, v)).collect()
    }

    pub fn split(&self) -> Option<Split> {
        self.split
    }

    pub fn norm_stats(&self) -> Option<&[NormStat]> {
        self.norm_stats.as_deref()
    }

    pub(crate) fn set_split(&mut self, split: Option<Split>) {
        self.split = split;
    }

    pub(crate) fn set_norm_stats(&mut self, stats: Option<Vec<NormStat>>) {
        self.norm_stats = stats;
    }

    /// Time-index range of one split.
    pub fn range(&self, kind: SplitKind) -> Result<Range<usize>> {
        let s = self
            .split
            .ok_or_else(|| Error::Input("dataset has no chronological split".into()))?;
        Ok(match kind {
            SplitKind::Train => 0..s.train_end,
            SplitKind::Val => s.train_end..s.val_end,
            SplitKind::Test => s.val_end..self.timestamps.len(),
        })
    }

    /// Time-axis step, when the timestamps are uniformly spaced.
    pub fn spacing(&self) -> Option<i64> {
        let ords: Vec<i64> = self.timestamps.iter().map(|t| t.ordinal()).collect();
        let step = ords.get(1).map_or(1, |s| s - ords[0]);
        ords.windows(2).all(|w| w[1] - w[0] == step).then_some(step)
    }

    /// Timestamp `t` steps into the axis, extrapolating past the end.
    pub fn timestamp_at(&self, t: usize) -> Timestamp {
        if let Some(ts) = self.timestamps.get(t) {
            return *ts;
        }
        let last = *self.timestamps.last().expect("non-empty axis");
        let step = self.spacing().unwrap_or(1);
        last.shifted(step * (t + 1 - self.timestamps.len()) as i64)
    }

    /// Inverse z-score for one feature; identity when not normalized.
    pub fn denormalize_value(&self, feature: usize, z: f64) -> f64 {
        match &self.norm_stats {
            Some(s) => z * s[feature].sigma + s[feature].mu,
            None => z,
        }
    }

    /// Copy of the cube in original units.
    pub fn denormalized(&self) -> MtsDataset {
        let mut out = self.clone();
        if let Some(stats) = &self.norm_stats {
            let nv = self.feature_names.len();
            for (i, x) in out.values.iter_mut().enumerate() {
                let s = stats[i % nv];
                *x = *x * s.sigma + s.mu;
            }
        }
        out.norm_stats = None;
        out
    }
}

/// Assigns chronological split boundaries. The three lengths must cover
/// the time axis exactly.
pub fn chronological_split(ds: &MtsDataset, train_len: usize, val_len: usize, test_len: usize) -> Result<MtsDataset> {
    let total = ds.timestamps.len();
    if train_len + val_len + test_len != total {
        return Err(Error::Config(format!(
            "split lengths {train_len}+{val_len}+{test_len} do not sum to the series length {total}"
        )));
    }
    let mut out = ds.clone();
    out.split = Some(Split {
        train_end: train_len,
        val_end: train_len + val_len,
    });
    Ok(out)
}

/// Per-feature z-score with statistics taken from the training range only.
pub fn normalize(ds: &MtsDataset) -> Result<MtsDataset> {
    let train = ds.range(SplitKind::Train)?;
    let (ne, _, nv) = ds.dims();
    let mut stats = Vec::with_capacity(nv);
    for v in 0..nv {
        let mut n = 0usize;
        let mut sum = 0.0;
        for e in 0..ne {
            for t in train.clone() {
                let x = ds.value(e, t, v);
                if !x.is_finite() {
                    return Err(Error::Input(format!(
                        "missing value at entity {}, t={t}, feature {} before normalization",
                        ds.entities[e], ds.feature_names[v]
                    )));
                }
                sum += x;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Input("training range is empty".into()));
        }
        let mu = sum / n as f64;
        let mut ss = 0.0;
        for e in 0..ne {
            for t in train.clone() {
                let d = ds.value(e, t, v) - mu;
                ss += d * d;
            }
        }
        let sigma = (ss / n as f64).sqrt();
        if !(sigma > 0.0) {
            return Err(Error::ZeroVariance {
                feature: ds.feature_names[v].clone(),
            });
        }
        stats.push(NormStat { mu, sigma });
    }
    let mut out = ds.clone();
    for (i, x) in out.values.iter_mut().enumerate() {
        let s = stats[i % nv];
        *x = (*x - s.mu) / s.sigma;
    }
    out.norm_stats = Some(stats);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Missing { entity: String, t: usize, feature: String },
    NonFinite { entity: String, t: usize, feature: String },
    Spacing { index: usize, from: Timestamp, to: Timestamp, expected: i64 },
    ZeroSigma { feature: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Missing { entity, t, feature } => write!(f, "missing value at ({entity}, t={t}, {feature})"),
            Violation::NonFinite { entity, t, feature } => write!(f, "non-finite value at ({entity}, t={t}, {feature})"),
            Violation::Spacing { index, from, to, expected } => {
                write!(f, "timestamp gap between {from} and {to} (index {index}, expected step {expected})")
            }
            Violation::ZeroSigma { feature } => write!(f, "feature {feature} has zero spread"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrityReport {
    pub entities: usize,
    pub timesteps: usize,
    pub features: usize,
    pub points: usize,
}

/// Lists every integrity violation: remaining missing markers, non-finite
/// values, non-uniform spacing, and features with zero spread.
pub fn violations(ds: &MtsDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let (ne, nt, nv) = ds.dims();
    for e in 0..ne {
        for t in 0..nt {
            for v in 0..nv {
                let x = ds.value(e, t, v);
                let at = || (ds.entities[e].clone(), ds.feature_names[v].clone());
                if x.is_nan() {
                    let (entity, feature) = at();
                    out.push(Violation::Missing { entity, t, feature });
                } else if !x.is_finite() {
                    let (entity, feature) = at();
                    out.push(Violation::NonFinite { entity, t, feature });
                }
            }
        }
    }
    if nt >= 2 {
        let expected = ds.timestamps[1].ordinal() - ds.timestamps[0].ordinal();
        for (i, w) in ds.timestamps.windows(2).enumerate() {
            if w[1].ordinal() - w[0].ordinal() != expected {
                out.push(Violation::Spacing {
                    index: i + 1,
                    from: w[0],
                    to: w[1],
                    expected,
                });
            }
        }
    }
    for v in 0..nv {
        let sigma_ok = match ds.norm_stats() {
            Some(stats) => stats[v].sigma > 0.0,
            None => {
                let range = ds.range(SplitKind::Train).unwrap_or(0..nt);
                let xs: Vec<f64> = (0..ne)
                    .flat_map(|e| range.clone().map(move |t| (e, t)))
                    .map(|(e, t)| ds.value(e, t, v))
                    .filter(|x| x.is_finite())
                    .collect();
                let first = xs.first().copied();
                xs.iter().any(|&x| Some(x) != first)
            }
        };
        if !sigma_ok {
            out.push(Violation::ZeroSigma {
                feature: ds.feature_names[v].clone(),
            });
        }
    }
    out
}

pub fn integrity_check(ds: &MtsDataset) -> Result<IntegrityReport> {
    let v = violations(ds);
    if !v.is_empty() {
        return Err(Error::Integrity(v));
    }
    let (entities, timesteps, features) = ds.dims();
    Ok(IntegrityReport {
        entities,
        timesteps,
        features,
        points: entities * timesteps * features,
    })
}

#[cfg(test)]
pub(crate) fn toy(entities: usize, len: usize, features: usize, f: impl Fn(usize, usize, usize) -> f64) -> MtsDataset {
    let mut values = Vec::with_capacity(entities * len * features);
    for e in 0..entities {
        for t in 0..len {
            for v in 0..features {
                values.push(f(e, t, v));
            }
        }
    }
    MtsDataset::new(
        (0..entities).map(|e| format!("e{e}")).collect(),
        (0..len as i64).map(Timestamp::Index).collect(),
        (0..features).map(|v| format!("f{v}")).collect(),
        values,
    )
    .unwrap()
}
