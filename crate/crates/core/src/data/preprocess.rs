use serde::Serialize;

use super::{MtsDataset, SplitKind};
use crate::error::{Error, Result};

/// Consistency constant turning the MAD into a normal-equivalent sigma.
const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FeatureCleaning {
    pub feature: String,
    pub imputed: usize,
    pub clipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ImputeReport {
    pub features: Vec<FeatureCleaning>,
}

impl ImputeReport {
    pub fn total_imputed(&self) -> usize {
        self.features.iter().map(|f| f.imputed).sum()
    }

    pub fn total_clipped(&self) -> usize {
        self.features.iter().map(|f| f.clipped).sum()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Fills gaps by linear interpolation between the nearest observed
/// neighbours (edges take the nearest observed value). Returns the number
/// of filled points.
fn impute_series(xs: &mut [f64]) -> Option<usize> {
    let observed: Vec<usize> = (0..xs.len()).filter(|&i| xs[i].is_finite()).collect();
    let (&first, &last) = (observed.first()?, observed.last()?);
    let mut filled = 0;
    for i in 0..first {
        xs[i] = xs[first];
        filled += 1;
    }
    for i in last + 1..xs.len() {
        xs[i] = xs[last];
        filled += 1;
    }
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (ya, yb) = (xs[a], xs[b]);
        for i in a + 1..b {
            let w = (i - a) as f64 / (b - a) as f64;
            xs[i] = ya + w * (yb - ya);
            filled += 1;
        }
    }
    Some(filled)
}

/// Clips values whose robust z-score `|x - median| / (1.4826 · MAD)` exceeds
/// `z` back to the bound. Returns the number of clipped points.
fn clip_series(xs: &mut [f64], z: f64) -> usize {
    if !z.is_finite() || xs.is_empty() {
        return 0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let mut dev: Vec<f64> = xs.iter().map(|x| (x - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let bound = z * MAD_SCALE * median(&dev);
    let (lo, hi) = (med - bound, med + bound);
    let mut clipped = 0;
    for x in xs.iter_mut() {
        if *x > hi {
            *x = hi;
            clipped += 1;
        } else if *x < lo {
            *x = lo;
            clipped += 1;
        }
    }
    clipped
}

/// Linear-interpolation imputation followed by median/MAD outlier clipping,
/// per entity and feature. `outlier_z = inf` disables clipping.
///
/// The clip is idempotent for `outlier_z >= 2`, which is therefore the
/// smallest accepted bound.
pub fn impute_and_clip(ds: &MtsDataset, outlier_z: f64) -> Result<(MtsDataset, ImputeReport)> {
    if !(outlier_z >= 2.0) {
        return Err(Error::Config(format!("outlier_z must be at least 2, got {outlier_z}")));
    }
    let (ne, nt, nv) = ds.dims();
    let mut out = ds.clone();
    let mut report = ImputeReport {
        features: ds
            .feature_names()
            .iter()
            .map(|f| FeatureCleaning {
                feature: f.clone(),
                ..Default::default()
            })
            .collect(),
    };
    for e in 0..ne {
        for v in 0..nv {
            let mut xs = ds.series(e, v);
            let filled = impute_series(&mut xs).ok_or_else(|| Error::AllMissing {
                entity: ds.entities()[e].clone(),
                feature: ds.feature_names()[v].clone(),
            })?;
            let clipped = clip_series(&mut xs, outlier_z);
            report.features[v].imputed += filled;
            report.features[v].clipped += clipped;
            for (t, x) in xs.into_iter().enumerate().take(nt) {
                out.set_value(e, t, v, x);
            }
        }
    }
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureRank {
    pub feature: String,
    /// Population standard deviation relative to the mean magnitude.
    pub relative_spread: f64,
    /// Largest absolute Pearson correlation with any other feature.
    pub max_abs_correlation: f64,
}

/// Ranks features by relative spread (descending), pooling all entities over
/// the training range when a split is set.
pub fn rank_features(ds: &MtsDataset) -> Vec<FeatureRank> {
    let (ne, nt, nv) = ds.dims();
    let range = ds.range(SplitKind::Train).unwrap_or(0..nt);
    let cols: Vec<Vec<f64>> = (0..nv)
        .map(|v| {
            (0..ne)
                .flat_map(|e| range.clone().map(move |t| (e, t)))
                .map(|(e, t)| ds.value(e, t, v))
                .collect()
        })
        .collect();
    let moments: Vec<(f64, f64)> = cols
        .iter()
        .map(|c| {
            let n = c.len().max(1) as f64;
            let mu = c.iter().sum::<f64>() / n;
            let sd = (c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
            (mu, sd)
        })
        .collect();
    let corr = |a: usize, b: usize| {
        let ((ma, sa), (mb, sb)) = (moments[a], moments[b]);
        if sa == 0.0 || sb == 0.0 {
            return 0.0;
        }
        let n = cols[a].len().max(1) as f64;
        cols[a].iter().zip(&cols[b]).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n * sa * sb)
    };
    let mut ranks: Vec<FeatureRank> = (0..nv)
        .map(|v| FeatureRank {
            feature: ds.feature_names()[v].clone(),
            relative_spread: moments[v].1 / moments[v].0.abs().max(1e-12),
            max_abs_correlation: (0..nv).filter(|&u| u != v).map(|u| corr(v, u).abs()).fold(0.0, f64::max),
        })
        .collect();
    ranks.sort_by(|a, b| b.relative_spread.total_cmp(&a.relative_spread));
    ranks
}

/// Keeps the features whose relative spread is at least `min_relative_spread`.
pub fn select_features(ds: &MtsDataset, min_relative_spread: f64) -> Result<MtsDataset> {
    let keep: Vec<usize> = rank_features(ds)
        .iter()
        .filter(|r| r.relative_spread >= min_relative_spread)
        .filter_map(|r| ds.feature_names().iter().position(|f| *f == r.feature))
        .collect();
    let mut keep = keep;
    keep.sort_unstable();
    if keep.is_empty() {
        return Err(Error::Input("feature selection dropped every feature".into()));
    }
    let (ne, nt, _) = ds.dims();
    let mut values = Vec::with_capacity(ne * nt * keep.len());
    for e in 0..ne {
        for t in 0..nt {
            values.extend(keep.iter().map(|&v| ds.value(e, t, v)));
        }
    }
    let mut out = MtsDataset::new(
        ds.entities().to_vec(),
        ds.timestamps().to_vec(),
        keep.iter().map(|&v| ds.feature_names()[v].clone()).collect(),
        values,
    )?;
    out.set_split(ds.split());
    out.set_norm_stats(ds.norm_stats().map(|s| keep.iter().map(|&v| s[v]).collect()));
    Ok(out)
}
