use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MtsDataset, NormStat, Split, Timestamp};
use crate::error::{Error, Result};

/// Column names of the long-format input table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub entity: String,
    pub timestamp: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            entity: "entity".into(),
            timestamp: "timestamp".into(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<MtsDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Reads `entity,timestamp,<feature...>` rows into a cube. Rows may arrive in
/// any order; the time axis is the sorted union of all timestamps, and
/// absent or unparseable cells become missing markers.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<MtsDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("missing column {name:?}")))
    };
    let (ie, it) = (col(&schema.entity)?, col(&schema.timestamp)?);
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != ie && c != it).collect();
    if feature_cols.is_empty() {
        return Err(Error::Input("no feature columns".into()));
    }
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| headers[c].to_string()).collect();

    let mut entity_order: Vec<String> = Vec::new();
    let mut entity_pos: HashMap<String, usize> = HashMap::new();
    let mut rows: BTreeMap<(usize, Timestamp), Vec<f64>> = BTreeMap::new();
    let mut times = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let entity = rec.get(ie).unwrap_or_default().to_string();
        let raw_ts = rec.get(it).unwrap_or_default();
        let ts: Timestamp = raw_ts.parse()?;
        let e = *entity_pos.entry(entity.clone()).or_insert_with(|| {
            entity_order.push(entity.clone());
            entity_order.len() - 1
        });
        let cells = feature_cols
            .iter()
            .map(|&c| rec.get(c).and_then(|s| s.parse::<f64>().ok()).filter(|x| x.is_finite()).unwrap_or(f64::NAN))
            .collect();
        if rows.insert((e, ts), cells).is_some() {
            return Err(Error::DuplicateKey {
                entity,
                timestamp: raw_ts.to_string(),
            });
        }
        times.insert(ts);
    }
    if rows.is_empty() {
        return Err(Error::Input("csv has no data rows".into()));
    }
    let timestamps: Vec<Timestamp> = times.into_iter().collect();
    if let Some(w) = timestamps.windows(2).find(|w| !w[0].same_kind(w[1])) {
        return Err(Error::Input(format!("mixed timestamp kinds ({} and {})", w[0], w[1])));
    }
    let t_index: HashMap<Timestamp, usize> = timestamps.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let nv = feature_names.len();
    let nt = timestamps.len();
    let mut values = vec![f64::NAN; entity_order.len() * nt * nv];
    for ((e, ts), cells) in rows {
        let base = (e * nt + t_index[&ts]) * nv;
        values[base..base + nv].copy_from_slice(&cells);
    }
    MtsDataset::new(entity_order, timestamps, feature_names, values)
}

/// Writes the cube in the same long format `read_csv` accepts. Missing
/// markers are written as `NaN`.
pub fn write_csv<W: Write>(ds: &MtsDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["entity".to_string(), "timestamp".to_string()];
    header.extend(ds.feature_names().iter().cloned());
    w.write_record(&header)?;
    let (ne, nt, nv) = ds.dims();
    for e in 0..ne {
        for t in 0..nt {
            let mut rec = vec![ds.entities()[e].clone(), ds.timestamps()[t].to_string()];
            rec.extend((0..nv).map(|v| ds.value(e, t, v).to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_norm_stats<W: Write>(ds: &MtsDataset, writer: W) -> Result<()> {
    let stats = ds
        .norm_stats()
        .ok_or_else(|| Error::Input("dataset is not normalized".into()))?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature", "mu", "sigma"])?;
    for (name, s) in ds.feature_names().iter().zip(stats) {
        w.write_record([name.clone(), s.mu.to_string(), s.sigma.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn read_norm_stats<R: Read>(reader: R) -> Result<Vec<(String, NormStat)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Input(format!("bad norm-stats row {rec:?}")))
        };
        out.push((rec.get(0).unwrap_or_default().to_string(), NormStat { mu: num(1)?, sigma: num(2)? }));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format: String,
    version: u32,
    split: Option<Split>,
    normalized: bool,
}

const META_FORMAT: &str = "mmforge-dataset";

pub const PROCESSED_VALUES: &str = "processed.csv";
pub const NORM_STATS: &str = "norm_stats.csv";
pub const DATASET_META: &str = "dataset.json";

/// Writes `processed.csv`, `dataset.json` and (when normalized)
/// `norm_stats.csv` into `dir`.
pub fn save_processed(ds: &MtsDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let create = |name: &str| {
        let p = dir.join(name);
        File::create(&p).map_err(|e| Error::io(&p, e))
    };
    write_csv(ds, create(PROCESSED_VALUES)?)?;
    if ds.norm_stats().is_some() {
        write_norm_stats(ds, create(NORM_STATS)?)?;
    }
    let meta = DatasetMeta {
        format: META_FORMAT.into(),
        version: 1,
        split: ds.split(),
        normalized: ds.norm_stats().is_some(),
    };
    let mut f = create(DATASET_META)?;
    let body = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f, "{body}").map_err(|e| Error::io(dir.join(DATASET_META), e))?;
    Ok(())
}

pub fn load_processed(dir: impl AsRef<Path>) -> Result<MtsDataset> {
    let dir = dir.as_ref();
    let open = |name: &str| {
        let p = dir.join(name);
        File::open(&p).map_err(|e| Error::io(&p, e))
    };
    let meta: DatasetMeta = serde_json::from_reader(open(DATASET_META)?)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(DATASET_META).display())))?;
    if meta.format != META_FORMAT || meta.version != 1 {
        return Err(Error::Format(format!("unsupported dataset format {} v{}", meta.format, meta.version)));
    }
    let mut ds = read_csv(open(PROCESSED_VALUES)?, &CsvSchema::default())?;
    if let Some(s) = meta.split {
        if s.train_end > s.val_end || s.val_end > ds.dims().1 {
            return Err(Error::Format(format!("split {s:?} outside the time axis")));
        }
    }
    ds.set_split(meta.split);
    if meta.normalized {
        let stats = read_norm_stats(open(NORM_STATS)?)?;
        let names: Vec<&String> = stats.iter().map(|(n, _)| n).collect();
        if names.iter().map(|s| s.as_str()).ne(ds.feature_names().iter().map(|s| s.as_str())) {
            return Err(Error::Format("norm stats do not match the dataset features".into()));
        }
        ds.set_norm_stats(Some(stats.into_iter().map(|(_, s)| s).collect()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chronological_split, normalize, toy};

    fn parse(text: &str) -> Result<MtsDataset> {
        read_csv(text.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn shape_echo() {
        let ds = parse("entity,timestamp,pm25\na,0,1\na,1,2\na,2,3\nb,0,4\nb,1,5\nb,2,6\n").unwrap();
        assert_eq!(ds.dims(), (2, 3, 1));
        assert_eq!(ds.series(1, 0), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn nan_cell_is_missing() {
        let ds = parse("entity,timestamp,x,y\na,2020-01-01,1,NaN\na,2020-01-02,oops,2\n").unwrap();
        assert!(ds.value(0, 0, 1).is_nan());
        assert!(ds.value(0, 1, 0).is_nan());
        assert_eq!(ds.value(0, 1, 1), 2.0);
    }

    #[test]
    fn out_of_order_rows_are_sorted() {
        let ds = parse("entity,timestamp,x\na,2,30\na,0,10\na,1,20\n").unwrap();
        assert_eq!(ds.series(0, 0), vec![10.0, 20.0, 30.0]);
        assert_eq!(ds.timestamps()[0], Timestamp::Index(0));
    }

    #[test]
    fn errors() {
        assert!(matches!(parse("entity,timestamp,x\na,0,1\na,0,2\n"), Err(Error::DuplicateKey { .. })));
        assert!(matches!(parse("entity,x\na,1\n"), Err(Error::Input(m)) if m.contains("timestamp")));
        assert!(parse("entity,timestamp,x\n").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn processed_round_trip_is_exact() {
        let raw = toy(2, 9, 2, |e, t, v| ((e * 31 + t * 7 + v) as f64).sin() * 3.3);
        let ds = normalize(&chronological_split(&raw, 5, 2, 2).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_processed(&ds, dir.path()).unwrap();
        let back = load_processed(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
