//! Canonical on-disk formats: per-series CSV files plus a JSON manifest, and score traces.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use contextad::detector::{Aggregation, ScoreTrace};
use contextad::series::{Dataset, LabelState, Split, TimeSeries};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "dataset.json";
pub const TRACE_INDEX_FILE: &str = "traces.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    pub channels: usize,
    pub series: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub file: PathBuf,
    pub split: Split,
}

/// All splits of a canonical dataset; absent splits are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDatasets {
    pub name: String,
    pub train: Option<Dataset>,
    pub validation: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl SplitDatasets {
    pub fn get(&self, split: Split) -> Option<&Dataset> {
        match split {
            Split::Train => self.train.as_ref(),
            Split::Validation => self.validation.as_ref(),
            Split::Test => self.test.as_ref(),
        }
    }

    pub fn require(&self, split: Split) -> CliResult<&Dataset> {
        self.get(split)
            .ok_or_else(|| CliError::Data(format!("dataset `{}` has no {split} split", self.name)))
    }

    pub fn all(&self) -> impl Iterator<Item = &Dataset> {
        [&self.train, &self.validation, &self.test].into_iter().flatten()
    }

    pub fn from_datasets(name: impl Into<String>, datasets: Vec<Dataset>) -> CliResult<Self> {
        let mut out = Self {
            name: name.into(),
            train: None,
            validation: None,
            test: None,
        };
        for ds in datasets {
            let slot = match ds.split() {
                Split::Train => &mut out.train,
                Split::Validation => &mut out.validation,
                Split::Test => &mut out.test,
            };
            if slot.is_some() {
                return Err(CliError::Data(format!("two {} datasets given", ds.split())));
            }
            *slot = Some(ds);
        }
        Ok(out)
    }
}

fn label_code(l: LabelState) -> &'static str {
    match l {
        LabelState::Normal => "0",
        LabelState::Anomalous => "1",
        LabelState::Unlabeled => "-1",
    }
}

/// Parses a real; empty cells and `nan` mean missing.
pub fn parse_value(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    raw.parse().ok()
}

pub fn parse_label(raw: &str) -> Option<LabelState> {
    let raw = raw.trim();
    let code: i64 = raw
        .parse()
        .ok()
        .or_else(|| raw.parse::<f64>().ok().filter(|v| v.fract() == 0.0).map(|v| v as i64))?;
    LabelState::from_code(code)
}

fn csv_reader(path: &Path) -> CliResult<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Reads `timestamp,<channels...>,label`.
pub fn read_series_csv(path: &Path, id: &str) -> CliResult<TimeSeries> {
    let mut reader = csv_reader(path)?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let n = header.len();
    if n < 3 || &header[0] != "timestamp" || &header[n - 1] != "label" {
        return Err(CliError::Data(format!(
            "{}: header must be `timestamp,<channels...>,label`, got `{}`",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let channels = n - 2;
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = row + 2;
        timestamps.push(record[0].to_string());
        for c in 1..=channels {
            values.push(
                parse_value(&record[c])
                    .ok_or_else(|| CliError::Data(format!("{}:{line}: bad value `{}`", path.display(), &record[c])))?,
            );
        }
        labels.push(
            parse_label(&record[n - 1])
                .ok_or_else(|| CliError::Data(format!("{}:{line}: bad label `{}`", path.display(), &record[n - 1])))?,
        );
    }
    Ok(TimeSeries::new(id, values, channels, labels)?.with_timestamps(timestamps)?)
}

pub fn write_series_csv(path: &Path, series: &TimeSeries) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..series.channels()).map(|c| format!("ch_{c}")));
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for t in 0..series.len() {
        let mut rec = Vec::with_capacity(series.channels() + 2);
        rec.push(timestamp_at(series, t));
        rec.extend(series.row(t).iter().map(|v| v.to_string()));
        rec.push(label_code(series.labels()[t]).to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn timestamp_at(series: &TimeSeries, t: usize) -> String {
    series.timestamps().map_or_else(|| t.to_string(), |ts| ts[t].clone())
}

/// File-system safe stem derived from a series id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn unique_stem(id: &str, used: &mut HashSet<String>) -> String {
    let base = file_stem(id);
    let mut stem = base.clone();
    let mut k = 1;
    while !used.insert(stem.clone()) {
        stem = format!("{base}_{k}");
        k += 1;
    }
    stem
}

/// Locates the manifest: either the file itself or `dataset.json` inside a directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_dataset(path: &Path) -> CliResult<SplitDatasets> {
    let manifest_file = manifest_path(path);
    let text = fs::read_to_string(&manifest_file).map_err(|e| CliError::io(&manifest_file, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| csv_err(&manifest_file, e))?;
    let root = manifest_file.parent().unwrap_or(Path::new("."));
    let mut buckets: Vec<(Split, Vec<TimeSeries>)> = Vec::new();
    for entry in &manifest.series {
        let series = read_series_csv(&root.join(&entry.file), &entry.id)?;
        if series.channels() != manifest.channels {
            return Err(CliError::Data(format!(
                "series `{}` has {} channels, manifest says {}",
                entry.id,
                series.channels(),
                manifest.channels
            )));
        }
        match buckets.iter_mut().find(|(s, _)| *s == entry.split) {
            Some((_, v)) => v.push(series),
            None => buckets.push((entry.split, vec![series])),
        }
    }
    let datasets = buckets
        .into_iter()
        .map(|(split, series)| Dataset::new(split, series))
        .collect::<contextad::Result<Vec<_>>>()?;
    SplitDatasets::from_datasets(manifest.name, datasets)
}

/// Writes every split under `dir/<split>/` and the manifest at `dir/dataset.json`.
pub fn write_dataset(dir: &Path, data: &SplitDatasets) -> CliResult<PathBuf> {
    let channels = data
        .all()
        .find_map(Dataset::channels)
        .ok_or_else(|| CliError::Data("refusing to write an empty dataset".into()))?;
    let mut entries = Vec::new();
    for ds in data.all() {
        let split_dir = dir.join(ds.split().to_string());
        fs::create_dir_all(&split_dir).map_err(|e| CliError::io(&split_dir, e))?;
        let mut used = HashSet::new();
        for s in ds.series() {
            let rel = PathBuf::from(ds.split().to_string()).join(format!("{}.csv", unique_stem(s.id(), &mut used)));
            write_series_csv(&dir.join(&rel), s)?;
            entries.push(ManifestEntry {
                id: s.id().to_string(),
                file: rel,
                split: ds.split(),
            });
        }
    }
    let manifest = Manifest {
        name: data.name.clone(),
        channels,
        series: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceIndex {
    pub aggregation: Aggregation,
    pub series: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub id: String,
    pub file: PathBuf,
}

/// `timestamp,score,probability,scored`; unscored rows have empty score cells and `scored = 0`.
pub fn write_trace_csv(path: &Path, trace: &ScoreTrace, series: &TimeSeries) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["timestamp", "score", "probability", "scored"])
        .map_err(|e| csv_err(path, e))?;
    for (t, (s, p)) in trace.scores.iter().zip(&trace.probabilities).enumerate() {
        let cell = |v: &Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let scored = if s.is_some() { "1" } else { "0" };
        w.write_record([timestamp_at(series, t), cell(s), cell(p), scored.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_trace_csv(path: &Path, id: &str, aggregation: Aggregation) -> CliResult<ScoreTrace> {
    let mut reader = csv_reader(path)?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["timestamp", "score", "probability", "scored"] {
        return Err(CliError::Data(format!("{}: not a score trace", path.display())));
    }
    let mut scores = Vec::new();
    let mut probabilities = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let parse = |raw: &str| -> CliResult<f64> {
            raw.parse()
                .map_err(|_| CliError::Data(format!("{}: bad number `{raw}`", path.display())))
        };
        if &record[3] == "1" {
            scores.push(Some(parse(&record[1])?));
            probabilities.push(Some(parse(&record[2])?));
        } else {
            scores.push(None);
            probabilities.push(None);
        }
    }
    Ok(ScoreTrace {
        series_id: id.to_string(),
        scores,
        probabilities,
        aggregation,
    })
}

/// Writes one CSV per trace plus `traces.json`.
pub fn write_traces(dir: &Path, traces: &[ScoreTrace], dataset: &Dataset, aggregation: Aggregation) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut used = HashSet::new();
    let mut entries = Vec::new();
    for trace in traces {
        let series = dataset
            .get(&trace.series_id)
            .ok_or_else(|| CliError::Data(format!("no series `{}`", trace.series_id)))?;
        let file = PathBuf::from(format!("{}.csv", unique_stem(&trace.series_id, &mut used)));
        write_trace_csv(&dir.join(&file), trace, series)?;
        entries.push(TraceEntry {
            id: trace.series_id.clone(),
            file,
        });
    }
    write_json(
        &dir.join(TRACE_INDEX_FILE),
        &TraceIndex {
            aggregation,
            series: entries,
        },
    )
}

pub fn read_traces(dir: &Path) -> CliResult<Vec<ScoreTrace>> {
    let index: TraceIndex = read_json(&dir.join(TRACE_INDEX_FILE))?;
    index
        .series
        .iter()
        .map(|e| read_trace_csv(&dir.join(&e.file), &e.id, index.aggregation))
        .collect()
}
