//! Converters from public benchmark layouts to the canonical dataset.
//!
//! - `nasa`: `train/<chan>.npy`, `test/<chan>.npy`, `labeled_anomalies.csv`
//!   (`chan_id,spacecraft,anomaly_sequences,class,num_values`, inclusive index ranges).
//! - `smd`: `train/<m>.txt`, `test/<m>.txt`, `test_label/<m>.txt`, comma separated, no header.
//! - `yahoo`: a directory of `*.csv` files with a timestamp, a value and an anomaly flag,
//!   each split into train / validation / test by position.
//! - `kpi`: one CSV with `timestamp,value,label,KPI ID`, grouped by KPI.
//!
//! Values pass through unchanged. Unlabeled training splits are marked `Unlabeled`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use contextad::series::{split_yahoo_style, Dataset, LabelState, Split, TimeSeries};
use npyz::{DType, NpyFile, Order};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{parse_label, parse_value, SplitDatasets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Nasa,
    Smd,
    Yahoo,
    Kpi,
}

#[derive(Debug, Clone, Default)]
pub struct ConvertOptions {
    /// NASA only: keep channels of this spacecraft (`SMAP` or `MSL`).
    pub spacecraft: Option<String>,
    /// KPI only: split tag for the input file.
    pub kpi_split: Option<Split>,
    /// KPI only: optional second file tagged as test.
    pub kpi_test_file: Option<PathBuf>,
}

pub fn convert(format: Format, input: &Path, options: &ConvertOptions) -> CliResult<SplitDatasets> {
    match format {
        Format::Nasa => nasa_format(input, options.spacecraft.as_deref()),
        Format::Smd => smd_format(input),
        Format::Yahoo => yahoo_format(input),
        Format::Kpi => kpi_format(input, options.kpi_split.unwrap_or(Split::Train), options.kpi_test_file.as_deref()),
    }
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {msg}", path.display()))
}

/// Files in `dir` with extension `ext`, sorted by name.
fn list_files(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Row-major `T x D` values of a 1-D or 2-D float `.npy` file.
pub fn read_npy(path: &Path) -> CliResult<(Vec<f64>, usize)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let npy = NpyFile::new(&bytes[..]).map_err(|e| data_err(path, e))?;
    let shape: Vec<usize> = npy.shape().iter().map(|&s| s as usize).collect();
    let (rows, cols) = match shape.as_slice() {
        [t] => (*t, 1),
        [t, d] => (*t, *d),
        other => return Err(data_err(path, format!("expected a 1-D or 2-D array, got shape {other:?}"))),
    };
    let order = npy.order();
    let type_str = match npy.dtype() {
        DType::Plain(ts) => ts.to_string(),
        other => return Err(data_err(path, format!("unsupported dtype {other:?}"))),
    };
    let values: Vec<f64> = match &type_str[1..] {
        "f8" => npy.into_vec::<f64>().map_err(|e| data_err(path, e))?,
        "f4" => npy
            .into_vec::<f32>()
            .map_err(|e| data_err(path, e))?
            .into_iter()
            .map(f64::from)
            .collect(),
        other => return Err(data_err(path, format!("unsupported element type `{other}`"))),
    };
    if order == Order::Fortran && cols > 1 {
        let mut row_major = vec![0.0; values.len()];
        for c in 0..cols {
            for t in 0..rows {
                row_major[t * cols + c] = values[c * rows + t];
            }
        }
        return Ok((row_major, cols));
    }
    Ok((values, cols))
}

/// Parses `[[a, b], [c, d]]` into inclusive ranges.
fn parse_ranges(raw: &str) -> Option<Vec<(usize, usize)>> {
    let nums: Vec<usize> = raw
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect::<Option<_>>()?;
    if nums.len() % 2 != 0 {
        return None;
    }
    Some(nums.chunks(2).map(|c| (c[0], c[1])).collect())
}

/// Checks a header against known columns, naming the first unknown one.
fn check_columns(path: &Path, header: &csv::StringRecord, known: &[&str]) -> CliResult<()> {
    if let Some(col) = header.iter().find(|c| !known.contains(c)) {
        return Err(data_err(path, format!("unknown column `{col}`")));
    }
    Ok(())
}

fn column(path: &Path, header: &csv::StringRecord, names: &[&str]) -> CliResult<usize> {
    header
        .iter()
        .position(|h| names.contains(&h))
        .ok_or_else(|| data_err(path, format!("missing column `{}`", names[0])))
}

fn reader(path: &Path) -> CliResult<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| data_err(path, e))
}

pub fn nasa_format(dir: &Path, spacecraft: Option<&str>) -> CliResult<SplitDatasets> {
    let label_file = dir.join("labeled_anomalies.csv");
    let mut rdr = reader(&label_file)?;
    let header = rdr.headers().map_err(|e| data_err(&label_file, e))?.clone();
    check_columns(&label_file, &header, &["chan_id", "spacecraft", "anomaly_sequences", "class", "num_values"])?;
    let chan = column(&label_file, &header, &["chan_id"])?;
    let craft = column(&label_file, &header, &["spacecraft"])?;
    let seqs = column(&label_file, &header, &["anomaly_sequences"])?;
    let mut channels: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| data_err(&label_file, e))?;
        if spacecraft.is_some_and(|s| !rec[craft].eq_ignore_ascii_case(s)) {
            continue;
        }
        let ranges = parse_ranges(&rec[seqs])
            .ok_or_else(|| data_err(&label_file, format!("bad anomaly_sequences `{}`", &rec[seqs])))?;
        channels.push((rec[chan].to_string(), ranges));
    }
    channels.sort_by(|a, b| a.0.cmp(&b.0));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (id, ranges) in channels {
        let (values, d) = read_npy(&dir.join("train").join(format!("{id}.npy")))?;
        let len = values.len() / d;
        train.push(TimeSeries::new(id.clone(), values, d, vec![LabelState::Unlabeled; len])?);
        let test_path = dir.join("test").join(format!("{id}.npy"));
        let (values, d) = read_npy(&test_path)?;
        let len = values.len() / d;
        let mut labels = vec![LabelState::Normal; len];
        for (a, b) in ranges {
            if a > b || b >= len {
                return Err(data_err(&test_path, format!("anomaly range [{a}, {b}] outside {len} points")));
            }
            labels[a..=b].fill(LabelState::Anomalous);
        }
        test.push(TimeSeries::new(id, values, d, labels)?);
    }
    if test.is_empty() {
        return Err(data_err(&label_file, "no channels selected"));
    }
    SplitDatasets::from_datasets(
        spacecraft.map_or_else(|| "nasa".to_string(), str::to_lowercase),
        vec![Dataset::new(Split::Train, train)?, Dataset::new(Split::Test, test)?],
    )
}

/// Headerless comma-separated reals, one row per timestep.
fn read_plain_rows(path: &Path) -> CliResult<(Vec<f64>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut values = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|c| parse_value(c).ok_or_else(|| data_err(path, format!("line {}: bad value `{c}`", i + 1))))
            .collect::<CliResult<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(data_err(path, format!("line {}: {} columns, expected {w}", i + 1, row.len())))
            }
            _ => {}
        }
        values.extend(row);
    }
    let width = width.ok_or_else(|| data_err(path, "empty file"))?;
    Ok((values, width))
}

pub fn smd_format(dir: &Path) -> CliResult<SplitDatasets> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for path in list_files(&dir.join("test"), "txt")? {
        let id = stem(&path);
        let (values, d) = read_plain_rows(&path)?;
        let label_path = dir.join("test_label").join(format!("{id}.txt"));
        let (raw, w) = read_plain_rows(&label_path)?;
        if w != 1 || raw.len() != values.len() / d {
            return Err(data_err(&label_path, "expected one label per test row"));
        }
        let labels = raw
            .iter()
            .map(|&v| LabelState::from_code(v as i64).filter(|_| v.fract() == 0.0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| data_err(&label_path, "labels must be 0 or 1"))?;
        test.push(TimeSeries::new(id.clone(), values, d, labels)?);
        let train_path = dir.join("train").join(format!("{id}.txt"));
        let (values, d) = read_plain_rows(&train_path)?;
        let len = values.len() / d;
        train.push(TimeSeries::new(id, values, d, vec![LabelState::Unlabeled; len])?);
    }
    if test.is_empty() {
        return Err(data_err(dir, "no test/*.txt files"));
    }
    SplitDatasets::from_datasets("smd", vec![Dataset::new(Split::Train, train)?, Dataset::new(Split::Test, test)?])
}

const YAHOO_EXTRA: &[&str] = &["changepoint", "trend", "noise", "seasonality1", "seasonality2", "seasonality3"];

fn read_yahoo_file(path: &Path) -> CliResult<TimeSeries> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| data_err(path, e))?.clone();
    let mut known = vec!["timestamp", "timestamps", "value", "is_anomaly", "anomaly"];
    known.extend_from_slice(YAHOO_EXTRA);
    check_columns(path, &header, &known)?;
    let ts = column(path, &header, &["timestamp", "timestamps"])?;
    let val = column(path, &header, &["value"])?;
    let lab = column(path, &header, &["is_anomaly", "anomaly"])?;
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        timestamps.push(rec[ts].to_string());
        values.push(parse_value(&rec[val]).ok_or_else(|| data_err(path, format!("bad value `{}`", &rec[val])))?);
        labels.push(parse_label(&rec[lab]).ok_or_else(|| data_err(path, format!("bad label `{}`", &rec[lab])))?);
    }
    Ok(TimeSeries::univariate(stem(path), values, labels)?.with_timestamps(timestamps)?)
}

pub fn yahoo_format(dir: &Path) -> CliResult<SplitDatasets> {
    let mut splits = (Vec::new(), Vec::new(), Vec::new());
    for path in list_files(dir, "csv")? {
        if stem(&path).ends_with("_all") {
            continue;
        }
        let s = split_yahoo_style(&read_yahoo_file(&path)?)?;
        splits.0.push(s.train);
        splits.1.push(s.validation);
        splits.2.push(s.test);
    }
    if splits.0.is_empty() {
        return Err(data_err(dir, "no csv files"));
    }
    SplitDatasets::from_datasets(
        "yahoo",
        vec![
            Dataset::new(Split::Train, splits.0)?,
            Dataset::new(Split::Validation, splits.1)?,
            Dataset::new(Split::Test, splits.2)?,
        ],
    )
}

fn read_kpi_file(path: &Path, split: Split) -> CliResult<Dataset> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| data_err(path, e))?.clone();
    check_columns(path, &header, &["timestamp", "value", "label", "KPI ID"])?;
    let ts = column(path, &header, &["timestamp"])?;
    let val = column(path, &header, &["value"])?;
    let id = column(path, &header, &["KPI ID"])?;
    let lab = header.iter().position(|h| h == "label");
    let mut order = Vec::new();
    let mut groups: HashMap<String, (Vec<String>, Vec<f64>, Vec<LabelState>)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| data_err(path, e))?;
        let key = rec[id].to_string();
        let g = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Default::default()
        });
        g.0.push(rec[ts].to_string());
        g.1.push(parse_value(&rec[val]).ok_or_else(|| data_err(path, format!("bad value `{}`", &rec[val])))?);
        g.2.push(match lab {
            Some(l) => parse_label(&rec[l]).ok_or_else(|| data_err(path, format!("bad label `{}`", &rec[l])))?,
            None => LabelState::Unlabeled,
        });
    }
    let series = order
        .into_iter()
        .map(|key| {
            let (ts, v, l) = groups.remove(&key).expect("grouped");
            Ok(TimeSeries::univariate(key, v, l)?.with_timestamps(ts)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Dataset::new(split, series)?)
}

pub fn kpi_format(file: &Path, split: Split, test_file: Option<&Path>) -> CliResult<SplitDatasets> {
    let mut datasets = vec![read_kpi_file(file, split)?];
    if let Some(t) = test_file {
        datasets.push(read_kpi_file(t, Split::Test)?);
    }
    SplitDatasets::from_datasets("kpi", datasets)
}
