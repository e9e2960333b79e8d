use std::fs;
use std::path::{Path, PathBuf};

use contextad::series::{LabelState, Split};
use contextad_cli::adapters::{convert, ConvertOptions, Format};
use contextad_cli::io::{load_dataset, write_dataset, SplitDatasets};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn assert_bit_equal(a: &SplitDatasets, b: &SplitDatasets) {
    for split in [Split::Train, Split::Validation, Split::Test] {
        let (x, y) = (a.get(split), b.get(split));
        assert_eq!(x.is_some(), y.is_some(), "{split}");
        let (Some(x), Some(y)) = (x, y) else { continue };
        assert_eq!(x.len(), y.len());
        for (s, t) in x.series().iter().zip(y.series()) {
            assert_eq!(s.id(), t.id());
            assert_eq!(s.channels(), t.channels());
            assert_eq!(s.labels(), t.labels());
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(s.values()), bits(t.values()), "values of {}", s.id());
        }
    }
}

fn round_trip(format: Format, input: &Path, options: &ConvertOptions) -> SplitDatasets {
    let converted = convert(format, input, options).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &converted).unwrap();
    let reloaded = load_dataset(&manifest).unwrap();
    assert_bit_equal(&converted, &reloaded);
    converted
}

#[test]
fn nasa_round_trip_matches_numpy() {
    let data = round_trip(Format::Nasa, &fixture("nasa"), &ConvertOptions::default());
    let expected: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixture("nasa/expected.json")).unwrap()).unwrap();
    let test = data.test.as_ref().unwrap();
    assert_eq!(test.len(), 3);
    for s in test.series() {
        let e = &expected[s.id()];
        assert_eq!(s.len() as u64, e["shape"][0].as_u64().unwrap());
        assert_eq!(s.channels() as u64, e["shape"][1].as_u64().unwrap());
        let row5: Vec<f64> = e["row5"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(s.row(5), row5.as_slice(), "{}", s.id());
        let sum: f64 = s.values().iter().sum();
        assert!((sum - e["sum"].as_f64().unwrap()).abs() < 1e-9, "{}", s.id());
    }
    let p2 = test.get("P-2").unwrap();
    let anomalous: Vec<usize> = (0..p2.len()).filter(|&t| p2.labels()[t] == LabelState::Anomalous).collect();
    let want: Vec<usize> = (10..=12).chain(50..=55).collect();
    assert_eq!(anomalous, want);
    assert!(data.train.unwrap().series().iter().all(|s| s.labels().iter().all(|l| *l == LabelState::Unlabeled)));
}

#[test]
fn nasa_spacecraft_filter() {
    let options = ConvertOptions {
        spacecraft: Some("MSL".into()),
        ..Default::default()
    };
    let data = convert(Format::Nasa, &fixture("nasa"), &options).unwrap();
    let ids: Vec<&str> = data.test.as_ref().unwrap().series().iter().map(|s| s.id()).collect();
    assert_eq!(ids, ["M-3"]);
    assert_eq!(data.name, "msl");
}

#[test]
fn smd_round_trip() {
    let data = round_trip(Format::Smd, &fixture("smd"), &ConvertOptions::default());
    let test = data.test.as_ref().unwrap();
    assert_eq!(test.len(), 3);
    let s = test.get("machine-1-1").unwrap();
    assert_eq!(s.channels(), 4);
    assert_eq!(s.len(), 60);
    let first = fs::read_to_string(fixture("smd/test/machine-1-1.txt")).unwrap();
    let parsed: Vec<f64> = first.lines().next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(s.row(0), parsed.as_slice());
    assert_eq!(s.labels().iter().filter(|l| **l == LabelState::Anomalous).count(), 8);
}

#[test]
fn yahoo_round_trip_applies_split() {
    let data = round_trip(Format::Yahoo, &fixture("yahoo"), &ConvertOptions::default());
    let train = data.train.as_ref().unwrap();
    let val = data.validation.as_ref().unwrap();
    let test = data.test.as_ref().unwrap();
    assert_eq!(train.len(), 3);
    for id in ["real_1", "real_2", "real_3"] {
        let total = train.get(id).unwrap().len() + val.get(id).unwrap().len() + test.get(id).unwrap().len();
        assert_eq!(total, 40);
        assert_eq!(test.get(id).unwrap().len(), 20);
    }
    let text = fs::read_to_string(fixture("yahoo/real_1.csv")).unwrap();
    let last: f64 = text.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(*test.get("real_1").unwrap().values().last().unwrap(), last);
}

#[test]
fn kpi_round_trip() {
    let options = ConvertOptions {
        kpi_split: Some(Split::Train),
        ..Default::default()
    };
    let data = round_trip(Format::Kpi, &fixture("kpi/train.csv"), &options);
    let train = data.train.unwrap();
    assert_eq!(train.len(), 3);
    assert!(train.series().iter().all(|s| s.len() == 30));
    assert_eq!(train.series()[0].id(), "02e99bd4f6cfb33f");
}

#[test]
fn unknown_column_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("kpi.csv");
    fs::write(&f, "timestamp,value,label,KPI ID,extra\n1,0.5,0,a,9\n").unwrap();
    let err = convert(Format::Kpi, &f, &ConvertOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("unknown column `extra`"), "{err}");
}

#[test]
fn missing_dump_directory_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    assert!(convert(Format::Smd, dir.path(), &ConvertOptions::default()).is_err());
    assert!(convert(Format::Nasa, dir.path(), &ConvertOptions::default()).is_err());
}
