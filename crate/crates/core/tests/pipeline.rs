use contextad::detector::{loss_from_exponent, Aggregation, Detector};
use contextad::encoder::{Encoder, EncoderConfig};
use contextad::evalkit::{evaluate_dataset, select_threshold, EvalMode};
use contextad::nn::{read_checkpoint, write_checkpoint};
use contextad::series::WindowSpec;
use contextad::synthgen::{make_width_suite, SuiteCell, SuiteConfig};
use contextad::trainer::{fit, TrainConfig};
use proptest::prelude::*;

fn small_cell() -> SuiteCell {
    let config = SuiteConfig {
        train_series: 4,
        test_series: 3,
        length: 300,
        anomalies_per_series: 2,
        margin: 40,
        min_gap: 40,
        ..Default::default()
    };
    make_width_suite(&[0.0], &[5], &config).unwrap().remove(0)
}

fn small_config() -> TrainConfig {
    let spec = WindowSpec::new(16, 2, 1).unwrap();
    let mut encoder = EncoderConfig::for_window(1, spec.length());
    encoder.hidden_channels = 6;
    encoder.embedding_dim = 6;
    let mut cfg = TrainConfig::new(spec, encoder);
    cfg.series_per_batch = 4;
    cfg.crops_per_series = 3;
    cfg.epochs = 2;
    cfg.batches_per_epoch = 6;
    cfg.augment.coe_rate = 1.0;
    cfg.augment.mixup_rate = 0.5;
    cfg.augment.po_count_per_series = 10;
    cfg.seed = 9;
    cfg
}

fn detector(cfg: &TrainConfig, params: contextad::nn::ParameterSet) -> Detector {
    Detector::new(Encoder::new(cfg.encoder.clone()).unwrap(), params, cfg.detector.clone()).unwrap()
}

#[test]
fn fit_is_reproducible() {
    let cell = small_cell();
    let cfg = small_config();
    let (a, ra) = fit(&cell.train, None, &cfg).unwrap();
    let (b, rb) = fit(&cell.train, None, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.without_timing(), rb.without_timing());
    assert_eq!(ra.optimizer_steps, 12);

    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(fit(&cell.train, None, &other).unwrap().0, a);
}

#[test]
fn train_score_evaluate() {
    let cell = small_cell();
    let cfg = small_config();
    let (params, _) = fit(&cell.train, None, &cfg).unwrap();
    let det = detector(&cfg, params);
    let traces: Vec<_> = cell
        .test
        .series()
        .iter()
        .map(|s| det.rolling_score_padded(s, cfg.window, Aggregation::Mean).unwrap())
        .collect();
    for (trace, series) in traces.iter().zip(cell.test.series()) {
        assert_eq!(trace.len(), series.len());
        assert!(trace.scores.iter().all(|s| s.is_some_and(f64::is_finite)));
        assert!(trace.probabilities.iter().flatten().all(|p| (0.0..=1.0).contains(p)));
    }
    let adjusted = select_threshold(&traces, &cell.test, EvalMode::Adjusted).unwrap();
    let threshold = adjusted.threshold.unwrap();
    let at = evaluate_dataset(&traces, &cell.test, threshold, EvalMode::Adjusted).unwrap();
    assert_eq!(at.f1, adjusted.f1);
    let pointwise = evaluate_dataset(&traces, &cell.test, threshold, EvalMode::Pointwise).unwrap();
    assert!(at.f1 >= pointwise.f1);
}

#[test]
fn checkpoint_preserves_scores() {
    let cell = small_cell();
    let cfg = small_config();
    let (params, _) = fit(&cell.train, None, &cfg).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &params, &serde_json::Value::Null).unwrap();
    let (restored, _) = read_checkpoint(buf.as_slice()).unwrap();
    let series = &cell.test.series()[0];
    let a = detector(&cfg, params).rolling_score(series, cfg.window, Aggregation::MaxFirstAlert).unwrap();
    let b = detector(&cfg, restored).rolling_score(series, cfg.window, Aggregation::MaxFirstAlert).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn loss_is_finite_and_nonnegative(s in 0.0f64..100.0, y in 0.0f64..=1.0) {
        let l = loss_from_exponent(s, y);
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn loss_matches_direct_form_away_from_clamp(s in 1e-3f64..20.0, y in 0.0f64..=1.0) {
        let direct = (1.0 - y) * s - y * (1.0 - (-s).exp()).ln();
        prop_assert!((loss_from_exponent(s, y) - direct).abs() <= 1e-9 * direct.abs().max(1.0));
    }
}
