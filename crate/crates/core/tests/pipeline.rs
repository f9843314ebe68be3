use std::collections::BTreeSet;

use hrdiff_core::config::RunConfig;
use hrdiff_core::io::{read_ingestion, Provenance};
use hrdiff_core::pipeline::*;
use hrdiff_core::series::{contiguous_runs, ActivityLabel};
use hrdiff_core::synthgen::{generate, SegmentKey};

fn cfg() -> RunConfig {
    let mut c = RunConfig::default();
    c.generator.n_patients = 4;
    c.generator.days = 2;
    c
}

#[test]
fn windows_never_leak_across_splits() {
    let c = cfg();
    let series = annotate_generated(&generate(&c.generator, 3).unwrap()).unwrap();
    let prep = prepare(&series, &c).unwrap();
    let s = &prep.split;
    assert!(s.train.is_disjoint(&s.val) && s.train.is_disjoint(&s.test) && s.val.is_disjoint(&s.test));
    let (tr, va, te) = (
        window_segments(&prep.windows.train),
        window_segments(&prep.windows.val),
        window_segments(&prep.windows.test),
    );
    assert!(tr.is_subset(&s.train) && va.is_subset(&s.val) && te.is_subset(&s.test));
    let n = (s.train.len() + s.val.len() + s.test.len()) as f64;
    for (got, ratio) in [(s.train.len(), 0.65), (s.val.len(), 0.15), (s.test.len(), 0.2)] {
        assert!((got as f64 - ratio * n).abs() <= 1.0, "{got} vs {}", ratio * n);
    }
    let all: BTreeSet<SegmentKey> = series
        .iter()
        .flat_map(|p| p.segments.iter().map(move |g| SegmentKey { patient: p.patient, start: g.start }))
        .collect();
    assert_eq!(all.len(), n as usize);
}

#[test]
fn windows_are_anchored_and_contiguous() {
    let c = cfg();
    let series = annotate_generated(&generate(&c.generator, 4).unwrap()).unwrap();
    let prep = prepare(&series, &c).unwrap();
    let l = c.windows.length as i64;
    for w in prep.windows.train.iter().chain(&prep.windows.test) {
        assert_eq!(w.source.len(), c.windows.length);
        let t0 = w.source[0].timestamp;
        for (i, f) in w.source.iter().enumerate() {
            assert_eq!(f.timestamp, t0 + i as i64);
        }
        for (i, t) in w.target.iter().enumerate() {
            assert_eq!(t.timestamp, t0 + l + i as i64);
        }
        assert!(w.anchor_activity.is_activity());
        assert!(w.target[0].timestamp >= w.segment_start);
        // Intensities are scaled into [0, 1].
        assert!(w.source.iter().all(|f| f.intensity.0.iter().all(|v| (0.0..=1.0).contains(v))));
    }
}

#[test]
fn prepare_is_deterministic_and_seed_sensitive() {
    let c = cfg();
    let series = annotate_generated(&generate(&c.generator, 5).unwrap()).unwrap();
    let a = prepare(&series, &c).unwrap();
    let b = prepare(&series, &c).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.windows.train, b.windows.train);
    let mut c2 = c.clone();
    c2.run.seed += 1;
    let d = prepare(&series, &c2).unwrap();
    assert_ne!(a.split, d.split);
}

#[test]
fn cleaning_can_be_disabled() {
    let mut c = cfg();
    c.run.apply_cleaning = false;
    let series = annotate_generated(&generate(&c.generator, 6).unwrap()).unwrap();
    let prep = prepare(&series, &c).unwrap();
    assert_eq!(prep.cleaned, series);
    assert_eq!(prep.report.outliers_interpolated, 0);
    assert!(prep.report.mean_smoothing_rmse.is_none());
    c.run.apply_cleaning = true;
    let cleaned = prepare(&series, &c).unwrap();
    assert!(cleaned.report.outliers_interpolated > 0);
    assert_ne!(cleaned.cleaned, series);
    // Sudden-change statistics always describe the raw input.
    assert_eq!(cleaned.report.sudden_changes, prep.report.sudden_changes);
}

#[test]
fn dataset_round_trips_through_csv() {
    let c = cfg();
    let data = generate(&c.generator, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, &Provenance::new("h", 8)).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, annotate_generated(&data).unwrap());
    assert!(read_dataset(&dir.path().join("missing")).is_err());
    let empty = tempfile::tempdir().unwrap();
    assert!(read_dataset(empty.path()).is_err());
}

#[test]
fn history_window_uses_latest_minutes() {
    let c = cfg();
    let data = generate(&c.generator, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data[..1], &Provenance::new("h", 9)).unwrap();
    let records = read_ingestion(&dir.path().join("patient_000.csv")).unwrap();
    let scaler = hrdiff_core::series::IntensityScaler { min: [0.0; 4], max: [1.0; 4] };
    let w = history_window(&records, ActivityLabel::Running, &c.features, &scaler, 10).unwrap();
    let last = records.last().unwrap().timestamp;
    assert_eq!(w.source.last().unwrap().timestamp, last);
    assert_eq!(w.source[0].timestamp, last - 9);
    assert_eq!(w.target[0].timestamp, last + 1);
    assert!(w.target.iter().all(|t| t.activity == ActivityLabel::Running && t.hr.is_nan()));
    assert_eq!(w.source.last().unwrap().hr, records.last().unwrap().hr.unwrap());

    assert!(history_window(&records, ActivityLabel::None, &c.features, &scaler, 10).is_err());
    let runs = contiguous_runs(&records, |r| r.timestamp);
    let short = &runs.last().unwrap()[..20];
    assert!(history_window(short, ActivityLabel::Running, &c.features, &scaler, 10).is_err());
}
