use hrdiff_core::autodiff::AdamConfig;
use hrdiff_core::config::RunConfig;
use hrdiff_core::experiments::*;
use hrdiff_core::features::FeatureWindow;
use hrdiff_core::pipeline::{annotate_generated, prepare};
use hrdiff_core::synthgen::generate;
use proptest::prelude::*;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.generator.n_patients = 3;
    c.generator.days = 2;
    c.windows.max_per_segment = 2;
    c.model.d_model = 16;
    c.model.heads = 2;
    c.model.ffn_dim = 32;
    c.train.epochs = 2;
    c.train.batch_size = 8;
    c.train.diffusion_steps = 10;
    c.train.samples = 3;
    c.train.eval_max_windows = 4;
    c
}

fn windows(c: &RunConfig) -> SplitWindows {
    let data = generate(&c.generator, c.run.seed).unwrap();
    prepare(&annotate_generated(&data).unwrap(), c).unwrap().windows
}

/// Straightforward two-pass oracle.
fn oracle(t: &[f64], p: &[f64]) -> (f64, f64, f64, f64) {
    let n = t.len() as f64;
    let e: Vec<f64> = t.iter().zip(p).map(|(a, b)| b - a).collect();
    let mae = e.iter().map(|x| x.abs()).sum::<f64>() / n;
    let mape = t.iter().zip(&e).map(|(a, x)| (x / a).abs()).sum::<f64>() / n * 100.0;
    let rmse = (e.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let mean = t.iter().sum::<f64>() / n;
    let r2 = 1.0 - e.iter().map(|x| x * x).sum::<f64>() / t.iter().map(|a| (a - mean).powi(2)).sum::<f64>();
    (mae, mape, rmse, r2)
}

proptest! {
    #[test]
    fn metrics_match_oracle_and_bounds(pairs in prop::collection::vec((40.0f64..200.0, 30.0f64..220.0), 2..60)) {
        let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = metrics(&t, &p).unwrap();
        let (mae, mape, rmse, r2) = oracle(&t, &p);
        prop_assert!((m.mae - mae).abs() < 1e-9 && (m.mape - mape).abs() < 1e-9 && (m.rmse - rmse).abs() < 1e-9);
        prop_assert!(m.mae <= m.rmse + 1e-12);
        if let Some(r) = m.r2 {
            prop_assert!(r <= 1.0 && (r - r2).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_epochs_reports_init_metrics() {
    let mut c = tiny();
    c.train.epochs = 0;
    let out = train(&windows(&c), &c.model, &c.train, 1, "h").unwrap();
    let r = &out.report;
    assert!(r.train_loss.is_empty() && r.val_loss.is_empty());
    assert_eq!((r.epochs_run, r.best_epoch, r.early_stopped_at), (0, None, None));
    assert!(r.test.is_some());
}

#[test]
fn training_is_bit_deterministic() {
    let c = tiny();
    let w = windows(&c);
    let a = train(&w, &c.model, &c.train, 5, "h").unwrap();
    let b = train(&w, &c.model, &c.train, 5, "h").unwrap();
    // Wall-clock time is the only field allowed to differ, and it is not serialized.
    let json = |r: &TrainReport| serde_json::to_string(r).unwrap();
    assert_eq!(json(&a.report), json(&b.report));
    assert_eq!(a.model.store(), b.model.store());
    let c2 = train(&w, &c.model, &c.train, 6, "h").unwrap();
    assert_ne!(a.report.train_loss, c2.report.train_loss);
}

#[test]
fn per_activity_mae_aggregates_to_overall() {
    let mut c = tiny();
    c.train.eval_max_windows = 0;
    let out = train(&windows(&c), &c.model, &c.train, 2, "h").unwrap();
    let overall = out.report.test.unwrap();
    let per = &out.report.test_per_activity;
    assert!(per.len() > 1);
    let n: usize = per.values().map(|m| m.n).sum();
    let weighted = per.values().map(|m| m.mae * m.n as f64).sum::<f64>() / n as f64;
    assert_eq!(n, overall.n);
    assert!((weighted - overall.mae).abs() < 1e-9);
    assert_eq!(out.report.reference.mae, 2.19);
    assert_eq!(out.report.reference.r2, 0.97);
}

#[test]
fn early_stopping_fires_and_is_recorded() {
    let mut c = tiny();
    c.train.epochs = 30;
    c.train.patience = 1;
    c.train.min_delta = 1e9;
    let out = train(&windows(&c), &c.model, &c.train, 3, "h").unwrap();
    assert_eq!(out.report.early_stopped_at, Some(2));
    assert_eq!(out.report.best_epoch, Some(1));
    assert!(out.report.epochs_run <= c.train.epochs);
}

#[test]
fn divergence_is_flagged_and_best_weights_kept() {
    let mut c = tiny();
    c.train.epochs = 20;
    c.train.adam = AdamConfig { lr: 1e200, ..AdamConfig::default() };
    let out = train(&windows(&c), &c.model, &c.train, 4, "h").unwrap();
    assert!(out.report.diverged.is_some(), "{:?}", out.report.train_loss);
    assert!(out.report.epochs_run < 20);
    for (_, p) in out.model.store().iter() {
        assert!(p.value.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn checkpoint_round_trip_reproduces_forecasts() {
    let c = tiny();
    let w = windows(&c);
    let out = train(&w, &c.model, &c.train, 9, "h").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let meta = ModelMeta {
        version: "t".into(),
        config_hash: "h".into(),
        seed: 9,
        model: c.model.clone(),
        normalizer: out.normalizer,
        features: c.features.clone(),
        intensity_scaler: hrdiff_core::series::IntensityScaler { min: [0.0; 4], max: [1.0; 4] },
        train: c.train.clone(),
    };
    save_model(&path, &out.model, &meta).unwrap();
    let (loaded, back) = load_model(&path).unwrap();
    assert_eq!(back, meta);
    let a = evaluate(&out.model, &out.normalizer, &w.test, &c.train, 1).unwrap();
    let b = evaluate(&loaded, &back.normalizer, &w.test, &c.train, 1).unwrap();
    assert_eq!(a.forecasts, b.forecasts);
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_model(&path).is_err());
}

#[test]
fn sweep_tables_have_paper_layout() {
    let mut c = tiny();
    c.train.epochs = 1;
    c.train.eval_max_windows = 2;
    let w = windows(&c);
    for (axis, labels) in [
        (SweepAxis::Steps, vec!["50", "100", "200"]),
        (SweepAxis::Schedule, vec!["linear", "quadratic", "cosine"]),
        (SweepAxis::Loss, vec!["l1", "huber_1", "huber_0.4", "huber_0.1"]),
    ] {
        let t = sweep(axis, &w, &c.model, &c.train, 11, "h").unwrap();
        assert_eq!(t.rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), labels);
        assert!(t.rows.iter().all(|r| r.seed == 11 && r.metrics.is_some()));
    }
}

/// A small model memorizes 50 windows well enough to forecast them within 3 BPM.
#[test]
fn desk_scale_overfit() {
    let mut c = RunConfig::default();
    c.generator.n_patients = 4;
    c.generator.days = 2;
    c.windows.max_per_segment = 3;
    c.model.d_model = 32;
    c.model.heads = 1;
    c.model.ffn_dim = 64;
    c.model.dropout = 0.0;
    c.train.epochs = 300;
    c.train.patience = 0;
    c.train.lr_milestones = vec![200];
    let all = windows(&c);
    let mut w: Vec<FeatureWindow> = all.train.into_iter().chain(all.val).chain(all.test).collect();
    w.truncate(50);
    assert_eq!(w.len(), 50);
    let data = SplitWindows { train: w.clone(), val: vec![], test: w };
    let out = train(&data, &c.model, &c.train, 1, "h").unwrap();
    let mae = out.report.test.unwrap().mae;
    assert!(mae < 3.0, "train-set MAE {mae}");
}
