//! The pipeline stages behind each CLI subcommand, writing artifacts under `out`.

use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::diffusion::forecast;
use crate::error::{Error, Result};
use crate::experiments::{
    evaluate, load_model, save_model, sweep, train, Evaluation, ModelMeta, SweepAxis, SweepTable, TrainReport,
    WindowForecast,
};
use crate::io::{
    read_ingestion, write_curves, write_feature_dump, write_forecasts, write_json, write_metrics, write_sweep,
    Provenance, VERSION,
};
use crate::model::ModelInput;
use crate::pipeline::{annotate_generated, history_window, prepare, read_dataset, write_dataset, write_series, PatientSeries};
use crate::series::ActivityLabel;
use crate::synthgen::generate;

pub fn provenance(cfg: &RunConfig) -> Provenance {
    Provenance::new(&cfg.hash(), cfg.run.seed)
}

/// Reads a cohort from `data`, or generates one from the config.
pub fn cohort(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<PatientSeries>> {
    match data {
        Some(dir) => read_dataset(dir),
        None => annotate_generated(&generate(&cfg.generator, cfg.run.seed)?),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenerateSummary {
    pub patients: usize,
    pub samples: usize,
    pub segments: usize,
}

pub fn run_generate(cfg: &RunConfig, out: &Path) -> Result<GenerateSummary> {
    std::fs::create_dir_all(out)?;
    let prov = provenance(cfg);
    let data = generate(&cfg.generator, cfg.run.seed)?;
    write_dataset(out, &data, &prov)?;
    let summary = GenerateSummary {
        patients: data.len(),
        samples: data.iter().map(|p| p.hr.len()).sum(),
        segments: data.iter().map(|p| p.segments.len()).sum(),
    };
    write_json(&out.join("generate.json"), &summary, &prov)?;
    Ok(summary)
}

/// Writes `cleaned/` (ingestion format), `features/` (feature dumps) and
/// `preprocess_report.json`.
pub fn run_preprocess(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<()> {
    let prov = provenance(cfg);
    let prep = prepare(&cohort(cfg, data)?, cfg)?;
    let cleaned = out.join("cleaned");
    let features = out.join("features");
    std::fs::create_dir_all(&cleaned)?;
    std::fs::create_dir_all(&features)?;
    for s in &prep.cleaned {
        write_series(&cleaned, s, &prov)?;
    }
    for (id, fv) in &prep.features {
        write_feature_dump(&features.join(format!("patient_{id:03}.csv")), fv, &prov)?;
    }
    write_json(&out.join("preprocess_report.json"), &prep.report, &prov)
}

/// Trains, writes the checkpoint and reports, and returns the report. A
/// diverged run still writes its artifacts; check `report.diverged`.
pub fn run_train(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> Result<TrainReport> {
    std::fs::create_dir_all(out)?;
    let prov = provenance(cfg);
    let prep = prepare(&cohort(cfg, data)?, cfg)?;
    let trained = train(&prep.windows, &cfg.model, &cfg.train, cfg.run.seed, &prov.config_hash)?;
    let meta = ModelMeta {
        version: VERSION.into(),
        config_hash: prov.config_hash.clone(),
        seed: cfg.run.seed,
        model: cfg.model.clone(),
        normalizer: trained.normalizer,
        features: cfg.features.clone(),
        intensity_scaler: prep.report.intensity_scaler.clone(),
        train: cfg.train.clone(),
    };
    save_model(&out.join("model.ckpt"), &trained.model, &meta)?;
    write_json(&out.join("train_report.json"), &trained.report, &prov)?;
    write_curves(&out.join("curves.csv"), &trained.report, &prov)?;
    if let Some(ev) = &trained.evaluation {
        write_evaluation(out, ev, &prov)?;
    }
    Ok(trained.report)
}

#[derive(Debug, Clone, Serialize)]
struct ForecastInfo {
    schedule_kind: String,
    steps: usize,
    samples: usize,
    seed: u64,
    model_config_hash: String,
}

/// Forecasts the minutes after `input` and writes `forecast.csv` and
/// `forecast.json`; returns the forecast in BPM.
pub fn run_forecast(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    activity: ActivityLabel,
    out: &Path,
) -> Result<Vec<f64>> {
    std::fs::create_dir_all(out)?;
    let prov = provenance(cfg);
    let (model, meta) = load_model(checkpoint)?;
    let history = read_ingestion(input)?;
    let window = history_window(&history, activity, &meta.features, &meta.intensity_scaler, meta.model.window)
        .map_err(|e| match e {
            Error::Data { .. } => e,
            other => Error::Data {
                path: input.to_path_buf(),
                row: 0,
                message: other.to_string(),
            },
        })?;
    let sched = meta.train.schedule()?;
    let mi = ModelInput::from_window(&window, &meta.normalizer)?;
    let pred = forecast(&model, &mi, &sched, meta.train.samples, cfg.run.seed, &meta.normalizer)?;
    let fc = WindowForecast {
        window_id: 0,
        activity: activity.to_string(),
        predicted: pred.clone(),
        actual: vec![f64::NAN; window.len()],
    };
    write_forecasts(&out.join("forecast.csv"), &[fc], &prov)?;
    let info = ForecastInfo {
        schedule_kind: meta.train.schedule.to_string(),
        steps: sched.steps(),
        samples: meta.train.samples,
        seed: cfg.run.seed,
        model_config_hash: meta.config_hash,
    };
    write_json(&out.join("forecast.json"), &info, &prov)?;
    Ok(pred)
}

/// Forecasts the test split with a trained checkpoint. The checkpoint's model
/// and feature settings must match the config.
pub fn run_evaluate(cfg: &RunConfig, data: Option<&Path>, checkpoint: &Path, out: &Path) -> Result<Evaluation> {
    std::fs::create_dir_all(out)?;
    let prov = provenance(cfg);
    let (model, meta) = load_model(checkpoint)?;
    if meta.model != cfg.model || meta.features != cfg.features {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different model or feature configuration",
            checkpoint.display()
        )));
    }
    let prep = prepare(&cohort(cfg, data)?, cfg)?;
    let ev = evaluate(&model, &meta.normalizer, &prep.windows.test, &cfg.train, cfg.run.seed)?;
    write_evaluation(out, &ev, &prov)?;
    Ok(ev)
}

/// One table per axis as `sweep_<axis>.json` and `sweep_<axis>.csv`.
pub fn run_sweep(cfg: &RunConfig, data: Option<&Path>, axes: &[SweepAxis], out: &Path) -> Result<Vec<SweepTable>> {
    std::fs::create_dir_all(out)?;
    let prov = provenance(cfg);
    let prep = prepare(&cohort(cfg, data)?, cfg)?;
    let mut tables = Vec::new();
    for &axis in axes {
        let table = sweep(axis, &prep.windows, &cfg.model, &cfg.train, cfg.run.seed, &prov.config_hash)?;
        let name = axis.as_str();
        write_json(&out.join(format!("sweep_{name}.json")), &table, &prov)?;
        write_sweep(&out.join(format!("sweep_{name}.csv")), &table, &prov)?;
        tables.push(table);
    }
    Ok(tables)
}

fn write_evaluation(dir: &Path, ev: &Evaluation, prov: &Provenance) -> Result<()> {
    write_json(&dir.join("evaluation.json"), ev, prov)?;
    write_forecasts(&dir.join("forecasts.csv"), &ev.forecasts, prov)?;
    let mut rows = vec![("overall".to_string(), &ev.overall)];
    rows.extend(ev.per_activity.iter().map(|(k, m)| (k.clone(), m)));
    write_metrics(&dir.join("metrics.csv"), &rows, prov)
}
