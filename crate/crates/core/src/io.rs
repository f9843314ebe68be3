//! CSV and JSON artifacts.
//!
//! Timestamps are ISO-8601 in UTC (`2024-03-04T06:00:00Z`); a value without
//! an offset is read as UTC and seconds must be zero. Every file written here
//! starts with a `#` provenance line (tool, version, config hash, seed) that
//! readers skip.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{MetricSet, SweepTable, TrainReport, WindowForecast};
use crate::features::FeatureVector;
use crate::series::{ActivityLabel, ActivitySegment, AnnotatedSample, HrSample, IntensityVector, Minute};

pub const TOOL: &str = "hrdiff";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const INGEST_HEADER: [&str; 6] =
    ["timestamp_iso8601", "hr_bpm", "sedentary", "lightly_active", "fairly_active", "very_active"];
pub const SEGMENT_HEADER: [&str; 3] = ["label", "start_iso8601", "duration_min"];
pub const FEATURE_HEADER: [&str; 15] = [
    "hr", "sed", "light", "fair", "very", "activity", "month", "dom", "dow", "hour", "minute", "grad", "rstd5",
    "ema5", "trend5_15",
];
pub const FORECAST_HEADER: [&str; 4] = ["window_id", "step", "hr_pred_bpm", "hr_true_bpm"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Provenance {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_hash: config_hash.into(),
            seed,
        }
    }

    pub fn comment_line(&self) -> String {
        format!(
            "# tool={} version={} config_hash={} seed={}",
            self.tool, self.version, self.config_hash, self.seed
        )
    }
}

/// A JSON artifact: provenance plus the payload's own fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

pub fn format_timestamp(t: Minute) -> String {
    DateTime::from_timestamp(t * 60, 0)
        .expect("timestamp out of calendar range")
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

pub fn parse_timestamp(s: &str) -> std::result::Result<Minute, String> {
    let s = s.trim();
    let secs = match DateTime::parse_from_rfc3339(s) {
        Ok(dt) => dt.timestamp(),
        Err(_) => ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
            .map(|dt| dt.and_utc().timestamp())
            .ok_or_else(|| format!("unparseable timestamp {s:?}"))?,
    };
    if secs % 60 != 0 {
        return Err(format!("timestamp {s:?} is not on a whole minute"));
    }
    Ok(secs.div_euclid(60))
}

fn data_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    data_err(path, row, e.to_string())
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| data_err(path, 0, e.to_string()))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn writer(path: &Path, prov: &Provenance) -> Result<csv::Writer<BufWriter<File>>> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{}", prov.comment_line())?;
    Ok(csv::Writer::from_writer(f))
}

/// Deserialized rows paired with their 1-based line numbers.
fn rows<T: for<'de> Deserialize<'de>>(path: &Path, required: &[&str]) -> Result<Vec<(usize, T)>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let header_line = rdr.position().line() as usize;
    for col in required {
        if !headers.iter().any(|h| h == *col) {
            return Err(data_err(path, header_line.max(1), format!("missing column {col:?}")));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = rec.deserialize(Some(&headers)).map_err(|e| data_err(path, line, e.to_string()))?;
        out.push((line, row));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct IngestRow {
    timestamp_iso8601: String,
    hr_bpm: Option<f64>,
    sedentary: f64,
    lightly_active: f64,
    fairly_active: f64,
    very_active: f64,
    #[serde(default)]
    activity: Option<String>,
}

/// One ingestion row: HR may be missing, intensity is always present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestRecord {
    pub timestamp: Minute,
    pub hr: Option<f64>,
    pub intensity: IntensityVector,
    /// Present only in files with an optional `activity` column.
    pub activity: Option<ActivityLabel>,
}

pub fn read_ingestion(path: &Path) -> Result<Vec<IngestRecord>> {
    let mut out = Vec::new();
    for (line, row) in rows::<IngestRow>(path, &INGEST_HEADER)? {
        let timestamp = parse_timestamp(&row.timestamp_iso8601).map_err(|m| data_err(path, line, m))?;
        let intensity = IntensityVector([row.sedentary, row.lightly_active, row.fairly_active, row.very_active]);
        if intensity.0.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(data_err(path, line, "intensity values must be finite and non-negative"));
        }
        if let Some(h) = row.hr_bpm {
            if !h.is_finite() || h <= 0.0 {
                return Err(data_err(path, line, format!("heart rate {h} must be positive")));
            }
        }
        let activity = match row.activity.as_deref() {
            None | Some("") => None,
            Some(s) => Some(s.parse::<ActivityLabel>().map_err(|e| data_err(path, line, e.to_string()))?),
        };
        out.push(IngestRecord {
            timestamp,
            hr: row.hr_bpm,
            intensity,
            activity,
        });
    }
    Ok(out)
}

/// Splits ingestion records into the HR and intensity streams.
pub fn split_streams(records: &[IngestRecord]) -> (Vec<HrSample>, Vec<(Minute, IntensityVector)>) {
    let hr = records
        .iter()
        .filter_map(|r| r.hr.map(|hr| HrSample { timestamp: r.timestamp, hr }))
        .collect();
    let intensity = records.iter().map(|r| (r.timestamp, r.intensity)).collect();
    (hr, intensity)
}

pub fn write_ingestion(path: &Path, samples: &[AnnotatedSample], prov: &Provenance) -> Result<()> {
    let mut w = writer(path, prov)?;
    w.write_record(INGEST_HEADER)?;
    for s in samples {
        let mut rec = vec![format_timestamp(s.timestamp), fmt(s.hr)];
        rec.extend(s.intensity.0.iter().map(|v| fmt(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SegmentRow {
    label: String,
    start_iso8601: String,
    duration_min: i64,
}

pub fn read_segments(path: &Path) -> Result<Vec<ActivitySegment>> {
    let mut out = Vec::new();
    for (line, row) in rows::<SegmentRow>(path, &SEGMENT_HEADER)? {
        let label: ActivityLabel = row.label.parse().map_err(|e: Error| data_err(path, line, e.to_string()))?;
        if !label.is_activity() {
            return Err(data_err(path, line, "segment label `none` is not an activity"));
        }
        let start = parse_timestamp(&row.start_iso8601).map_err(|m| data_err(path, line, m))?;
        if row.duration_min <= 0 {
            return Err(data_err(path, line, format!("non-positive duration {}", row.duration_min)));
        }
        out.push(ActivitySegment::new(label, start, row.duration_min));
    }
    Ok(out)
}

pub fn write_segments(path: &Path, segments: &[ActivitySegment], prov: &Provenance) -> Result<()> {
    let mut w = writer(path, prov)?;
    w.write_record(SEGMENT_HEADER)?;
    for s in segments {
        w.write_record([s.label.to_string(), format_timestamp(s.start), s.duration.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_feature_dump(path: &Path, features: &[FeatureVector], prov: &Provenance) -> Result<()> {
    let mut w = writer(path, prov)?;
    w.write_record(FEATURE_HEADER)?;
    for f in features {
        let t = f.temporal;
        let mut rec = vec![fmt(f.hr)];
        rec.extend(f.intensity.0.iter().map(|v| fmt(*v)));
        rec.push(f.activity.to_string());
        rec.extend([t.month, t.day_of_month, t.day_of_week, t.hour, t.minute].map(|v| v.to_string()));
        rec.extend([f.grad, f.rstd5, f.ema5, f.trend].map(fmt));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per forecast step; `hr_true_bpm` is empty when unknown.
pub fn write_forecasts(path: &Path, forecasts: &[WindowForecast], prov: &Provenance) -> Result<()> {
    let mut w = writer(path, prov)?;
    w.write_record(FORECAST_HEADER)?;
    for f in forecasts {
        for (step, p) in f.predicted.iter().enumerate() {
            let truth = f.actual.get(step).filter(|v| v.is_finite()).map(|v| fmt(*v)).unwrap_or_default();
            w.write_record([f.window_id.to_string(), (step + 1).to_string(), fmt(*p), truth])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, body: &T, prov: &Provenance) -> Result<()> {
    let art = Artifact {
        provenance: prov.clone(),
        body,
    };
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, &art)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Artifact<T>> {
    let file = File::open(path).map_err(|e| data_err(path, 0, e.to_string()))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| data_err(path, e.line(), e.to_string()))
}

/// One row per group: `group, n, mae, mape, rmse, r2` (r2 empty when undefined).
pub fn write_metrics(path: &Path, rows: &[(String, &MetricSet)], prov: &Provenance) -> Result<()> {
    let mut w = writer(path, prov)?;
    w.write_record(["group", "n", "mae", "mape", "rmse", "r2"])?;
    for (g, m) in rows {
        w.write_record([
            g.clone(),
            m.n.to_string(),
            fmt(m.mae),
            fmt(m.mape),
            fmt(m.rmse),
            m.r2.map(fmt).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curves(path: &Path, report: &TrainReport, prov: &Provenance) -> Result<()> {
    let mut w = writer(path, prov)?;
    w.write_record(["epoch", "train_loss", "val_loss", "learning_rate"])?;
    for (i, tl) in report.train_loss.iter().enumerate() {
        let vl = report.val_loss.get(i).filter(|v| v.is_finite()).map(|v| fmt(*v)).unwrap_or_default();
        w.write_record([(i + 1).to_string(), fmt(*tl), vl, fmt(report.learning_rate[i])])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep(path: &Path, table: &SweepTable, prov: &Provenance) -> Result<()> {
    let mut w = writer(path, prov)?;
    w.write_record(["label", "schedule", "steps", "loss", "seed", "epochs", "mae", "mape", "rmse", "r2"])?;
    for r in &table.rows {
        let m = r.metrics.as_ref();
        let get = |f: fn(&MetricSet) -> Option<f64>| m.and_then(f).map(fmt).unwrap_or_default();
        w.write_record([
            r.label.clone(),
            r.schedule.to_string(),
            r.diffusion_steps.to_string(),
            r.loss.label(),
            r.seed.to_string(),
            r.epochs_run.to_string(),
            get(|m| Some(m.mae)),
            get(|m| Some(m.mape)),
            get(|m| Some(m.rmse)),
            get(|m| m.r2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-tripping decimal form.
fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn patient_paths(dir: &Path, patient: u32) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("patient_{patient:03}.csv")),
        dir.join(format!("patient_{patient:03}_segments.csv")),
    )
}

/// Patient ids with both an ingestion and a segment file in `dir`, sorted.
pub fn list_patients(dir: &Path) -> Result<Vec<u32>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(id) = name.strip_prefix("patient_").and_then(|r| r.strip_suffix(".csv")) else {
            continue;
        };
        if let Ok(id) = id.parse::<u32>() {
            if patient_paths(dir, id).1.exists() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}
