//! End-to-end data preparation: annotate, clean, scale, featurize, window and
//! split by activity segment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{
    list_patients, patient_paths, read_ingestion, read_segments, split_streams, write_ingestion, write_segments,
    IngestRecord, Provenance,
};
use crate::experiments::SplitWindows;
use crate::features::{build_feature_vectors, make_windows, FeatureConfig, FeatureVector, FeatureWindow, TargetPoint};
use crate::preprocess::{clean_runs, sudden_changes, summarize_changes, SuddenChangeStats};
use crate::series::{
    contiguous_runs, fuse_series, label_series, ActivityLabel, ActivitySegment, AnnotatedSample, HrSample, IntensityScaler,
    IntensityVector, Minute,
};
use crate::synthgen::{split, PatientData, SegmentKey, SegmentSplit};
use crate::util::derive_seed;

const TAG_CLEAN: u64 = 0x434C;
const TAG_SPLIT: u64 = 0x5350;

/// One patient's fused and labeled series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSeries {
    pub patient: u32,
    pub samples: Vec<AnnotatedSample>,
    pub segments: Vec<ActivitySegment>,
}

pub fn annotate(
    patient: u32,
    hr: &[HrSample],
    intensity: &[(Minute, IntensityVector)],
    segments: &[ActivitySegment],
) -> Result<PatientSeries> {
    let fused = fuse_series(hr, intensity)?;
    Ok(PatientSeries {
        patient,
        samples: label_series(&fused, segments)?,
        segments: segments.to_vec(),
    })
}

pub fn annotate_generated(data: &[PatientData]) -> Result<Vec<PatientSeries>> {
    data.iter()
        .map(|p| annotate(p.patient, &p.hr, &p.intensity, &p.segments))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub patients: usize,
    pub samples: usize,
    pub contiguous_runs: usize,
    pub cleaning_applied: bool,
    pub outliers_interpolated: usize,
    /// Mean over patients of the raw-vs-smoothed RMSE, when cleaning ran.
    pub mean_smoothing_rmse: Option<f64>,
    /// Computed on the raw input.
    pub sudden_changes: SuddenChangeStats,
    pub segments: [usize; 3],
    pub windows: [usize; 3],
    pub windows_per_activity: BTreeMap<String, usize>,
    pub skipped_segments: usize,
    pub intensity_scaler: IntensityScaler,
}

pub struct Prepared {
    pub windows: SplitWindows,
    /// Samples after cleaning, before intensity scaling.
    pub cleaned: Vec<PatientSeries>,
    /// Feature vectors per patient, concatenated over contiguous runs.
    pub features: Vec<(u32, Vec<FeatureVector>)>,
    pub split: SegmentSplit,
    pub report: PipelineReport,
}

/// Runs every preparation stage with seeds derived from `cfg.run.seed`.
pub fn prepare(series: &[PatientSeries], cfg: &RunConfig) -> Result<Prepared> {
    let seed = cfg.run.seed;
    let pre = &cfg.preprocess;

    let mut events = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0;
    let mut n_runs = 0;
    let mut cleaned: Vec<Vec<Vec<AnnotatedSample>>> = Vec::with_capacity(series.len());
    let mut outliers = 0;
    let mut rmses = Vec::new();
    for p in series {
        let runs = contiguous_runs(&p.samples, |s| s.timestamp);
        n_runs += runs.len();
        for run in &runs {
            let hr: Vec<f64> = run.iter().map(|s| s.hr).collect();
            for mut e in sudden_changes(&hr, pre.sudden_threshold, &pre.sudden_horizons) {
                e.index += offset;
                events.push(e);
            }
            labels.extend(run.iter().map(|s| s.activity));
            offset += run.len();
        }
        if cfg.run.apply_cleaning && !runs.is_empty() {
            let (c, rep) = clean_runs(&runs, pre, derive_seed(seed, TAG_CLEAN, p.patient as u64))?;
            outliers += rep.n_outliers;
            rmses.push(rep.rmse_raw_vs_smoothed);
            cleaned.push(c);
        } else {
            cleaned.push(runs.iter().map(|r| r.to_vec()).collect());
        }
    }
    let sudden = summarize_changes(&events, labels.into_iter(), offset, pre.sudden_threshold);

    let keys: Vec<SegmentKey> = series
        .iter()
        .flat_map(|p| p.segments.iter().map(move |s| SegmentKey { patient: p.patient, start: s.start }))
        .collect();
    let seg_split = split(&keys, cfg.split.ratios, derive_seed(seed, TAG_SPLIT, 0))?;

    // Intensity ranges come from minutes inside training segments only.
    let mut train_intensity = Vec::new();
    for (p, runs) in series.iter().zip(&cleaned) {
        let train_segs: Vec<&ActivitySegment> = p
            .segments
            .iter()
            .filter(|s| seg_split.train.contains(&SegmentKey { patient: p.patient, start: s.start }))
            .collect();
        for s in runs.iter().flatten() {
            if train_segs.iter().any(|g| g.contains(s.timestamp)) {
                train_intensity.push(s.intensity);
            }
        }
    }
    let scaler = IntensityScaler::fit(&train_intensity);

    let mut out = SplitWindows::default();
    let mut features = Vec::with_capacity(series.len());
    let mut skipped = 0;
    for (p, runs) in series.iter().zip(&cleaned) {
        let mut all = Vec::new();
        for run in runs {
            let scaled: Vec<AnnotatedSample> = run
                .iter()
                .map(|s| AnnotatedSample { intensity: scaler.apply(&s.intensity), ..*s })
                .collect();
            let fv = build_feature_vectors(&scaled, &cfg.features);
            // Warm-up rows are dropped per run, so gaps may split further.
            for piece in contiguous_runs(&fv, |f| f.timestamp) {
                let set = make_windows(piece, &p.segments, &cfg.windows, p.patient)?;
                skipped += set.skipped;
                for w in set.windows {
                    assign(&mut out, &seg_split, w);
                }
            }
            all.extend(fv);
        }
        features.push((p.patient, all));
    }

    let mut per_activity = BTreeMap::new();
    for w in out.train.iter().chain(&out.val).chain(&out.test) {
        *per_activity.entry(w.anchor_activity.to_string()).or_insert(0) += 1;
    }
    let report = PipelineReport {
        patients: series.len(),
        samples: offset,
        contiguous_runs: n_runs,
        cleaning_applied: cfg.run.apply_cleaning,
        outliers_interpolated: outliers,
        mean_smoothing_rmse: (!rmses.is_empty()).then(|| rmses.iter().sum::<f64>() / rmses.len() as f64),
        sudden_changes: sudden,
        segments: [seg_split.train.len(), seg_split.val.len(), seg_split.test.len()],
        windows: [out.train.len(), out.val.len(), out.test.len()],
        windows_per_activity: per_activity,
        skipped_segments: skipped,
        intensity_scaler: scaler,
    };
    let cleaned = series
        .iter()
        .zip(cleaned)
        .map(|(p, runs)| PatientSeries {
            patient: p.patient,
            samples: runs.concat(),
            segments: p.segments.clone(),
        })
        .collect();
    Ok(Prepared {
        windows: out,
        cleaned,
        features,
        split: seg_split,
        report,
    })
}

fn assign(out: &mut SplitWindows, s: &SegmentSplit, w: FeatureWindow) {
    let key = SegmentKey { patient: w.patient, start: w.segment_start };
    if s.train.contains(&key) {
        out.train.push(w);
    } else if s.val.contains(&key) {
        out.val.push(w);
    } else if s.test.contains(&key) {
        out.test.push(w);
    }
}

/// Segment keys that contributed at least one window, per split.
pub fn window_segments(windows: &[FeatureWindow]) -> BTreeSet<SegmentKey> {
    windows
        .iter()
        .map(|w| SegmentKey { patient: w.patient, start: w.segment_start })
        .collect()
}

/// Writes one ingestion and one segment file per patient.
pub fn write_dataset(dir: &Path, data: &[PatientData], prov: &Provenance) -> Result<()> {
    for p in data {
        let series = annotate(p.patient, &p.hr, &p.intensity, &p.segments)?;
        write_series(dir, &series, prov)?;
    }
    Ok(())
}

pub fn write_series(dir: &Path, s: &PatientSeries, prov: &Provenance) -> Result<()> {
    let (samples, segments) = patient_paths(dir, s.patient);
    write_ingestion(&samples, &s.samples, prov)?;
    write_segments(&segments, &s.segments, prov)
}

/// Reads every patient in `dir` written by [`write_dataset`] or by hand.
pub fn read_dataset(dir: &Path) -> Result<Vec<PatientSeries>> {
    let ids = list_patients(dir)?;
    if ids.is_empty() {
        return Err(Error::Data {
            path: dir.to_path_buf(),
            row: 0,
            message: "no patient_NNN.csv / patient_NNN_segments.csv pairs found".into(),
        });
    }
    ids.into_iter()
        .map(|id| {
            let (samples, segments) = patient_paths(dir, id);
            let (hr, intensity) = split_streams(&read_ingestion(&samples)?);
            let segs = read_segments(&segments)?;
            annotate(id, &hr, &intensity, &segs).map_err(|e| Error::Data {
                path: samples.clone(),
                row: 0,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Builds a forecast window from recent history: the last `length` feature
/// vectors become the source and the next `length` minutes are assumed to
/// carry `next_activity`.
pub fn history_window(
    history: &[IngestRecord],
    next_activity: ActivityLabel,
    features: &FeatureConfig,
    scaler: &IntensityScaler,
    length: usize,
) -> Result<FeatureWindow> {
    if !next_activity.is_activity() {
        return Err(Error::invalid("the forecast horizon needs a real activity label"));
    }
    let (hr, intensity) = split_streams(history);
    let mut samples = fuse_series(&hr, &intensity)?;
    for (s, r) in samples.iter_mut().zip(history.iter().filter(|r| r.hr.is_some())) {
        s.activity = r.activity.unwrap_or(ActivityLabel::None);
        s.intensity = scaler.apply(&s.intensity);
    }
    let runs = contiguous_runs(&samples, |s| s.timestamp);
    let last = runs.last().copied().unwrap_or_default();
    let fv = build_feature_vectors(last, features);
    if fv.len() < length {
        return Err(Error::invalid(format!(
            "history ends with a contiguous run of {} minutes; at least {} are needed",
            last.len(),
            length + features.warmup()
        )));
    }
    let source = fv[fv.len() - length..].to_vec();
    let t0 = source[length - 1].timestamp;
    Ok(FeatureWindow {
        patient: 0,
        segment_start: t0 + 1,
        anchor_activity: next_activity,
        source,
        target: (1..=length as Minute)
            .map(|k| TargetPoint {
                timestamp: t0 + k,
                hr: f64::NAN,
                activity: next_activity,
            })
            .collect(),
    })
}
