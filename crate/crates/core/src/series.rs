//! Fused, activity-annotated per-patient minute series.
//!
//! Timestamps are whole minutes since the Unix epoch. The calendar is fixed
//! to proleptic Gregorian UTC. Gaps in the one-minute cadence split a series
//! into independent contiguous runs; nothing is imputed across a gap.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minutes since 1970-01-01T00:00Z.
pub type Minute = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityCategory {
    Sedentary,
    LightlyActive,
    FairlyActive,
    VeryActive,
}

impl IntensityCategory {
    pub const COUNT: usize = 4;
    pub const ALL: [IntensityCategory; 4] = [
        IntensityCategory::Sedentary,
        IntensityCategory::LightlyActive,
        IntensityCategory::FairlyActive,
        IntensityCategory::VeryActive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Exercise label attached to a minute. `None` marks minutes outside every
/// activity segment and never selects a specialized encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityLabel {
    Running,
    Walking,
    Swimming,
    AerobicWorkout,
    OutdoorBiking,
    Sport,
    Treadmill,
    None,
}

impl ActivityLabel {
    /// Number of real activities (excluding `None`).
    pub const COUNT: usize = 7;
    /// Embedding vocabulary size (activities plus `None`).
    pub const VOCAB: usize = 8;
    pub const ACTIVITIES: [ActivityLabel; 7] = [
        ActivityLabel::Running,
        ActivityLabel::Walking,
        ActivityLabel::Swimming,
        ActivityLabel::AerobicWorkout,
        ActivityLabel::OutdoorBiking,
        ActivityLabel::Sport,
        ActivityLabel::Treadmill,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            7 => Some(ActivityLabel::None),
            _ => Self::ACTIVITIES.get(i).copied(),
        }
    }

    pub fn is_activity(self) -> bool {
        self != ActivityLabel::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivityLabel::Running => "running",
            ActivityLabel::Walking => "walking",
            ActivityLabel::Swimming => "swimming",
            ActivityLabel::AerobicWorkout => "aerobic_workout",
            ActivityLabel::OutdoorBiking => "outdoor_biking",
            ActivityLabel::Sport => "sport",
            ActivityLabel::Treadmill => "treadmill",
            ActivityLabel::None => "none",
        }
    }
}

impl fmt::Display for ActivityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivityLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Ok(match norm.as_str() {
            "running" | "run" => ActivityLabel::Running,
            "walking" | "walk" => ActivityLabel::Walking,
            "swimming" | "swim" => ActivityLabel::Swimming,
            "aerobic_workout" | "aerobic" => ActivityLabel::AerobicWorkout,
            "outdoor_biking" | "outdoor_bike" | "bike" => ActivityLabel::OutdoorBiking,
            "sport" => ActivityLabel::Sport,
            "treadmill" => ActivityLabel::Treadmill,
            "none" | "" => ActivityLabel::None,
            _ => return Err(Error::invalid(format!("unknown activity label {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrSample {
    pub timestamp: Minute,
    pub hr: f64,
}

/// One value per [`IntensityCategory`], in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IntensityVector(pub [f64; IntensityCategory::COUNT]);

impl IntensityVector {
    pub fn one_hot(cat: IntensityCategory) -> Self {
        let mut v = [0.0; 4];
        v[cat.index()] = 1.0;
        IntensityVector(v)
    }

    /// Dominant category; ties resolve to the lower intensity.
    pub fn dominant(&self) -> IntensityCategory {
        let mut best = 0;
        for i in 1..4 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        IntensityCategory::ALL[best]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivitySegment {
    pub label: ActivityLabel,
    pub start: Minute,
    /// Minutes; must be positive.
    pub duration: i64,
}

impl ActivitySegment {
    pub fn new(label: ActivityLabel, start: Minute, duration: i64) -> Self {
        ActivitySegment {
            label,
            start,
            duration,
        }
    }

    /// Inclusive end of the labeled interval.
    pub fn end(&self) -> Minute {
        self.start + self.duration
    }

    pub fn contains(&self, t: Minute) -> bool {
        t >= self.start && t <= self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub timestamp: Minute,
    pub hr: f64,
    pub intensity: IntensityVector,
    pub activity: ActivityLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalFeatures {
    /// 1..=12
    pub month: u32,
    /// 1..=31
    pub day_of_month: u32,
    /// 0..=6, Monday = 0.
    pub day_of_week: u32,
    pub hour: u32,
    pub minute: u32,
}

impl TemporalFeatures {
    pub fn as_array(&self) -> [usize; 5] {
        [
            self.month as usize,
            self.day_of_month as usize,
            self.day_of_week as usize,
            self.hour as usize,
            self.minute as usize,
        ]
    }
}

fn check_increasing(ts: impl Iterator<Item = Minute>, which: &'static str) -> Result<()> {
    let mut prev: Option<Minute> = None;
    for t in ts {
        if let Some(p) = prev {
            if t == p {
                return Err(Error::DuplicateTimestamp(t, which));
            }
            if t < p {
                return Err(Error::NonMonotone {
                    which,
                    prev: p,
                    next: t,
                });
            }
        }
        prev = Some(t);
    }
    Ok(())
}

/// Joins HR and intensity streams on their common timestamps.
pub fn fuse_series(
    hr: &[HrSample],
    intensity: &[(Minute, IntensityVector)],
) -> Result<Vec<AnnotatedSample>> {
    check_increasing(hr.iter().map(|s| s.timestamp), "hr")?;
    check_increasing(intensity.iter().map(|s| s.0), "intensity")?;

    let mut out = Vec::with_capacity(hr.len().min(intensity.len()));
    let (mut i, mut j) = (0, 0);
    while i < hr.len() && j < intensity.len() {
        let (th, tl) = (hr[i].timestamp, intensity[j].0);
        match th.cmp(&tl) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(AnnotatedSample {
                    timestamp: th,
                    hr: hr[i].hr,
                    intensity: intensity[j].1,
                    activity: ActivityLabel::None,
                });
                i += 1;
                j += 1;
            }
        }
    }
    Ok(out)
}

/// Segments sorted by start; stable, so equal starts keep input order.
pub fn sorted_segments(segments: &[ActivitySegment]) -> Vec<ActivitySegment> {
    let mut s = segments.to_vec();
    s.sort_by_key(|seg| seg.start);
    s
}

/// Checks durations and the non-overlap constraint
/// `start[k+1] >= start[k] + duration[k]` on the start-sorted sequence.
/// Indices in the returned error refer to sorted order.
pub fn validate_segments(segments: &[ActivitySegment]) -> Result<()> {
    for (index, seg) in segments.iter().enumerate() {
        if seg.duration <= 0 {
            return Err(Error::NonPositiveDuration {
                index,
                duration: seg.duration,
            });
        }
    }
    let sorted = sorted_segments(segments);
    for (k, pair) in sorted.windows(2).enumerate() {
        if pair[1].start < pair[0].end() {
            return Err(Error::SegmentOverlap {
                first: k,
                second: k + 1,
            });
        }
    }
    Ok(())
}

/// Index into `sorted` of the segment labeling minute `t`. A minute that is
/// both the inclusive end of one segment and the start of the next belongs
/// to the later segment.
pub fn segment_at(sorted: &[ActivitySegment], t: Minute) -> Option<usize> {
    let upto = sorted.partition_point(|s| s.start <= t);
    if upto == 0 {
        return None;
    }
    let k = upto - 1;
    sorted[k].contains(t).then_some(k)
}

/// Assigns each sample the label of the segment containing it (closed
/// interval), or `None`.
pub fn label_series(
    fused: &[AnnotatedSample],
    segments: &[ActivitySegment],
) -> Result<Vec<AnnotatedSample>> {
    validate_segments(segments)?;
    let sorted = sorted_segments(segments);
    Ok(fused
        .iter()
        .map(|s| AnnotatedSample {
            activity: segment_at(&sorted, s.timestamp)
                .map(|k| sorted[k].label)
                .unwrap_or(ActivityLabel::None),
            ..*s
        })
        .collect())
}

pub fn temporal_features(timestamp: Minute) -> TemporalFeatures {
    let dt = DateTime::from_timestamp(timestamp * 60, 0).expect("timestamp out of calendar range");
    TemporalFeatures {
        month: dt.month(),
        day_of_month: dt.day(),
        day_of_week: dt.weekday().num_days_from_monday(),
        hour: dt.hour(),
        minute: dt.minute(),
    }
}

/// Inverse of [`temporal_features`] given the year.
pub fn minute_from_calendar(year: i32, tf: &TemporalFeatures) -> Option<Minute> {
    let dt = NaiveDate::from_ymd_opt(year, tf.month, tf.day_of_month)?
        .and_hms_opt(tf.hour, tf.minute, 0)?
        .and_utc();
    Some(dt.timestamp() / 60)
}

pub fn year_of(timestamp: Minute) -> i32 {
    DateTime::from_timestamp(timestamp * 60, 0)
        .expect("timestamp out of calendar range")
        .year()
}

/// Splits a time-sorted series into maximal runs of consecutive minutes.
pub fn contiguous_runs<T>(samples: &[T], ts: impl Fn(&T) -> Minute) -> Vec<&[T]> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        if i == samples.len() || ts(&samples[i]) != ts(&samples[i - 1]) + 1 {
            if i > start {
                runs.push(&samples[start..i]);
            }
            start = i;
        }
    }
    runs
}

/// Per-category min-max scaling of intensity values, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityScaler {
    pub min: [f64; 4],
    pub max: [f64; 4],
}

impl IntensityScaler {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a IntensityVector>) -> Self {
        let mut min = [f64::INFINITY; 4];
        let mut max = [f64::NEG_INFINITY; 4];
        for v in values {
            for c in 0..4 {
                min[c] = min[c].min(v.0[c]);
                max[c] = max[c].max(v.0[c]);
            }
        }
        for c in 0..4 {
            if !min[c].is_finite() {
                min[c] = 0.0;
                max[c] = 1.0;
            }
        }
        IntensityScaler { min, max }
    }

    /// Maps into [0, 1], clamping values outside the fitted range.
    pub fn apply(&self, v: &IntensityVector) -> IntensityVector {
        let mut out = [0.0; 4];
        for c in 0..4 {
            let span = self.max[c] - self.min[c];
            out[c] = if span > 0.0 {
                ((v.0[c] - self.min[c]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        IntensityVector(out)
    }
}
