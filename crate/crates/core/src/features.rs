//! HR-dynamics features and activity-anchored sliding windows.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{
    sorted_segments, temporal_features, ActivityLabel, ActivitySegment, AnnotatedSample,
    IntensityVector, Minute, TemporalFeatures,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// EMA smoothing factor; 2/(w+1) for a window of w = 5.
    pub ema_alpha: f64,
    pub rolling_window: usize,
    pub trend_lag: usize,
    pub trend_smoothing: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            ema_alpha: 2.0 / 6.0,
            rolling_window: 5,
            trend_lag: 5,
            trend_smoothing: 15,
        }
    }
}

impl FeatureConfig {
    /// Index of the first sample with full history for every derived feature.
    pub fn warmup(&self) -> usize {
        let trend = self.trend_lag + self.trend_smoothing - 1;
        trend.max(self.rolling_window - 1).max(1)
    }
}

/// `h(t) - h(t-1)` per minute.
pub fn gradient(hr: &[f64], t: usize) -> Option<f64> {
    (t >= 1 && t < hr.len()).then(|| hr[t] - hr[t - 1])
}

/// Population standard deviation over `hr[t-w+1..=t]`.
pub fn rolling_std(hr: &[f64], t: usize, w: usize) -> Option<f64> {
    if w == 0 || t + 1 < w || t >= hr.len() {
        return None;
    }
    let mut mean = 0.0;
    for j in 0..w {
        mean += hr[t - j];
    }
    mean /= w as f64;
    let mut ss = 0.0;
    for j in 0..w {
        let d = hr[t - j] - mean;
        ss += d * d;
    }
    Some((ss / w as f64).sqrt())
}

pub fn rolling_std_5(hr: &[f64], t: usize) -> Option<f64> {
    rolling_std(hr, t, 5)
}

/// Recursive EMA seeded with the first observation of the run.
pub fn ema(hr: &[f64], t: usize, alpha: f64) -> f64 {
    let mut e = hr[0];
    for &h in &hr[1..=t] {
        e = alpha * h + (1.0 - alpha) * e;
    }
    e
}

pub fn ema_5(hr: &[f64], t: usize) -> f64 {
    ema(hr, t, 2.0 / 6.0)
}

/// Rolling mean over the last `m` values of `p(t) = h(t) - h(t-n)`.
pub fn trend_smoothed(hr: &[f64], t: usize, n: usize, m: usize) -> Option<f64> {
    if m == 0 || t + 1 < n + m || t >= hr.len() {
        return None;
    }
    let mut sum = 0.0;
    for j in 0..m {
        sum += hr[t - j] - hr[t - j - n];
    }
    Some(sum / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Derived {
    pub grad: Option<f64>,
    pub rstd: Option<f64>,
    pub ema: f64,
    pub trend: Option<f64>,
}

/// Single-pass computation of every derived feature over a contiguous run.
pub fn derived_features(hr: &[f64], cfg: &FeatureConfig) -> Vec<Derived> {
    let w = cfg.rolling_window;
    let (n, m) = (cfg.trend_lag, cfg.trend_smoothing);
    // Ring buffers, read newest-first so sums follow the defining order.
    let mut recent = vec![0.0; w.max(1)];
    let mut lagged = vec![0.0; n + 1];
    let mut trend_buf = vec![0.0; m.max(1)];
    let (rl, tl) = (recent.len(), trend_buf.len());
    let mut out = Vec::with_capacity(hr.len());
    let mut e = 0.0;
    let mut prev = 0.0;

    for (t, &h) in hr.iter().enumerate() {
        e = if t == 0 {
            h
        } else {
            cfg.ema_alpha * h + (1.0 - cfg.ema_alpha) * e
        };
        let grad = (t >= 1).then(|| h - prev);
        prev = h;

        recent[t % rl] = h;
        let rstd = (w > 0 && t + 1 >= w).then(|| {
            let at = |j: usize| recent[(t - j) % recent.len()];
            let mut mean = 0.0;
            for j in 0..w {
                mean += at(j);
            }
            mean /= w as f64;
            let mut ss = 0.0;
            for j in 0..w {
                let d = at(j) - mean;
                ss += d * d;
            }
            (ss / w as f64).sqrt()
        });

        lagged[t % (n + 1)] = h;
        if t >= n {
            trend_buf[t % tl] = h - lagged[(t - n) % (n + 1)];
        }
        let trend = (m > 0 && t + 1 >= n + m).then(|| {
            let mut sum = 0.0;
            for j in 0..m {
                sum += trend_buf[(t - j) % trend_buf.len()];
            }
            sum / m as f64
        });

        out.push(Derived {
            grad,
            rstd,
            ema: e,
            trend,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub timestamp: Minute,
    pub hr: f64,
    pub intensity: IntensityVector,
    pub activity: ActivityLabel,
    pub temporal: TemporalFeatures,
    pub grad: f64,
    pub rstd5: f64,
    pub ema5: f64,
    pub trend: f64,
}

impl FeatureVector {
    /// The five numeric channels in token-group order.
    pub fn channels(&self) -> [f64; 5] {
        [self.hr, self.grad, self.rstd5, self.ema5, self.trend]
    }
}

/// Builds feature vectors for one contiguous run, dropping warm-up rows.
pub fn build_feature_vectors(run: &[AnnotatedSample], cfg: &FeatureConfig) -> Vec<FeatureVector> {
    let warm = cfg.warmup();
    if run.len() <= warm {
        if !run.is_empty() {
            warn!(
                "run of {} samples shorter than feature warm-up {}; no vectors emitted",
                run.len(),
                warm + 1
            );
        }
        return Vec::new();
    }
    let hr: Vec<f64> = run.iter().map(|s| s.hr).collect();
    let derived = derived_features(&hr, cfg);
    run.iter()
        .zip(derived)
        .skip(warm)
        .map(|(s, d)| FeatureVector {
            timestamp: s.timestamp,
            hr: s.hr,
            intensity: s.intensity,
            activity: s.activity,
            temporal: temporal_features(s.timestamp),
            grad: d.grad.expect("warm-up covers gradient"),
            rstd5: d.rstd.expect("warm-up covers rolling std"),
            ema5: d.ema,
            trend: d.trend.expect("warm-up covers trend"),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetPoint {
    pub timestamp: Minute,
    pub hr: f64,
    pub activity: ActivityLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub patient: u32,
    /// Start minute of the anchoring segment; with `patient` it identifies the segment.
    pub segment_start: Minute,
    pub anchor_activity: ActivityLabel,
    pub source: Vec<FeatureVector>,
    pub target: Vec<TargetPoint>,
}

impl FeatureWindow {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub length: usize,
    /// Caps windows per segment; 0 means unlimited.
    pub max_per_segment: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            length: 10,
            max_per_segment: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<FeatureWindow>,
    /// Segments touching the run that could not anchor a full first window.
    pub skipped: usize,
}

/// Anchored, non-overlapping windows for every segment starting inside the run.
///
/// The first window of a segment starting at `t` takes `t-L..t` as source and
/// `t..t+L` as target. Each continuation window reuses the previous target
/// span as its source and is emitted while at least `2L` samples remain after
/// the previous target and its target still starts inside the segment.
pub fn make_windows(
    features: &[FeatureVector],
    segments: &[ActivitySegment],
    cfg: &WindowConfig,
    patient: u32,
) -> Result<WindowSet> {
    let l = cfg.length;
    if l == 0 {
        return Err(Error::invalid("window length must be >= 1"));
    }
    for pair in features.windows(2) {
        if pair[1].timestamp != pair[0].timestamp + 1 {
            return Err(Error::invalid(format!(
                "feature run not contiguous at {}",
                pair[1].timestamp
            )));
        }
    }
    let mut set = WindowSet::default();
    let (Some(first), Some(last)) = (features.first(), features.last()) else {
        return Ok(set);
    };
    let (first, last) = (first.timestamp, last.timestamp);
    let n = features.len();

    for seg in sorted_segments(segments) {
        if seg.end() < first || seg.start > last {
            continue;
        }
        if seg.start < first + l as Minute {
            set.skipped += 1;
            continue;
        }
        let anchor = (seg.start - first) as usize;
        let src_start = anchor - l;
        if n - src_start < 2 * l {
            set.skipped += 1;
            continue;
        }
        let seg_end = (seg.end() - first) as usize;
        let mut target_start = anchor;
        let mut emitted = 0;
        loop {
            set.windows.push(window_at(features, target_start, l, &seg, patient));
            emitted += 1;
            let next = target_start + l;
            if n - next < 2 * l || next > seg_end {
                break;
            }
            if cfg.max_per_segment > 0 && emitted >= cfg.max_per_segment {
                break;
            }
            target_start = next;
        }
    }
    Ok(set)
}

fn window_at(
    features: &[FeatureVector],
    target_start: usize,
    l: usize,
    seg: &ActivitySegment,
    patient: u32,
) -> FeatureWindow {
    FeatureWindow {
        patient,
        segment_start: seg.start,
        anchor_activity: seg.label,
        source: features[target_start - l..target_start].to_vec(),
        target: features[target_start..target_start + l]
            .iter()
            .map(|f| TargetPoint {
                timestamp: f.timestamp,
                hr: f.hr,
                activity: f.activity,
            })
            .collect(),
    }
}
