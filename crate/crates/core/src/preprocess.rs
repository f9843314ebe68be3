//! Data-quality pipeline: centered moving-average smoothing, isolation-forest
//! outlier detection with interpolation, and sudden-HR-change statistics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{ActivityLabel, AnnotatedSample};

/// Centered moving average; edges average over the truncated window.
pub fn moving_average_smooth(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("smoothing window must be odd and >= 1, got {window}")));
    }
    let half = window / 2;
    let n = series.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            series[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect())
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Average unsuccessful-search path length in a binary search tree of `n` nodes.
pub fn average_path_length(n: usize) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf { size: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ITree {
    nodes: Vec<Node>,
}

impl ITree {
    fn path_length(&self, x: &[f64]) -> f64 {
        let mut idx = 0;
        let mut depth = 0.0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { size } => return depth + average_path_length(*size),
                Node::Split { feature, threshold, left, right } => {
                    idx = if x[*feature] < *threshold { *left } else { *right };
                    depth += 1.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsolationForestConfig {
    pub trees: usize,
    pub subsample: usize,
    pub contamination: f64,
}

impl Default for IsolationForestConfig {
    fn default() -> Self {
        IsolationForestConfig {
            trees: 100,
            subsample: 256,
            contamination: 0.05,
        }
    }
}

/// Classic isolation forest with random axis-parallel splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    trees: Vec<ITree>,
    psi: usize,
    dims: usize,
}

impl IsolationForest {
    pub fn fit(points: &[Vec<f64>], trees: usize, subsample: usize, seed: u64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("isolation forest needs at least 2 points"));
        }
        let dims = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != dims) {
            return Err(Error::Shape { op: "isolation_forest_fit", lhs: vec![dims], rhs: vec![p.len()] });
        }
        let psi = subsample.min(points.len()).max(2);
        let height_limit = (psi as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut forest = Vec::with_capacity(trees);
        for _ in 0..trees {
            let sample = rand::seq::index::sample(&mut rng, points.len(), psi).into_vec();
            let mut nodes = Vec::new();
            build_tree(points, sample, 0, height_limit, &mut rng, &mut nodes);
            forest.push(ITree { nodes });
        }
        Ok(IsolationForest { trees: forest, psi, dims })
    }

    /// Anomaly score `2^(-E[h(x)] / c(psi))` in (0, 1].
    pub fn score(&self, points: &[Vec<f64>]) -> Vec<f64> {
        let c = average_path_length(self.psi);
        points
            .iter()
            .map(|x| {
                assert_eq!(x.len(), self.dims, "point dimension");
                let mean = self.trees.iter().map(|t| t.path_length(x)).sum::<f64>()
                    / self.trees.len().max(1) as f64;
                if c > 0.0 {
                    2f64.powf(-mean / c)
                } else {
                    0.5
                }
            })
            .collect()
    }
}

fn build_tree(
    points: &[Vec<f64>],
    idx: Vec<usize>,
    depth: usize,
    limit: usize,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<Node>,
) -> usize {
    let me = nodes.len();
    nodes.push(Node::Leaf { size: idx.len() });
    if depth >= limit || idx.len() <= 1 {
        return me;
    }
    let dims = points[0].len();
    // Only features with spread can split.
    let candidates: Vec<(usize, f64, f64)> = (0..dims)
        .filter_map(|f| {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(points[i][f]), hi.max(points[i][f]))
            });
            (hi > lo).then_some((f, lo, hi))
        })
        .collect();
    if candidates.is_empty() {
        return me;
    }
    let (feature, lo, hi) = candidates[rng.random_range(0..candidates.len())];
    let mut threshold = lo + rng.random::<f64>() * (hi - lo);
    if threshold <= lo {
        threshold = (lo + hi) / 2.0;
    }
    let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| points[i][feature] < threshold);
    let left = build_tree(points, l, depth + 1, limit, rng, nodes);
    let right = build_tree(points, r, depth + 1, limit, rng, nodes);
    nodes[me] = Node::Split { feature, threshold, left, right };
    me
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub flagged: Vec<usize>,
    pub scores: Vec<f64>,
    pub threshold: f64,
}

/// Marks the `ceil(contamination * n)` highest scores; equal scores are
/// taken in index order.
pub fn flag(scores: &[f64], contamination: f64) -> Result<OutlierReport> {
    if !(contamination > 0.0 && contamination < 1.0) {
        return Err(Error::invalid(format!("contamination {contamination} not in (0, 1)")));
    }
    let n = scores.len();
    let k = ((contamination * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut flagged: Vec<usize> = order[..k.min(n)].to_vec();
    let threshold = flagged.last().map(|&i| scores[i]).unwrap_or(f64::INFINITY);
    flagged.sort_unstable();
    Ok(OutlierReport { flagged, scores: scores.to_vec(), threshold })
}

/// Replaces flagged indices by linear interpolation between the nearest
/// unflagged neighbours; edges copy the nearest unflagged value.
pub fn interpolate_flagged(series: &[f64], flagged: &[usize]) -> Vec<f64> {
    let n = series.len();
    let mut bad = vec![false; n];
    for &i in flagged {
        if i < n {
            bad[i] = true;
        }
    }
    let mut out = series.to_vec();
    let mut prev_good: Option<usize> = None;
    let mut i = 0;
    while i < n {
        if !bad[i] {
            prev_good = Some(i);
            i += 1;
            continue;
        }
        let mut j = i;
        while j < n && bad[j] {
            j += 1;
        }
        let next_good = (j < n).then_some(j);
        for k in i..j {
            out[k] = match (prev_good, next_good) {
                (Some(a), Some(b)) => {
                    let w = (k - a) as f64 / (b - a) as f64;
                    series[a] + w * (series[b] - series[a])
                }
                (Some(a), None) => series[a],
                (None, Some(b)) => series[b],
                (None, None) => series[k],
            };
        }
        i = j;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuddenChangeStats {
    pub n_points: usize,
    pub event_count: usize,
    pub event_fraction: f64,
    /// Counts per 5-BPM bin starting at the threshold; the last bin is open.
    pub magnitude_histogram: Vec<usize>,
    pub histogram_edges: Vec<f64>,
    pub mean_magnitude: f64,
    pub rise_fraction: f64,
    pub drop_fraction: f64,
    /// Events / points, keyed by activity label.
    pub per_activity_rate: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuddenChange {
    pub index: usize,
    pub magnitude: f64,
    pub rise: bool,
}

/// A point is an event when `|h(t+k) - h(t)|` exceeds `threshold` for some
/// horizon `k`. Only horizons inside the series are considered.
pub fn sudden_changes(hr: &[f64], threshold: f64, horizons: &[usize]) -> Vec<SuddenChange> {
    let mut out = Vec::new();
    for t in 0..hr.len() {
        let mut best: Option<f64> = None;
        for &k in horizons {
            if let Some(&h) = hr.get(t + k) {
                let d = h - hr[t];
                if best.is_none_or(|b| d.abs() > b.abs()) {
                    best = Some(d);
                }
            }
        }
        if let Some(d) = best {
            if d.abs() > threshold {
                out.push(SuddenChange { index: t, magnitude: d.abs(), rise: d > 0.0 });
            }
        }
    }
    out
}

pub fn sudden_change_stats(
    samples: &[AnnotatedSample],
    threshold: f64,
    horizons: &[usize],
) -> SuddenChangeStats {
    let hr: Vec<f64> = samples.iter().map(|s| s.hr).collect();
    let events = sudden_changes(&hr, threshold, horizons);
    summarize_changes(&events, samples.iter().map(|s| s.activity), samples.len(), threshold)
}

/// Aggregates per-run event lists; `labels` is aligned with the concatenated runs.
pub fn summarize_changes(
    events: &[SuddenChange],
    labels: impl Iterator<Item = ActivityLabel>,
    n_points: usize,
    threshold: f64,
) -> SuddenChangeStats {
    let labels: Vec<ActivityLabel> = labels.collect();
    let bins = 6;
    let edges: Vec<f64> = (0..=bins).map(|i| threshold + 5.0 * i as f64).collect();
    let mut hist = vec![0usize; bins];
    let mut rises = 0usize;
    let mut sum = 0.0;
    let mut per_points: BTreeMap<ActivityLabel, (usize, usize)> = BTreeMap::new();
    for l in &labels {
        per_points.entry(*l).or_default().1 += 1;
    }
    for e in events {
        let bin = (((e.magnitude - threshold) / 5.0).floor().max(0.0) as usize).min(bins - 1);
        hist[bin] += 1;
        sum += e.magnitude;
        rises += e.rise as usize;
        if let Some(l) = labels.get(e.index) {
            per_points.entry(*l).or_default().0 += 1;
        }
    }
    let count = events.len();
    let (rise_fraction, drop_fraction) = if count > 0 {
        let r = rises as f64 / count as f64;
        (r, 1.0 - r)
    } else {
        (0.0, 0.0)
    };
    SuddenChangeStats {
        n_points,
        event_count: count,
        event_fraction: if n_points > 0 { count as f64 / n_points as f64 } else { 0.0 },
        magnitude_histogram: hist,
        histogram_edges: edges,
        mean_magnitude: if count > 0 { sum / count as f64 } else { 0.0 },
        rise_fraction,
        drop_fraction,
        per_activity_rate: per_points
            .into_iter()
            .map(|(l, (e, n))| (l.to_string(), e as f64 / n.max(1) as f64))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub smoothing_window: usize,
    pub forest: IsolationForestConfig,
    pub sudden_threshold: f64,
    pub sudden_horizons: Vec<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            smoothing_window: 5,
            forest: IsolationForestConfig::default(),
            sudden_threshold: 10.0,
            sudden_horizons: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub rmse_raw_vs_smoothed: f64,
    pub n_outliers: usize,
    pub sudden_change_stats: SuddenChangeStats,
}

/// Outlier-detection features: HR plus the intensity vector.
pub fn outlier_features(samples: &[AnnotatedSample], hr: &[f64]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .zip(hr)
        .map(|(s, &h)| {
            let mut v = Vec::with_capacity(5);
            v.push(h);
            v.extend_from_slice(&s.intensity.0);
            v
        })
        .collect()
}

/// smooth -> detect -> interpolate, per contiguous run. Sudden-change
/// statistics describe the raw input.
pub fn clean_runs(
    runs: &[&[AnnotatedSample]],
    cfg: &PreprocessConfig,
    seed: u64,
) -> Result<(Vec<Vec<AnnotatedSample>>, PreprocessReport)> {
    let mut raw_all = Vec::new();
    let mut smooth_all = Vec::new();
    let mut smoothed_runs = Vec::with_capacity(runs.len());
    let mut events = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0;
    for run in runs {
        let raw: Vec<f64> = run.iter().map(|s| s.hr).collect();
        for mut e in sudden_changes(&raw, cfg.sudden_threshold, &cfg.sudden_horizons) {
            e.index += offset;
            events.push(e);
        }
        labels.extend(run.iter().map(|s| s.activity));
        offset += run.len();
        let smooth = moving_average_smooth(&raw, cfg.smoothing_window)?;
        raw_all.extend_from_slice(&raw);
        smooth_all.extend_from_slice(&smooth);
        smoothed_runs.push(smooth);
    }

    let all_samples: Vec<AnnotatedSample> = runs.iter().flat_map(|r| r.iter().copied()).collect();
    let flagged = if all_samples.len() >= 2 {
        let pts = outlier_features(&all_samples, &smooth_all);
        let forest = IsolationForest::fit(&pts, cfg.forest.trees, cfg.forest.subsample, seed)?;
        flag(&forest.score(&pts), cfg.forest.contamination)?.flagged
    } else {
        Vec::new()
    };

    let mut cleaned = Vec::with_capacity(runs.len());
    let mut start = 0;
    let mut fi = 0;
    for (run, smooth) in runs.iter().zip(&smoothed_runs) {
        let end = start + run.len();
        let mut local = Vec::new();
        while fi < flagged.len() && flagged[fi] < end {
            local.push(flagged[fi] - start);
            fi += 1;
        }
        let fixed = interpolate_flagged(smooth, &local);
        cleaned.push(run.iter().zip(fixed).map(|(s, hr)| AnnotatedSample { hr, ..*s }).collect());
        start = end;
    }

    let report = PreprocessReport {
        rmse_raw_vs_smoothed: rmse(&raw_all, &smooth_all)?,
        n_outliers: flagged.len(),
        sudden_change_stats: summarize_changes(
            &events,
            labels.into_iter(),
            raw_all.len(),
            cfg.sudden_threshold,
        ),
    };
    Ok((cleaned, report))
}
