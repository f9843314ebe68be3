//! Synthetic wearable dataset with activity regimes.
//!
//! HR relaxes toward a set-point (resting plus circadian swing, or the
//! activity's target) with first-order dynamics. Heavy-tailed shocks and
//! Laplace jitter produce abrupt transitions; intensity is derived from
//! per-patient HR quantile bands.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{
    ActivityLabel, ActivitySegment, HrSample, IntensityCategory, IntensityVector, Minute,
};
use crate::util::rng_for;

const STREAM_PATIENT: u64 = 0x5047;
const STREAM_SPLIT: u64 = 0x5350;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivityProfile {
    pub label: ActivityLabel,
    pub proportion: f64,
    /// Mean segment duration in minutes.
    pub mean_duration: f64,
    /// HR set-point while performing the activity.
    pub median_hr: f64,
    /// Per-minute Laplace jitter scale of the latent HR, BPM.
    pub volatility: f64,
}

impl ActivityProfile {
    fn new(label: ActivityLabel, proportion: f64, mean_duration: f64, median_hr: f64, volatility: f64) -> Self {
        ActivityProfile { label, proportion, mean_duration, median_hr, volatility }
    }
}

/// Activity mix, durations and median HR of the reference cohort.
pub fn reference_profiles() -> Vec<ActivityProfile> {
    use ActivityLabel as A;
    vec![
        ActivityProfile::new(A::Walking, 0.595, 89.0, 99.0, 1.0),
        ActivityProfile::new(A::Running, 0.122, 70.0, 128.0, 1.6),
        ActivityProfile::new(A::AerobicWorkout, 0.10, 86.0, 112.0, 1.4),
        ActivityProfile::new(A::OutdoorBiking, 0.064, 33.0, 90.0, 1.0),
        ActivityProfile::new(A::Sport, 0.047, 39.0, 105.0, 1.5),
        ActivityProfile::new(A::Swimming, 0.037, 43.0, 110.0, 1.0),
        ActivityProfile::new(A::Treadmill, 0.01, 130.0, 75.0, 0.8),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub days: usize,
    /// First day, `YYYY-MM-DD` (UTC).
    pub start_date: String,
    pub day_start_hour: u32,
    pub minutes_per_day: usize,
    pub activities: Vec<ActivityProfile>,
    pub resting_hr: [f64; 2],
    pub circadian_amplitude: f64,
    /// Time constant of the relaxation toward the set-point, minutes.
    pub relaxation_minutes: f64,
    /// Rest gap before each segment, minutes (uniform).
    pub gap_minutes: [usize; 2],
    /// Per-minute shock probability at rest; doubled during activities.
    pub shock_rate: f64,
    /// Shock magnitude = `shock_min + Exp(shock_scale)`.
    pub shock_min: f64,
    pub shock_scale: f64,
    pub rise_bias: f64,
    pub rest_volatility: f64,
    /// Measurement noise (Laplace scale) added to the observed HR.
    pub measurement_noise: f64,
    /// HR quantiles separating the four intensity bands.
    pub intensity_quantiles: [f64; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 29,
            days: 4,
            start_date: "2024-03-04".into(),
            day_start_hour: 6,
            minutes_per_day: 960,
            activities: reference_profiles(),
            resting_hr: [62.0, 78.0],
            circadian_amplitude: 4.0,
            relaxation_minutes: 4.0,
            gap_minutes: [40, 200],
            shock_rate: 0.045,
            shock_min: 9.0,
            shock_scale: 1.2,
            rise_bias: 0.55,
            rest_volatility: 0.6,
            measurement_noise: 0.7,
            intensity_quantiles: [0.55, 0.8, 0.93],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.activities.iter().map(|a| a.proportion).sum();
        // Proportions are relative weights; the reference table sums to 0.975.
        if self.activities.is_empty() || !(total > 0.0) || !total.is_finite() {
            return Err(Error::Config(format!("activity proportions sum to {total}, expected > 0")));
        }
        if let Some(a) = self.activities.iter().find(|a| a.mean_duration <= 0.0 || a.proportion < 0.0) {
            return Err(Error::Config(format!("invalid profile for {}", a.label)));
        }
        if self.activities.iter().any(|a| !a.label.is_activity()) {
            return Err(Error::Config("profile label `none` is not an activity".into()));
        }
        if self.gap_minutes[0] > self.gap_minutes[1] || self.minutes_per_day < 60 {
            return Err(Error::Config("invalid day layout".into()));
        }
        if self.relaxation_minutes < 1.0 {
            return Err(Error::Config("relaxation_minutes must be >= 1".into()));
        }
        Ok(())
    }

    fn start_minute(&self) -> Result<Minute> {
        let d = chrono::NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| Error::Config(format!("start_date {:?}: {e}", self.start_date)))?;
        Ok(d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp() / 60)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientData {
    pub patient: u32,
    pub hr: Vec<HrSample>,
    pub intensity: Vec<(Minute, IntensityVector)>,
    pub segments: Vec<ActivitySegment>,
}

fn laplace(rng: &mut ChaCha8Rng, b: f64) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u > -0.5 {
            return -b * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

fn exponential(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    -scale * (1.0 - rng.random::<f64>()).ln()
}

fn pick_activity<'a>(rng: &mut ChaCha8Rng, profiles: &'a [ActivityProfile]) -> &'a ActivityProfile {
    let total: f64 = profiles.iter().map(|p| p.proportion).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for p in profiles {
        acc += p.proportion;
        if u < acc {
            return p;
        }
    }
    profiles.last().unwrap()
}

/// Generates every patient; each patient draws from its own stream keyed by
/// `(seed, patient)`.
pub fn generate(cfg: &GeneratorConfig, seed: u64) -> Result<Vec<PatientData>> {
    cfg.validate()?;
    let origin = cfg.start_minute()?;
    (0..cfg.n_patients)
        .map(|p| Ok(generate_patient(cfg, origin, seed, p as u32)))
        .collect()
}

fn generate_patient(cfg: &GeneratorConfig, origin: Minute, seed: u64, patient: u32) -> PatientData {
    let mut rng = rng_for(seed, STREAM_PATIENT, patient as u64);
    let resting = rng.random_range(cfg.resting_hr[0]..=cfg.resting_hr[1]);
    let fitness_offset = (resting - 70.0) * 0.3;
    let mut hr = Vec::with_capacity(cfg.days * cfg.minutes_per_day);
    let mut segments = Vec::new();

    for day in 0..cfg.days {
        let day_start = origin + (day as Minute) * 1440 + cfg.day_start_hour as Minute * 60;
        let len = cfg.minutes_per_day;

        // Lay out non-overlapping segments (day-relative minutes).
        let mut plan: Vec<(usize, usize, &ActivityProfile)> = Vec::new();
        let mut cursor = 0usize;
        loop {
            let gap = rng.random_range(cfg.gap_minutes[0]..=cfg.gap_minutes[1]);
            let profile = pick_activity(&mut rng, &cfg.activities);
            let dur = (profile.mean_duration * rng.random_range(0.6..1.4)).round().max(12.0) as usize;
            let start = cursor + gap;
            if start + dur + 30 > len {
                break;
            }
            plan.push((start, dur, profile));
            cursor = start + dur;
        }

        let mut x = resting;
        let mut seg_iter = plan.iter().peekable();
        let mut current: Option<&(usize, usize, &ActivityProfile)> = None;
        for i in 0..len {
            if current.is_some_and(|c| i > c.0 + c.1) {
                current = None;
            }
            if current.is_none() && seg_iter.peek().is_some_and(|c| c.0 == i) {
                current = seg_iter.next();
            }
            let t = day_start + i as Minute;
            let hour = ((t % 1440) as f64) / 60.0;
            let circadian = cfg.circadian_amplitude * ((hour - 9.0) / 24.0 * std::f64::consts::TAU).sin();
            let (target, vol, rate) = match current {
                Some((_, _, p)) => (p.median_hr + fitness_offset, p.volatility, cfg.shock_rate * 2.0),
                None => (resting + circadian, cfg.rest_volatility, cfg.shock_rate),
            };
            x += (target - x) / cfg.relaxation_minutes + laplace(&mut rng, vol);
            if rng.random::<f64>() < rate {
                let mag = cfg.shock_min + exponential(&mut rng, cfg.shock_scale);
                let sign = if rng.random::<f64>() < cfg.rise_bias { 1.0 } else { -1.0 };
                x += sign * mag;
            }
            x = x.clamp(35.0, 210.0);
            let observed = (x + laplace(&mut rng, cfg.measurement_noise)).clamp(30.0, 220.0);
            hr.push(HrSample { timestamp: t, hr: (observed * 10.0).round() / 10.0 });
        }
        segments.extend(
            plan.iter()
                .map(|(s, d, p)| ActivitySegment::new(p.label, day_start + *s as Minute, *d as i64)),
        );
    }

    let intensity = intensity_bands(&hr, &cfg.intensity_quantiles);
    PatientData { patient, hr, intensity, segments }
}

fn intensity_bands(hr: &[HrSample], quantiles: &[f64; 3]) -> Vec<(Minute, IntensityVector)> {
    if hr.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = hr.iter().map(|s| s.hr).collect();
    sorted.sort_by(f64::total_cmp);
    let cut = |q: f64| sorted[((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
    let cuts = [cut(quantiles[0]), cut(quantiles[1]), cut(quantiles[2])];
    hr.iter()
        .map(|s| {
            let band = cuts.iter().filter(|&&c| s.hr > c).count();
            (s.timestamp, IntensityVector::one_hot(IntensityCategory::ALL[band]))
        })
        .collect()
}

/// Identifies one activity segment across the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentKey {
    pub patient: u32,
    pub start: Minute,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSplit {
    pub train: BTreeSet<SegmentKey>,
    pub val: BTreeSet<SegmentKey>,
    pub test: BTreeSet<SegmentKey>,
}

/// Shuffles whole segments and cuts them by `ratios` (train, val, test),
/// rounding the first two shares to the nearest segment.
pub fn split(keys: &[SegmentKey], ratios: [f64; 3], seed: u64) -> Result<SegmentSplit> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut uniq: Vec<SegmentKey> = keys.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let parts = ratios.iter().filter(|r| **r > 0.0).count();
    if uniq.len() < parts {
        return Err(Error::invalid(format!("{} segments cannot fill {parts} splits", uniq.len())));
    }
    let mut rng = rng_for(seed, STREAM_SPLIT, 0);
    uniq.shuffle(&mut rng);
    let n = uniq.len();
    let n_train = ((ratios[0] * n as f64) + 0.5).floor() as usize;
    let n_val = (((ratios[1] * n as f64) + 0.5).floor() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut out = SegmentSplit::default();
    for (i, k) in uniq.into_iter().enumerate() {
        if i < n_train {
            out.train.insert(k);
        } else if i < n_train + n_val {
            out.val.insert(k);
        } else {
            out.test.insert(k);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::validate_segments;

    fn small() -> GeneratorConfig {
        GeneratorConfig { n_patients: 3, days: 2, ..Default::default() }
    }

    #[test]
    fn zero_patients() {
        let cfg = GeneratorConfig { n_patients: 0, ..Default::default() };
        assert!(generate(&cfg, 1).unwrap().is_empty());
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate(&small(), 11).unwrap();
        let b = generate(&small(), 11).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(), 12).unwrap();
        assert_ne!(a, c);
        for p in &a {
            validate_segments(&p.segments).unwrap();
            assert!(!p.segments.is_empty());
            assert!(p.hr.iter().all(|s| (30.0..=220.0).contains(&s.hr)));
            assert_eq!(p.hr.len(), p.intensity.len());
            assert!(p.hr.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
        }
    }

    #[test]
    fn rejects_bad_proportions() {
        let mut cfg = small();
        cfg.activities[0].proportion = -0.9;
        assert!(generate(&cfg, 0).is_err());
    }

    fn keys(n: usize) -> Vec<SegmentKey> {
        (0..n).map(|i| SegmentKey { patient: (i % 3) as u32, start: i as Minute * 100 }).collect()
    }

    #[test]
    fn split_rounding() {
        let s = split(&keys(20), [0.65, 0.15, 0.20], 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (13, 3, 4));
        assert_eq!(s, split(&keys(20), [0.65, 0.15, 0.20], 4).unwrap());
        let all = split(&keys(5), [1.0, 0.0, 0.0], 4).unwrap();
        assert_eq!(all.train.len(), 5);
        assert!(all.val.is_empty() && all.test.is_empty());
        assert!(split(&keys(2), [0.65, 0.15, 0.20], 4).is_err());
        assert!(split(&keys(9), [0.5, 0.2, 0.2], 4).is_err());
    }

    #[test]
    fn split_disjoint_and_covering() {
        let k = keys(57);
        let s = split(&k, [0.65, 0.15, 0.20], 9).unwrap();
        assert!(s.train.is_disjoint(&s.val) && s.train.is_disjoint(&s.test) && s.val.is_disjoint(&s.test));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 57);
    }
}
