//! Laplace-noise DDPM: schedules, forward corruption, reverse sampling and
//! median-of-chains forecasting.
//!
//! The network predicts unit-variance noise `u ~ Laplace(0, 1/sqrt 2)` with
//! `h_s = sqrt(abar_s) h_0 + sqrt(1 - abar_s) u`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Ctx, HrTransformer, ModelInput, Normalizer};
use crate::util::{median, rng_for};

pub const BETA_MAX: f64 = 0.999;
pub const COSINE_OFFSET: f64 = 0.008;
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
pub const HR_CLIP: (f64, f64) = (30.0, 220.0);
/// Scale of unit-variance Laplace noise.
pub const UNIT_SCALE: f64 = FRAC_1_SQRT_2;
const CHAIN_TAG: u64 = 0xC4A1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Quadratic,
    Cosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Quadratic, ScheduleKind::Cosine];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Quadratic => "quadratic",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "quadratic" => Ok(ScheduleKind::Quadratic),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Precomputed tables, indexed by step `s` in `1..=S`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: Option<ScheduleKind>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    b: Vec<f64>,
    beta_tilde: Vec<f64>,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

impl DiffusionSchedule {
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("diffusion steps must be >= 1"));
        }
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (LINEAR_BETA_START * scale, LINEAR_BETA_END * scale);
        let betas = match kind {
            ScheduleKind::Linear => linspace(lo, hi, steps),
            ScheduleKind::Quadratic => linspace(lo.sqrt(), hi.sqrt(), steps).into_iter().map(|r| r * r).collect(),
            ScheduleKind::Cosine => {
                let f = |s: f64| (((s / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * PI / 2.0).cos().powi(2);
                let f0 = f(0.0);
                (1..=steps)
                    .map(|s| 1.0 - (f(s as f64) / f0) / (f((s - 1) as f64) / f0))
                    .collect()
            }
        };
        let betas = betas.into_iter().map(|b| b.min(BETA_MAX)).collect();
        let mut s = Self::from_betas(betas)?;
        s.kind = Some(kind);
        Ok(s)
    }

    /// Schedule from explicit noise levels.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(0.0..=BETA_MAX).contains(b)) {
            return Err(Error::invalid("betas must be non-empty and within [0, 0.999]"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let b = alpha_bar.iter().map(|ab| ((1.0 - ab) / 2.0).sqrt()).collect();
        let beta_tilde = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0]
                } else if 1.0 - alpha_bar[i] > 0.0 {
                    (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]
                } else {
                    0.0
                }
            })
            .collect();
        Ok(DiffusionSchedule {
            kind: None,
            beta,
            alpha,
            alpha_bar,
            b,
            beta_tilde,
        })
    }

    pub fn kind(&self) -> Option<ScheduleKind> {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.beta[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alpha[s - 1]
    }

    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.alpha_bar[s - 1]
    }

    /// Laplace scale with `2 b^2 = 1 - abar_s`.
    pub fn b(&self, s: usize) -> f64 {
        self.b[s - 1]
    }

    pub fn beta_tilde(&self, s: usize) -> f64 {
        self.beta_tilde[s - 1]
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(Error::invalid(format!("step {s} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Inverse-CDF Laplace draw from `u` in `(-1/2, 1/2)`.
pub fn laplace_from_uniform(u: f64, b: f64) -> f64 {
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

pub fn sample_laplace(n: usize, b: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if b == 0.0 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|_| {
            // Open interval: reject the single endpoint -1/2.
            let u = loop {
                let u = rng.random::<f64>() - 0.5;
                if u > -0.5 {
                    break u;
                }
            };
            laplace_from_uniform(u, b)
        })
        .collect()
}

/// Corrupts `h0` to step `s`; returns `(h_s, u)` with `u` the unit noise.
pub fn forward_marginal(h0: &[f64], s: usize, sched: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    sched.check_step(s)?;
    let u = sample_laplace(h0.len(), UNIT_SCALE, rng);
    Ok((corrupt(h0, &u, s, sched), u))
}

pub fn corrupt(h0: &[f64], u: &[f64], s: usize, sched: &DiffusionSchedule) -> Vec<f64> {
    let (a, c) = (sched.alpha_bar(s).sqrt(), (1.0 - sched.alpha_bar(s)).sqrt());
    h0.iter().zip(u).map(|(h, n)| a * h + c * n).collect()
}

/// One ancestral step `h_s -> h_{s-1}`; no noise is added at `s = 1`.
pub fn reverse_step(h: &[f64], eps_hat: &[f64], s: usize, sched: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = sched.alpha(s);
    let coef = (1.0 - a) / (1.0 - sched.alpha_bar(s)).sqrt();
    let mut mu: Vec<f64> = h.iter().zip(eps_hat).map(|(x, e)| (x - coef * e) / a.sqrt()).collect();
    if s > 1 {
        let scale = (sched.beta_tilde(s) / 2.0).sqrt();
        for (m, z) in mu.iter_mut().zip(sample_laplace(h.len(), scale, rng)) {
            *m += z;
        }
    }
    mu
}

/// Anything that predicts unit noise for a batch of noisy targets sharing one
/// source window.
pub trait Denoiser {
    fn predict(&self, input: &ModelInput, noisy: &[Vec<f64>], s: usize) -> Result<Vec<Vec<f64>>>;
}

impl Denoiser for HrTransformer {
    fn predict(&self, input: &ModelInput, noisy: &[Vec<f64>], s: usize) -> Result<Vec<Vec<f64>>> {
        self.predict_noise(input, noisy, s)
    }
}

/// Test harness that knows the clean target and returns the exact noise
/// consistent with the current state.
pub struct CheatingDenoiser<'a> {
    pub h0: Vec<f64>,
    pub schedule: &'a DiffusionSchedule,
}

impl Denoiser for CheatingDenoiser<'_> {
    fn predict(&self, _input: &ModelInput, noisy: &[Vec<f64>], s: usize) -> Result<Vec<Vec<f64>>> {
        let ab = self.schedule.alpha_bar(s);
        Ok(noisy
            .iter()
            .map(|h| {
                h.iter()
                    .zip(&self.h0)
                    .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                    .collect()
            })
            .collect())
    }
}

/// Runs one reverse chain per seed from unit-variance noise and returns every
/// chain's final state in normalized units.
pub fn sample_chains<D: Denoiser + ?Sized>(
    model: &D,
    input: &ModelInput,
    sched: &DiffusionSchedule,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    let l = input.len();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| rng_for(s, CHAIN_TAG, 0)).collect();
    let mut states: Vec<Vec<f64>> = rngs.iter_mut().map(|r| sample_laplace(l, UNIT_SCALE, r)).collect();
    for s in (1..=sched.steps()).rev() {
        let eps = model.predict(input, &states, s)?;
        for ((h, e), rng) in states.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
            *h = reverse_step(h, e, s, sched, rng);
        }
    }
    Ok(states)
}

/// Per-chain seeds for `k` chains under `seed`.
pub fn chain_seeds(seed: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| crate::util::derive_seed(seed, CHAIN_TAG, i)).collect()
}

/// Elementwise median over chains.
pub fn median_of(chains: &[Vec<f64>]) -> Vec<f64> {
    let l = chains.first().map_or(0, |c| c.len());
    (0..l)
        .map(|t| median(&mut chains.iter().map(|c| c[t]).collect::<Vec<_>>()))
        .collect()
}

/// Median-of-`k` forecast in BPM, clipped to the physiological range.
pub fn forecast<D: Denoiser + ?Sized>(
    model: &D,
    input: &ModelInput,
    sched: &DiffusionSchedule,
    k: usize,
    seed: u64,
    norm: &Normalizer,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("forecast needs at least one sample"));
    }
    let chains = sample_chains(model, input, sched, &chain_seeds(seed, k))?;
    Ok(median_of(&chains)
        .into_iter()
        .map(|z| norm.hr_inverse(z).clamp(HR_CLIP.0, HR_CLIP.1))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    L1,
    Huber { delta: f64 },
}

impl LossKind {
    pub fn label(&self) -> String {
        match self {
            LossKind::L1 => "l1".into(),
            LossKind::Huber { delta } => format!("huber_{delta}"),
        }
    }
}

/// Mean loss between two equal-length slices.
pub fn loss_value(pred: &[f64], target: &[f64], kind: LossKind) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::LengthMismatch(pred.len(), target.len()));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            match kind {
                LossKind::L1 => r.abs(),
                LossKind::Huber { delta } => crate::autodiff::huber_value(r, delta),
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

fn loss_on_tape(tape: &mut Tape, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
    let r = tape.sub(pred, target)?;
    let e = match kind {
        LossKind::L1 => tape.abs(r),
        LossKind::Huber { delta } => tape.huber(r, delta),
    };
    Ok(tape.mean(e))
}

/// One normalized training example: model input and clean target HR.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: ModelInput,
    pub h0: Vec<f64>,
}

/// Mean noise-prediction loss over `batch`, each example at a random step.
pub fn training_loss(
    model: &HrTransformer,
    tape: &mut Tape,
    batch: &[&Example],
    sched: &DiffusionSchedule,
    kind: LossKind,
    rng: &mut ChaCha8Rng,
    ctx: &mut Ctx,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        let s = rng.random_range(1..=sched.steps());
        let (h_s, u) = forward_marginal(&ex.h0, s, sched, rng)?;
        let pred = model.forward(tape, &ex.input, &h_s, s, ctx)?;
        let target = tape.constant(Tensor::column(&u));
        let l = loss_on_tape(tape, pred, target, kind)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let t = total.expect("non-empty batch");
    Ok(tape.scale(t, 1.0 / batch.len() as f64))
}
