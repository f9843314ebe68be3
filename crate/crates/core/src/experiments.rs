//! Metrics, the training loop and the schedule/steps/loss sweeps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, write_checkpoint, Adam, AdamConfig, EarlyStopping, MultiStepLr, ParamStore, Tape};
use crate::diffusion::{forecast, training_loss, DiffusionSchedule, Example, LossKind, ScheduleKind};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureWindow};
use crate::model::{Ctx, HrTransformer, ModelConfig, ModelInput, Normalizer};
use crate::series::IntensityScaler;
use crate::util::{derive_seed, rng_for};

const TAG_INIT: u64 = 0x494E;
const TAG_SHUFFLE: u64 = 0x5348;
const TAG_STEP: u64 = 0x5354;
const TAG_DROPOUT: u64 = 0x4452;
const TAG_VAL: u64 = 0x5641;
const TAG_FORECAST: u64 = 0x4643;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n: usize,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub rmse: f64,
    /// `None` when the true values have zero variance.
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2_note: Option<String>,
}

pub fn metrics(y_true: &[f64], y_pred: &[f64]) -> Result<MetricSet> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.iter().any(|y| *y == 0.0) {
        return Err(Error::invalid("MAPE needs non-zero true values"));
    }
    let n = y_true.len() as f64;
    let mut abs = 0.0;
    let mut pct = 0.0;
    let mut sq = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        let e = p - t;
        abs += e.abs();
        pct += (e / t).abs();
        sq += e * e;
    }
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|t| (t - mean).powi(2)).sum();
    let (r2, r2_note) = if ss_tot > 0.0 {
        (Some(1.0 - sq / ss_tot), None)
    } else {
        (None, Some("true values have zero variance".to_string()))
    };
    Ok(MetricSet {
        n: y_true.len(),
        mae: abs / n,
        mape: pct / n * 100.0,
        rmse: (sq / n).sqrt(),
        r2,
        r2_note,
    })
}

/// Headline numbers reported for the private cohort, kept for side-by-side
/// display only; they cannot be reproduced on synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMetrics {
    pub mae: f64,
    pub mape: f64,
    pub rmse: f64,
    pub r2: f64,
    pub note: String,
}

pub fn reference_metrics() -> ReferenceMetrics {
    ReferenceMetrics {
        mae: 2.19,
        mape: 2.3,
        rmse: 3.44,
        r2: 0.97,
        note: "reported on a private cohort; not reproducible here".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub min_delta: f64,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    /// Reverse chains per forecast (median of K).
    pub samples: usize,
    pub loss: LossKind,
    /// Cap on test windows forecast during evaluation; 0 means all.
    pub eval_max_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 32,
            adam: AdamConfig::default(),
            lr_milestones: vec![200, 300],
            lr_gamma: 0.1,
            patience: 50,
            min_delta: 0.0,
            schedule: ScheduleKind::Cosine,
            diffusion_steps: 50,
            samples: 10,
            loss: LossKind::L1,
            eval_max_windows: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.diffusion_steps == 0 || self.samples == 0 {
            return Err(Error::Config("train: batch_size, diffusion_steps and samples must be >= 1".into()));
        }
        if let LossKind::Huber { delta } = self.loss {
            if delta <= 0.0 {
                return Err(Error::Config("train: huber delta must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::build(self.schedule, self.diffusion_steps)
    }
}

/// Windows already assigned to splits.
#[derive(Debug, Clone, Default)]
pub struct SplitWindows {
    pub train: Vec<FeatureWindow>,
    pub val: Vec<FeatureWindow>,
    pub test: Vec<FeatureWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowForecast {
    pub window_id: usize,
    pub activity: String,
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: MetricSet,
    pub per_activity: BTreeMap<String, MetricSet>,
    pub forecasts: Vec<WindowForecast>,
    /// Mean wall-clock seconds per forecast window (not serialized).
    #[serde(skip)]
    pub seconds_per_window: f64,
}

/// Forecasts every window (up to `max_windows`) and scores the result.
pub fn evaluate(
    model: &HrTransformer,
    norm: &Normalizer,
    windows: &[FeatureWindow],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Evaluation> {
    let sched = cfg.schedule()?;
    let take = if cfg.eval_max_windows == 0 { windows.len() } else { cfg.eval_max_windows.min(windows.len()) };
    if take == 0 {
        return Err(Error::invalid("no windows to evaluate"));
    }
    let start = Instant::now();
    let mut forecasts = Vec::with_capacity(take);
    for (i, w) in windows.iter().take(take).enumerate() {
        let input = ModelInput::from_window(w, norm)?;
        let pred = forecast(model, &input, &sched, cfg.samples, derive_seed(seed, TAG_FORECAST, i as u64), norm)?;
        forecasts.push(WindowForecast {
            window_id: i,
            activity: w.anchor_activity.to_string(),
            predicted: pred,
            actual: w.target.iter().map(|t| t.hr).collect(),
        });
    }
    let seconds_per_window = start.elapsed().as_secs_f64() / take as f64;
    score(forecasts, seconds_per_window)
}

fn score(forecasts: Vec<WindowForecast>, seconds_per_window: f64) -> Result<Evaluation> {
    let flat = |fs: &[&WindowForecast]| -> (Vec<f64>, Vec<f64>) {
        let t = fs.iter().flat_map(|f| f.actual.iter().copied()).collect();
        let p = fs.iter().flat_map(|f| f.predicted.iter().copied()).collect();
        (t, p)
    };
    let all: Vec<&WindowForecast> = forecasts.iter().collect();
    let (t, p) = flat(&all);
    let overall = metrics(&t, &p)?;
    let mut groups: BTreeMap<String, Vec<&WindowForecast>> = BTreeMap::new();
    for f in &forecasts {
        groups.entry(f.activity.clone()).or_default().push(f);
    }
    let mut per_activity = BTreeMap::new();
    for (k, fs) in groups {
        let (t, p) = flat(&fs);
        per_activity.insert(k, metrics(&t, &p)?);
    }
    Ok(Evaluation {
        overall,
        per_activity,
        forecasts,
        seconds_per_window,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    pub parameter_count: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub early_stopped_at: Option<usize>,
    pub skipped_steps: u64,
    pub diverged: Option<String>,
    pub test: Option<MetricSet>,
    pub test_per_activity: BTreeMap<String, MetricSet>,
    pub reference: ReferenceMetrics,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

pub struct TrainOutcome {
    pub model: HrTransformer,
    pub normalizer: Normalizer,
    pub report: TrainReport,
    pub evaluation: Option<Evaluation>,
}

fn examples(windows: &[FeatureWindow], norm: &Normalizer) -> Result<Vec<Example>> {
    windows
        .iter()
        .map(|w| {
            Ok(Example {
                input: ModelInput::from_window(w, norm)?,
                h0: w.target.iter().map(|t| norm.hr(t.hr)).collect(),
            })
        })
        .collect()
}

/// Validation loss with a fixed noise stream so epochs are comparable.
fn validation_loss(
    model: &HrTransformer,
    val: &[Example],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = rng_for(seed, TAG_VAL, 0);
    let mut total = 0.0;
    for chunk in val.chunks(cfg.batch_size) {
        let mut tape = Tape::no_grad();
        let batch: Vec<&Example> = chunk.iter().collect();
        let l = training_loss(model, &mut tape, &batch, sched, cfg.loss, &mut rng, &mut Ctx::eval())?;
        total += tape.value(l).item() * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

/// Trains from scratch, keeps the best-validation parameters, then forecasts
/// the test split.
pub fn train(
    data: &SplitWindows,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    config_hash: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let started = Instant::now();
    let norm = Normalizer::fit(&data.train)?;
    let sched = cfg.schedule()?;
    let mut model = HrTransformer::new(model_cfg.clone(), derive_seed(seed, TAG_INIT, 0))?;
    let train_ex = examples(&data.train, &norm)?;
    let val_ex = examples(&data.val, &norm)?;

    let mut opt = Adam::new(cfg.adam, model.store());
    let lr_sched = MultiStepLr {
        base: cfg.adam.lr,
        milestones: cfg.lr_milestones.clone(),
        gamma: cfg.lr_gamma,
    };
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best: Option<(usize, ParamStore)> = None;
    let mut report = TrainReport {
        seed,
        config_hash: config_hash.to_string(),
        parameter_count: model.parameter_count(),
        train_windows: data.train.len(),
        val_windows: data.val.len(),
        test_windows: data.test.len(),
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        learning_rate: Vec::new(),
        epochs_run: 0,
        best_epoch: None,
        early_stopped_at: None,
        skipped_steps: 0,
        diverged: None,
        test: None,
        test_per_activity: BTreeMap::new(),
        reference: reference_metrics(),
        wall_clock_seconds: 0.0,
    };
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut step_rng = rng_for(seed, TAG_STEP, 0);
    let mut drop_rng = rng_for(seed, TAG_DROPOUT, 0);

    'epochs: for epoch in 0..cfg.epochs {
        opt.lr = lr_sched.lr(epoch);
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SHUFFLE, epoch as u64));
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_ex[i]).collect();
            let mut tape = Tape::new();
            let mut ctx = Ctx::train(&mut drop_rng, model_cfg.dropout);
            let loss = training_loss(&model, &mut tape, &batch, &sched, cfg.loss, &mut step_rng, &mut ctx)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                report.diverged = Some(format!("non-finite training loss at epoch {}", epoch + 1));
                log::error!("{}", report.diverged.as_deref().unwrap_or_default());
                break 'epochs;
            }
            let grads = tape.backward(loss)?.for_params(&tape, model.store());
            opt.step(model.store_mut(), &grads);
            sum += lv * chunk.len() as f64;
        }
        let train_loss = sum / train_ex.len() as f64;
        let val = validation_loss(&model, &val_ex, &sched, cfg, seed)?;
        report.train_loss.push(train_loss);
        report.val_loss.push(val);
        report.learning_rate.push(opt.lr);
        report.epochs_run = epoch + 1;
        // Without a validation split the training loss drives selection.
        let monitored = if val.is_finite() { val } else { train_loss };
        let stop = stopper.update(monitored);
        if stopper.improved() {
            best = Some((epoch, model.store().clone()));
        }
        log::info!("epoch {:>4} train {train_loss:.5} val {val:.5} lr {:.2e}", epoch + 1, opt.lr);
        if stop {
            report.early_stopped_at = Some(epoch + 1);
            break;
        }
    }
    report.skipped_steps = opt.skipped();
    if let Some((epoch, store)) = best {
        model.load_params(&store)?;
        report.best_epoch = Some(epoch + 1);
    }

    let evaluation = if data.test.is_empty() {
        None
    } else {
        let ev = evaluate(&model, &norm, &data.test, cfg, seed)?;
        report.test = Some(ev.overall.clone());
        report.test_per_activity = ev.per_activity.clone();
        Some(ev)
    };
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        normalizer: norm,
        report,
        evaluation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Schedule,
    Steps,
    Loss,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "schedule" => Ok(SweepAxis::Schedule),
            "steps" => Ok(SweepAxis::Steps),
            "loss" => Ok(SweepAxis::Loss),
            _ => Err(Error::invalid(format!("unknown sweep axis {s:?} (schedule, steps, loss)"))),
        }
    }
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 3] = [SweepAxis::Schedule, SweepAxis::Steps, SweepAxis::Loss];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Schedule => "schedule",
            SweepAxis::Steps => "steps",
            SweepAxis::Loss => "loss",
        }
    }

    /// The training configurations of each row, derived from `base`.
    pub fn cells(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        match self {
            SweepAxis::Schedule => ScheduleKind::ALL
                .iter()
                .map(|&k| (k.to_string(), TrainConfig { schedule: k, ..base.clone() }))
                .collect(),
            SweepAxis::Steps => [50, 100, 200]
                .iter()
                .map(|&s| (s.to_string(), TrainConfig { diffusion_steps: s, ..base.clone() }))
                .collect(),
            SweepAxis::Loss => [LossKind::L1, LossKind::Huber { delta: 1.0 }, LossKind::Huber { delta: 0.4 }, LossKind::Huber { delta: 0.1 }]
                .iter()
                .map(|&l| (l.label(), TrainConfig { loss: l, ..base.clone() }))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_val_loss: Option<f64>,
    pub metrics: Option<MetricSet>,
    #[serde(skip)]
    pub seconds_per_window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub config_hash: String,
    pub rows: Vec<SweepRow>,
}

/// One full train and evaluation per cell; every cell uses the same seed.
pub fn sweep(
    axis: SweepAxis,
    data: &SplitWindows,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    seed: u64,
    config_hash: &str,
) -> Result<SweepTable> {
    let mut rows = Vec::new();
    for (label, cfg) in axis.cells(base) {
        let out = train(data, model_cfg, &cfg, seed, config_hash)?;
        if let Some(reason) = &out.report.diverged {
            log::error!("sweep cell {label}: {reason}");
            return Err(Error::Diverged {
                epoch: out.report.epochs_run,
                loss: f64::NAN,
            });
        }
        rows.push(SweepRow {
            label,
            schedule: cfg.schedule,
            diffusion_steps: cfg.diffusion_steps,
            loss: cfg.loss,
            seed,
            epochs_run: out.report.epochs_run,
            final_val_loss: out.report.val_loss.last().copied().filter(|v| v.is_finite()),
            metrics: out.report.test.clone(),
            seconds_per_window: out.evaluation.as_ref().map_or(0.0, |e| e.seconds_per_window),
        });
    }
    Ok(SweepTable {
        axis,
        config_hash: config_hash.to_string(),
        rows,
    })
}

/// Everything besides the weights needed to reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub normalizer: Normalizer,
    pub features: FeatureConfig,
    pub intensity_scaler: IntensityScaler,
    pub train: TrainConfig,
}

pub fn save_model(path: &Path, model: &HrTransformer, meta: &ModelMeta) -> Result<()> {
    let json = serde_json::to_string(meta)?;
    let mut f = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut f, &json, model.store())?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(HrTransformer, ModelMeta)> {
    let f = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (json, store) = read_checkpoint(BufReader::new(f))?;
    let meta: ModelMeta = serde_json::from_str(&json)?;
    let mut model = HrTransformer::new(meta.model.clone(), 0)?;
    model.load_params(&store)?;
    Ok((model, meta))
}
