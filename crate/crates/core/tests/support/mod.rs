//! Checks shared by the per-module tests and the acceptance run.
#![allow(dead_code)]

use hrdiff_core::autodiff::{gradient_check, gradient_check_params, ConvPadding, ParamId, Tape, Tensor, Var, DEFAULT_STEP};
use hrdiff_core::diffusion::*;
use hrdiff_core::model::{Ctx, HrTransformer, ModelConfig, ModelInput};
use hrdiff_core::series::ActivityLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const GRAD_TOL: f64 = 1e-6;

pub fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct gradient.
pub fn weigh(t: &mut Tape, out: Var) -> hrdiff_core::Result<Var> {
    let n = t.value(out).len();
    let shape = t.shape(out).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.731).sin() + 0.3).collect();
    let wv = t.constant(Tensor::new(shape, w)?);
    let p = t.mul(out, wv)?;
    Ok(t.sum(p))
}

pub fn check<F>(f: F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> hrdiff_core::Result<Var>,
{
    gradient_check(|t, v| {
        let o = f(t, v)?;
        weigh(t, o)
    }, inputs, DEFAULT_STEP)
    .unwrap()
}

/// Relative gradient-check error of every differentiable primitive over a few shapes.
pub fn primitive_gradient_errors() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for &(m, k, n) in &[(1, 1, 1), (4, 8, 16), (3, 5, 2)] {
        let a = rand_t(&mut rng, &[m, k]);
        let b = rand_t(&mut rng, &[k, n]);
        let bt = rand_t(&mut rng, &[n, k]);
        let c = rand_t(&mut rng, &[m, k]);
        let row = rand_t(&mut rng, &[k]);
        let s = rand_t(&mut rng, &[1]);
        let cases: Vec<(&str, f64)> = vec![
            ("matmul", check(|t, v| t.matmul(v[0], v[1]), &[a.clone(), b.clone()])),
            ("matmul_t", check(|t, v| t.matmul_t(v[0], v[1]), &[a.clone(), bt.clone()])),
            ("transpose", check(|t, v| Ok(t.transpose(v[0])), &[a.clone()])),
            ("add", check(|t, v| t.add(v[0], v[1]), &[a.clone(), c.clone()])),
            ("sub", check(|t, v| t.sub(v[0], v[1]), &[a.clone(), c.clone()])),
            ("mul", check(|t, v| t.mul(v[0], v[1]), &[a.clone(), c.clone()])),
            ("add_row", check(|t, v| t.add_row(v[0], v[1]), &[a.clone(), row.clone()])),
            ("scale", check(|t, v| Ok(t.scale(v[0], -2.5)), &[a.clone()])),
            ("mul_scalar", check(|t, v| t.mul_scalar(v[0], v[1]), &[a.clone(), s.clone()])),
            ("add_scalar", check(|t, v| t.add_scalar(v[0], v[1]), &[a.clone(), s.clone()])),
            ("softmax", check(|t, v| Ok(t.softmax_rows(v[0], false)), &[a.clone()])),
            ("softmax_causal", check(|t, v| Ok(t.softmax_rows(v[0], true)), &[a.clone()])),
            ("gelu", check(|t, v| Ok(t.gelu(v[0])), &[a.clone()])),
            ("mean", check(|t, v| Ok(t.mean(v[0])), &[a.clone()])),
            ("sum", check(|t, v| Ok(t.sum(v[0])), &[a.clone()])),
            ("abs", check(|t, v| Ok(t.abs(v[0])), &[a.clone()])),
            ("huber", check(|t, v| Ok(t.huber(v[0], 0.4)), &[a.clone()])),
            ("concat_rows", check(|t, v| t.concat_rows(&[v[0], v[1]]), &[a.clone(), c.clone()])),
            ("concat_cols", check(|t, v| t.concat_cols(&[v[0], v[1]]), &[a.clone(), c.clone()])),
            ("slice_rows", check(|t, v| t.slice_rows(v[0], m / 2, m), &[a.clone()])),
            ("slice_cols", check(|t, v| t.slice_cols(v[0], 0, k.div_ceil(2)), &[a.clone()])),
            ("embedding", check(|t, v| t.embedding(v[0], &[0, m - 1, 0]), &[a.clone()])),
            (
                "dropout",
                check(
                    |t, v| {
                        let mut r = ChaCha8Rng::seed_from_u64(5);
                        Ok(t.dropout(v[0], 0.3, &mut r))
                    },
                    &[a.clone()],
                ),
            ),
        ];
        out.extend(cases.into_iter().map(|(name, e)| (format!("{name} {m}x{k}x{n}"), e)));
        if k > 1 {
            let g = rand_t(&mut rng, &[k]);
            let be = rand_t(&mut rng, &[k]);
            let e = check(|t, v| t.layer_norm(v[0], v[1], v[2]), &[a.clone(), g, be]);
            out.push((format!("layer_norm {m}x{k}"), e));
        }
    }
    for padding in [ConvPadding::Circular { segment: 4 }, ConvPadding::Causal] {
        let x = rand_t(&mut rng, &[8, 3]);
        let w = rand_t(&mut rng, &[5, 9]);
        let b = rand_t(&mut rng, &[5]);
        let e = check(|t, v| t.conv1d(v[0], v[1], v[2], 3, padding), &[x, w, b]);
        out.push((format!("conv1d {padding:?}"), e));
    }
    out
}

pub fn small_cfg() -> ModelConfig {
    ModelConfig {
        window: 4,
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn random_input(l: usize, route: ActivityLabel, rng: &mut ChaCha8Rng) -> ModelInput {
    let mut ch = |_: usize| (0..l).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let channels = [ch(0), ch(1), ch(2), ch(3), ch(4)];
    ModelInput {
        channels,
        source_activity: (0..l).map(|i| if i + 1 == l { route.index() } else { 7 }).collect(),
        source_intensity: (0..l).map(|i| i % 4).collect(),
        temporal: (0..l).map(|i| [3, 14, 2, 9, 10 + i]).collect(),
        target_activity: vec![route.index(); l],
        route,
    }
}

pub fn noisy(l: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..l).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn run(model: &HrTransformer, input: &ModelInput, h: &[f64], s: usize) -> Vec<f64> {
    let mut tape = Tape::no_grad();
    let out = model.forward(&mut tape, input, h, s, &mut Ctx::eval()).unwrap();
    tape.value(out).data().to_vec()
}

/// Largest finite-difference derivative of an output with respect to any
/// later target position, and whether the last output depends on the first.
pub fn decoder_causality(pairs: usize) -> (f64, bool) {
    let model = HrTransformer::new(ModelConfig { window: 6, ..small_cfg() }, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = random_input(6, ActivityLabel::Treadmill, &mut rng);
    let h = noisy(6, &mut rng);
    let base = run(&model, &input, &h, 9);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < pairs {
        let i = rng.random_range(0..6);
        let j = rng.random_range(0..6);
        if j <= i {
            continue;
        }
        let mut hp = h.clone();
        hp[j] += eps;
        let mut hm = h.clone();
        hm[j] -= eps;
        let d = (run(&model, &input, &hp, 9)[i] - run(&model, &input, &hm, 9)[i]) / (2.0 * eps);
        worst = worst.max(d.abs());
        checked += 1;
    }
    let mut hp = h.clone();
    hp[0] += 0.5;
    (worst, run(&model, &input, &hp, 9)[5] != base[5])
}

/// Routing a permuted mixed-activity batch returns the same contexts, bit for
/// bit, in the permuted order; a batch of one matches too.
pub fn batch_routing_is_order_stable() -> bool {
    let model = HrTransformer::new(small_cfg(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels = [ActivityLabel::Running, ActivityLabel::Swimming, ActivityLabel::Walking, ActivityLabel::Sport];
    let inputs: Vec<ModelInput> = labels.iter().map(|&l| random_input(4, l, &mut rng)).collect();
    let encode_all = |order: &[usize]| -> Vec<Vec<u64>> {
        let mut tape = Tape::no_grad();
        let step = model.step_embedding(&mut tape, 4).unwrap();
        let embs: Vec<_> = order
            .iter()
            .map(|&i| model.embed_source(&mut tape, &inputs[i], step).unwrap())
            .collect();
        let ls: Vec<_> = order.iter().map(|&i| labels[i]).collect();
        let out = model.route_and_encode(&mut tape, &embs, &ls, &mut Ctx::eval()).unwrap();
        out.iter().map(|v| tape.value(*v).data().iter().map(|x| x.to_bits()).collect()).collect()
    };
    let forward = encode_all(&[0, 1, 2, 3]);
    let perm = [2, 0, 3, 1];
    let permuted = encode_all(&perm);
    perm.iter().enumerate().all(|(k, &i)| permuted[k] == forward[i]) && encode_all(&[1])[0] == forward[1]
}

/// Each specialized encoder emits a distinct constant direction; the routed
/// output must reveal which encoder ran.
pub fn routing_is_observable() -> bool {
    let cfg = ModelConfig { d_model: 8, heads: 2, ..small_cfg() };
    let mut model = HrTransformer::new(cfg, 9).unwrap();
    for (k, a) in ActivityLabel::ACTIVITIES.iter().enumerate() {
        let store = model.store_mut();
        let g = store.id(&format!("enc.{}.ln2.g", a.as_str())).unwrap();
        store.value_mut(g).data_mut().fill(0.0);
        let b = store.id(&format!("enc.{}.ln2.b", a.as_str())).unwrap();
        let v = store.value_mut(b).data_mut();
        v.fill(0.0);
        v[k] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    ActivityLabel::ACTIVITIES.iter().enumerate().all(|(k, &a)| {
        let input = random_input(4, a, &mut rng);
        let mut tape = Tape::no_grad();
        let step = model.step_embedding(&mut tape, 1).unwrap();
        let e = model.embed_source(&mut tape, &input, step).unwrap();
        let c = model.encode(&mut tape, e, a, &mut Ctx::eval()).unwrap();
        let t = tape.value(c);
        (0..20).all(|r| {
            let row = t.row(r);
            let arg = (0..8).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
            arg == k
        })
    })
}

/// Gradient-check error of the full training loss over 32 random parameter
/// coordinates, and whether the check left the parameters untouched.
pub fn full_loss_gradient_error() -> (f64, bool) {
    let mut model = HrTransformer::new(small_cfg(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let examples: Vec<Example> = [ActivityLabel::Running, ActivityLabel::Swimming]
        .iter()
        .map(|&a| Example { input: random_input(4, a, &mut rng), h0: noisy(4, &mut rng) })
        .collect();
    let sched = DiffusionSchedule::build(ScheduleKind::Cosine, 50).unwrap();
    let trainable: Vec<(ParamId, usize)> = model
        .store()
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter(|(_, p)| {
            // Skip specialized encoders that the two examples never route to.
            let unused = ActivityLabel::ACTIVITIES
                .iter()
                .filter(|a| !matches!(a, ActivityLabel::Running | ActivityLabel::Swimming))
                .any(|a| p.name.starts_with(&format!("enc.{}.", a.as_str())));
            !unused
        })
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    let coords: Vec<(ParamId, usize)> = (0..32)
        .map(|_| {
            let (id, n) = trainable[rng.random_range(0..trainable.len())];
            (id, rng.random_range(0..n))
        })
        .collect();
    let store = model.store().clone();
    let err = gradient_check_params(
        model.store_mut(),
        |tape, s| {
            let mut m = HrTransformer::new(small_cfg(), 13)?;
            m.load_params(s)?;
            let mut r = ChaCha8Rng::seed_from_u64(15);
            let batch: Vec<&Example> = examples.iter().collect();
            training_loss(&m, tape, &batch, &sched, LossKind::L1, &mut r, &mut Ctx::eval())
        },
        &coords,
        DEFAULT_STEP,
    )
    .unwrap();
    (err, model.store() == &store)
}

pub fn input(l: usize) -> ModelInput {
    ModelInput {
        channels: Default::default(),
        source_activity: vec![7; l],
        source_intensity: vec![0; l],
        temporal: vec![[1, 1, 0, 0, 0]; l],
        target_activity: vec![0; l],
        route: ActivityLabel::Running,
    }
}

/// Population variance and excess kurtosis.
pub fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let k4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (v, k4 / (v * v) - 3.0)
}

/// Every schedule identity the sampler relies on, for one `(kind, S)`.
pub fn schedule_identities_hold(kind: ScheduleKind, steps: usize) -> bool {
    let s = DiffusionSchedule::build(kind, steps).unwrap();
    let mut prev_ab = 1.0;
    let mut prev_snr = f64::INFINITY;
    let mut prev_beta = 0.0;
    for i in 1..=steps {
        let ab = s.alpha_bar(i);
        let snr = ab / (1.0 - ab);
        let ok = ab == prev_ab * s.alpha(i)
            && (2.0 * s.b(i).powi(2) - (1.0 - ab)).abs() < 1e-12
            && snr < prev_snr
            && ab < prev_ab
            && s.beta(i) >= prev_beta;
        if !ok {
            return false;
        }
        prev_ab = ab;
        prev_snr = snr;
        prev_beta = s.beta(i);
    }
    s.beta_tilde(1) == s.beta(1)
}

/// Variance and excess kurtosis of `n` Laplace draws at b = 1, plus the
/// excess kurtosis of a Gaussian with the same variance as a negative control.
pub fn sampler_statistics(n: usize) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let xs = sample_laplace(n, 1.0, &mut rng);
    let (v, k) = moments(&xs);
    let normal = Normal::new(0.0, 2f64.sqrt()).unwrap();
    let gs: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    (v, k, moments(&gs).1)
}

/// Mean RMSE of forward-to-S then cheating reverse, over `trials` targets.
pub fn cheating_round_trip_rmse(steps: usize, trials: usize) -> f64 {
    let sched = DiffusionSchedule::build(ScheduleKind::Cosine, steps).unwrap();
    let l = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut total = 0.0;
    for t in 0..trials {
        let h0 = sample_laplace(l, 1.0, &mut rng);
        let (mut h, _) = forward_marginal(&h0, steps, &sched, &mut rng).unwrap();
        let oracle = CheatingDenoiser { h0: h0.clone(), schedule: &sched };
        let mut chain = ChaCha8Rng::seed_from_u64(t as u64);
        for s in (1..=steps).rev() {
            let e = oracle.predict(&input(l), std::slice::from_ref(&h), s).unwrap();
            h = reverse_step(&h, &e[0], s, &sched, &mut chain);
        }
        let mse = h.iter().zip(&h0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / l as f64;
        total += mse.sqrt();
    }
    total / trials as f64
}
