//! Activity-routed encoder/decoder transformer that predicts diffusion noise.
//!
//! Tensors are token-major: a sequence of `n` tokens is an `n x d_model`
//! matrix. Linear weights are stored `out x in` and applied as `x W^T + b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvPadding, Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::FeatureWindow;
use crate::series::{ActivityLabel, IntensityCategory};

/// Vocabulary sizes of the fixed temporal tables: month, day of month, day of
/// week, hour, minute.
pub const TEMPORAL_VOCAB: [usize; 5] = [13, 32, 7, 24, 60];
const TEMPORAL_NAMES: [&str; 5] = ["month", "dom", "dow", "hour", "minute"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Window length L.
    pub window: usize,
    pub d_model: usize,
    pub generic_encoders: usize,
    pub specialized_encoders: usize,
    pub decoders: usize,
    /// Number of trailing decoder-side representations fed to the skip
    /// aggregation (the target embedding counts as the first).
    pub transformer_blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub feature_channels: usize,
    pub ffn_dim: usize,
    pub routing: bool,
    pub activity_embeddings: bool,
    pub skip_aggregation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 10,
            d_model: 128,
            generic_encoders: 1,
            specialized_encoders: ActivityLabel::COUNT,
            decoders: 2,
            transformer_blocks: 3,
            heads: 8,
            dropout: 0.1,
            feature_channels: 5,
            ffn_dim: 512,
            routing: true,
            activity_embeddings: true,
            skip_aggregation: true,
        }
    }
}

impl ModelConfig {
    /// Same model without routing and without activity embeddings.
    pub fn vanilla(&self) -> Self {
        ModelConfig {
            routing: false,
            activity_embeddings: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.window == 0 {
            return bad("window must be >= 1");
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.feature_channels != 5 {
            return bad("feature_channels must be 5");
        }
        if self.routing && self.specialized_encoders != ActivityLabel::COUNT {
            return bad("specialized_encoders must equal the number of activities (7)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be >= 1");
        }
        Ok(())
    }
}

/// Per-channel standardization fitted on the training split. The HR channel
/// and the diffusion target share one scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            mean: [0.0; 5],
            std: [1.0; 5],
        }
    }
}

impl Normalizer {
    pub fn fit(windows: &[FeatureWindow]) -> Result<Self> {
        let mut sums = [0.0; 5];
        let mut sq = [0.0; 5];
        let mut counts = [0usize; 5];
        let mut add = |c: usize, v: f64| {
            sums[c] += v;
            sq[c] += v * v;
            counts[c] += 1;
        };
        for w in windows {
            for f in &w.source {
                for (c, v) in f.channels().into_iter().enumerate() {
                    add(c, v);
                }
            }
            for t in &w.target {
                add(0, t.hr);
            }
        }
        if counts[0] == 0 {
            return Err(Error::invalid("cannot fit normalizer on zero windows"));
        }
        let mut n = Normalizer::default();
        for c in 0..5 {
            let k = counts[c] as f64;
            let m = sums[c] / k;
            let var = (sq[c] / k - m * m).max(0.0);
            n.mean[c] = m;
            n.std[c] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        Ok(n)
    }

    pub fn hr(&self, bpm: f64) -> f64 {
        (bpm - self.mean[0]) / self.std[0]
    }

    pub fn hr_inverse(&self, z: f64) -> f64 {
        z * self.std[0] + self.mean[0]
    }
}

/// Everything the network sees about one window apart from the noisy target.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `channels[c][t]`, standardized.
    pub channels: [Vec<f64>; 5],
    pub source_activity: Vec<usize>,
    pub source_intensity: Vec<usize>,
    pub temporal: Vec<[usize; 5]>,
    pub target_activity: Vec<usize>,
    pub route: ActivityLabel,
}

impl ModelInput {
    pub fn from_window(w: &FeatureWindow, norm: &Normalizer) -> Result<Self> {
        if w.source.len() != w.target.len() || w.source.is_empty() {
            return Err(Error::LengthMismatch(w.source.len(), w.target.len()));
        }
        let mut channels: [Vec<f64>; 5] = Default::default();
        for f in &w.source {
            for (c, v) in f.channels().into_iter().enumerate() {
                channels[c].push((v - norm.mean[c]) / norm.std[c]);
            }
        }
        Ok(ModelInput {
            channels,
            source_activity: w.source.iter().map(|f| f.activity.index()).collect(),
            source_intensity: w.source.iter().map(|f| f.intensity.dominant().index()).collect(),
            temporal: w.source.iter().map(|f| f.temporal.as_array()).collect(),
            target_activity: w.target.iter().map(|t| t.activity.index()).collect(),
            route: w.anchor_activity,
        })
    }

    pub fn len(&self) -> usize {
        self.target_activity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_activity.is_empty()
    }
}

/// Dropout switch threaded through a forward pass.
pub struct Ctx<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
    rate: f64,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Ctx<'static> {
        Ctx { rng: None, rate: 0.0 }
    }

    pub fn train(rng: &'a mut ChaCha8Rng, rate: f64) -> Self {
        Ctx { rng: Some(rng), rate }
    }

    fn drop(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => tape.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

/// Standard sinusoidal table: even columns `sin(p / 10000^(2i/d))`, odd columns cosine.
pub fn sinusoid_table(rows: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for p in 0..rows {
        data.extend(sinusoid_row(p as f64, d));
    }
    Tensor::new(vec![rows, d], data).expect("table shape")
}

fn sinusoid_row(p: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            if j % 2 == 0 {
                (p * freq).sin()
            } else {
                (p * freq).cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Attention,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attention,
    ln1: Norm,
    cross: Attention,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
    ln3: Norm,
}

#[derive(Debug, Clone, Copy)]
struct Scaled {
    table: ParamId,
    alpha: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    src_conv: Linear,
    tgt_conv: Linear,
    pos: ParamId,
    activity: Option<Scaled>,
    intensity: Scaled,
    temporal: [ParamId; 5],
    step1: Linear,
    step2: Linear,
    generic: Vec<EncoderLayer>,
    specialized: Vec<EncoderLayer>,
    final_norm: Norm,
    decoders: Vec<DecoderLayer>,
    skip: Vec<Linear>,
    head: Linear,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, out: usize) -> Linear {
        Linear {
            w: self.store.register(
                &format!("{name}.w"),
                &[out, fan_in],
                Init::XavierUniform { fan_in, fan_out: out },
                &mut self.rng,
            ),
            b: self.store.register(&format!("{name}.b"), &[out], Init::Zeros, &mut self.rng),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.store.register(&format!("{name}.g"), &[d], Init::Ones, &mut self.rng),
            b: self.store.register(&format!("{name}.b"), &[d], Init::Zeros, &mut self.rng),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn encoder(&mut self, name: &str, d: usize, ff: usize) -> EncoderLayer {
        EncoderLayer {
            attn: self.attention(&format!("{name}.attn"), d),
            ln1: self.norm(&format!("{name}.ln1"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, ff),
            ff2: self.linear(&format!("{name}.ff2"), ff, d),
            ln2: self.norm(&format!("{name}.ln2"), d),
        }
    }

    fn decoder(&mut self, name: &str, d: usize, ff: usize) -> DecoderLayer {
        DecoderLayer {
            self_attn: self.attention(&format!("{name}.self"), d),
            ln1: self.norm(&format!("{name}.ln1"), d),
            cross: self.attention(&format!("{name}.cross"), d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, ff),
            ff2: self.linear(&format!("{name}.ff2"), ff, d),
            ln3: self.norm(&format!("{name}.ln3"), d),
        }
    }

    fn scaled(&mut self, name: &str, vocab: usize, d: usize) -> Scaled {
        Scaled {
            table: self.store.register(
                &format!("{name}.table"),
                &[vocab, d],
                Init::Uniform((1.0 / d as f64).sqrt()),
                &mut self.rng,
            ),
            alpha: self.store.register(&format!("{name}.alpha"), &[1], Init::Ones, &mut self.rng),
            beta: self.store.register(&format!("{name}.beta"), &[1], Init::Zeros, &mut self.rng),
        }
    }
}

/// Multi-head scaled dot-product attention on already projected `q`, `k`, `v`.
/// Scores are divided by `sqrt(d_model)` rather than the per-head width.
pub fn attention_core(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, d_model: usize, causal: bool) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (d_model as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let p = tape.softmax_rows(scores, causal);
        outs.push(tape.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

#[derive(Debug, Clone)]
pub struct HrTransformer {
    cfg: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl HrTransformer {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let l = cfg.window;
        let ff = cfg.ffn_dim;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let src_conv = b.linear("src.conv", 3, d);
        let tgt_conv = b.linear("tgt.conv", 3, d);
        let pos = b.store.register_buffer("pos", sinusoid_table(2 * l, d));
        let activity = cfg
            .activity_embeddings
            .then(|| b.scaled("activity", ActivityLabel::VOCAB, d));
        let intensity = b.scaled("intensity", IntensityCategory::COUNT, d);
        let temporal = std::array::from_fn(|i| {
            b.store
                .register_buffer(&format!("temporal.{}", TEMPORAL_NAMES[i]), sinusoid_table(TEMPORAL_VOCAB[i], d))
        });
        let step1 = b.linear("step.l1", d, d);
        let step2 = b.linear("step.l2", d, d);
        let generic = (0..cfg.generic_encoders)
            .map(|i| b.encoder(&format!("enc.generic.{i}"), d, ff))
            .collect();
        let specialized = if cfg.routing {
            ActivityLabel::ACTIVITIES
                .iter()
                .map(|a| b.encoder(&format!("enc.{}", a.as_str()), d, ff))
                .collect()
        } else {
            vec![b.encoder("enc.shared", d, ff)]
        };
        let final_norm = b.norm("enc.norm", d);
        let decoders = (0..cfg.decoders)
            .map(|i| b.decoder(&format!("dec.{i}"), d, ff))
            .collect();
        let skip = if cfg.skip_aggregation {
            (0..cfg.transformer_blocks.min(cfg.decoders + 1))
                .map(|i| b.linear(&format!("skip.{i}"), 3 * d, d))
                .collect()
        } else {
            Vec::new()
        };
        let head = b.linear("head", d, 1);
        let layout = Layout {
            src_conv,
            tgt_conv,
            pos,
            activity,
            intensity,
            temporal,
            step1,
            step2,
            generic,
            specialized,
            final_norm,
            decoders,
            skip,
            head,
        };
        Ok(HrTransformer { cfg, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(&self.store, id)
    }

    fn apply_linear(&self, tape: &mut Tape, lin: Linear, x: Var) -> Result<Var> {
        let w = self.p(tape, lin.w);
        let b = self.p(tape, lin.b);
        let y = tape.matmul_t(x, w)?;
        tape.add_row(y, b)
    }

    fn apply_norm(&self, tape: &mut Tape, n: Norm, x: Var) -> Result<Var> {
        let g = self.p(tape, n.g);
        let b = self.p(tape, n.b);
        tape.layer_norm(x, g, b)
    }

    fn conv(&self, tape: &mut Tape, lin: Linear, x: Var, padding: ConvPadding) -> Result<Var> {
        let w = self.p(tape, lin.w);
        let b = self.p(tape, lin.b);
        tape.conv1d(x, w, b, 3, padding)
    }

    fn scaled_lookup(&self, tape: &mut Tape, s: Scaled, ids: &[usize]) -> Result<Var> {
        let table = self.p(tape, s.table);
        let alpha = self.p(tape, s.alpha);
        let beta = self.p(tape, s.beta);
        let e = tape.embedding(table, ids)?;
        let e = tape.mul_scalar(e, alpha)?;
        tape.add_scalar(e, beta)
    }

    fn mha(&self, tape: &mut Tape, a: Attention, x: Var, ctx: Var, causal: bool) -> Result<Var> {
        let q = self.apply_linear(tape, a.q, x)?;
        let k = self.apply_linear(tape, a.k, ctx)?;
        let v = self.apply_linear(tape, a.v, ctx)?;
        let h = attention_core(tape, q, k, v, self.cfg.heads, self.cfg.d_model, causal)?;
        self.apply_linear(tape, a.o, h)
    }

    fn ffn(&self, tape: &mut Tape, ff1: Linear, ff2: Linear, x: Var, c: &mut Ctx) -> Result<Var> {
        let h = self.apply_linear(tape, ff1, x)?;
        let h = tape.gelu(h);
        let h = c.drop(tape, h);
        self.apply_linear(tape, ff2, h)
    }

    fn encoder_layer(&self, tape: &mut Tape, e: &EncoderLayer, x: Var, c: &mut Ctx) -> Result<Var> {
        let a = self.mha(tape, e.attn, x, x, false)?;
        let a = c.drop(tape, a);
        let x = tape.add(x, a)?;
        let x = self.apply_norm(tape, e.ln1, x)?;
        let f = self.ffn(tape, e.ff1, e.ff2, x, c)?;
        let f = c.drop(tape, f);
        let x = tape.add(x, f)?;
        self.apply_norm(tape, e.ln2, x)
    }

    fn decoder_layer(&self, tape: &mut Tape, l: &DecoderLayer, x: Var, context: Var, c: &mut Ctx) -> Result<Var> {
        let a = self.mha(tape, l.self_attn, x, x, true)?;
        let a = c.drop(tape, a);
        let x = tape.add(x, a)?;
        let x = self.apply_norm(tape, l.ln1, x)?;
        let a = self.mha(tape, l.cross, x, context, false)?;
        let a = c.drop(tape, a);
        let x = tape.add(x, a)?;
        let x = self.apply_norm(tape, l.ln2, x)?;
        let f = self.ffn(tape, l.ff1, l.ff2, x, c)?;
        let f = c.drop(tape, f);
        let x = tape.add(x, f)?;
        self.apply_norm(tape, l.ln3, x)
    }

    /// Sinusoidal encoding of `s` through two affine layers with GELU; `1 x d_model`.
    pub fn step_embedding(&self, tape: &mut Tape, s: usize) -> Result<Var> {
        let d = self.cfg.d_model;
        let e = tape.constant(Tensor::new(vec![1, d], sinusoid_row(s as f64, d))?);
        let h = self.apply_linear(tape, self.layout.step1, e)?;
        let h = tape.gelu(h);
        self.apply_linear(tape, self.layout.step2, h)
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let l = self.cfg.window;
        let lens = [
            input.channels.iter().map(|c| c.len()).max().unwrap_or(0),
            input.channels.iter().map(|c| c.len()).min().unwrap_or(0),
            input.source_activity.len(),
            input.source_intensity.len(),
            input.temporal.len(),
            input.target_activity.len(),
        ];
        if let Some(bad) = lens.iter().find(|&&n| n != l) {
            return Err(Error::LengthMismatch(*bad, l));
        }
        if input.source_activity.iter().chain(&input.target_activity).any(|&a| a >= ActivityLabel::VOCAB)
            || input.source_intensity.iter().any(|&i| i >= IntensityCategory::COUNT)
        {
            return Err(Error::invalid("label out of vocabulary"));
        }
        for t in &input.temporal {
            if t.iter().zip(TEMPORAL_VOCAB).any(|(v, n)| *v >= n) {
                return Err(Error::invalid(format!("temporal index {t:?} out of range")));
            }
        }
        Ok(())
    }

    /// Source embedding, `5L x d_model`, with the step embedding `step` broadcast.
    pub fn embed_source(&self, tape: &mut Tape, input: &ModelInput, step: Var) -> Result<Var> {
        self.check_input(input)?;
        let l = self.cfg.window;
        let tokens: Vec<f64> = input.channels.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::column(&tokens));
        let mut e = self.conv(tape, self.layout.src_conv, x, ConvPadding::Circular { segment: l })?;

        let tile = |ids: &[usize]| -> Vec<usize> { (0..5).flat_map(|_| ids.iter().copied()).collect() };
        let pos_ids: Vec<usize> = tile(&(0..l).collect::<Vec<_>>());
        let pos = self.p(tape, self.layout.pos);
        let pe = tape.embedding(pos, &pos_ids)?;
        e = tape.add(e, pe)?;

        if let Some(act) = self.layout.activity {
            let a = self.scaled_lookup(tape, act, &tile(&input.source_activity))?;
            e = tape.add(e, a)?;
        }
        let it = self.scaled_lookup(tape, self.layout.intensity, &tile(&input.source_intensity))?;
        e = tape.add(e, it)?;

        for (k, &table) in self.layout.temporal.iter().enumerate() {
            let ids: Vec<usize> = input.temporal.iter().map(|t| t[k]).collect();
            let t = self.p(tape, table);
            let te = tape.embedding(t, &tile(&ids))?;
            e = tape.add(e, te)?;
        }
        tape.add_row(e, step)
    }

    /// Target embedding of the noisy HR, `L x d_model`, positions `L..2L`.
    pub fn embed_target(&self, tape: &mut Tape, input: &ModelInput, noisy: &[f64], step: Var) -> Result<Var> {
        let l = self.cfg.window;
        if noisy.len() != l {
            return Err(Error::LengthMismatch(noisy.len(), l));
        }
        let x = tape.constant(Tensor::column(noisy));
        let mut e = self.conv(tape, self.layout.tgt_conv, x, ConvPadding::Causal)?;
        let pos = self.p(tape, self.layout.pos);
        let ids: Vec<usize> = (l..2 * l).collect();
        let pe = tape.embedding(pos, &ids)?;
        e = tape.add(e, pe)?;
        if let Some(act) = self.layout.activity {
            let a = self.scaled_lookup(tape, act, &input.target_activity)?;
            e = tape.add(e, a)?;
        }
        tape.add_row(e, step)
    }

    /// Generic layers, then the specialized layer for `label`, then the final norm.
    pub fn encode(&self, tape: &mut Tape, emb: Var, label: ActivityLabel, c: &mut Ctx) -> Result<Var> {
        let spec = if self.cfg.routing {
            if !label.is_activity() {
                return Err(Error::invalid("routing label `none` has no specialized encoder"));
            }
            &self.layout.specialized[label.index()]
        } else {
            &self.layout.specialized[0]
        };
        let mut x = c.drop(tape, emb);
        for g in &self.layout.generic {
            x = self.encoder_layer(tape, g, x, c)?;
        }
        x = self.encoder_layer(tape, spec, x, c)?;
        self.apply_norm(tape, self.layout.final_norm, x)
    }

    /// Encodes each sequence with the specialized layer matching its label;
    /// results are returned in input order.
    pub fn route_and_encode(
        &self,
        tape: &mut Tape,
        embs: &[Var],
        labels: &[ActivityLabel],
        c: &mut Ctx,
    ) -> Result<Vec<Var>> {
        if embs.len() != labels.len() {
            return Err(Error::LengthMismatch(embs.len(), labels.len()));
        }
        embs.iter()
            .zip(labels)
            .map(|(&e, &l)| self.encode(tape, e, l, c))
            .collect()
    }

    /// Decoder stack and noise head; returns an `L x 1` prediction.
    pub fn decode(&self, tape: &mut Tape, tgt: Var, context: Var, c: &mut Ctx) -> Result<Var> {
        let mut x = c.drop(tape, tgt);
        let mut reps = vec![x];
        for l in &self.layout.decoders {
            x = self.decoder_layer(tape, l, x, context, c)?;
            reps.push(x);
        }
        let out = if self.layout.skip.is_empty() {
            x
        } else {
            let start = reps.len() - self.layout.skip.len();
            let mut acc: Option<Var> = None;
            for (lin, &r) in self.layout.skip.iter().zip(&reps[start..]) {
                let y = self.conv(tape, *lin, r, ConvPadding::Causal)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, y)?,
                    None => y,
                });
            }
            acc.expect("at least one skip block")
        };
        self.apply_linear(tape, self.layout.head, out)
    }

    /// Full forward pass for one window at diffusion step `s`.
    pub fn forward(&self, tape: &mut Tape, input: &ModelInput, noisy: &[f64], s: usize, c: &mut Ctx) -> Result<Var> {
        let step = self.step_embedding(tape, s)?;
        let src = self.embed_source(tape, input, step)?;
        let context = self.encode(tape, src, input.route, c)?;
        let tgt = self.embed_target(tape, input, noisy, step)?;
        self.decode(tape, tgt, context, c)
    }

    /// Noise predictions for several noisy targets sharing one source window;
    /// the encoder runs once.
    pub fn predict_noise(&self, input: &ModelInput, noisy: &[Vec<f64>], s: usize) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::no_grad();
        let mut c = Ctx::eval();
        let step = self.step_embedding(&mut tape, s)?;
        let src = self.embed_source(&mut tape, input, step)?;
        let context = self.encode(&mut tape, src, input.route, &mut c)?;
        noisy
            .iter()
            .map(|h| {
                let tgt = self.embed_target(&mut tape, input, h, step)?;
                let out = self.decode(&mut tape, tgt, context, &mut c)?;
                Ok(tape.value(out).data().to_vec())
            })
            .collect()
    }

    /// Replaces all parameter values after checking names and shapes.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        self.store.load_from(other)
    }
}
