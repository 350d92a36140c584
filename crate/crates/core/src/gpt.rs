//! Cross-conditional GPT over audio tokens and two code streams.
//!
//! The token sequence is `[audio (n) | stream A codes (n) | stream B codes (n)]`.
//! Position `t` of any segment may attend to positions `<= t` of every
//! segment. Logits are read from the two code segments; code token `t`
//! predicts code `t + 1` of its stream, and audio token `t` carries the
//! audio of that target step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, Ctx, FeatureStats};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GptConfig {
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Codebook size `M` of each stream.
    pub vocab: usize,
    /// Codes per window `T'`.
    pub context: usize,
    pub audio_dim: usize,
    /// Audio frames averaged into one token.
    pub audio_pool: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl GptConfig {
    pub fn paper() -> Self {
        Self {
            layers: 12,
            channels: 768,
            heads: 12,
            dropout: 0.1,
            vocab: 512,
            context: 12,
            audio_dim: crate::audio::ONSET_FILE_DIM,
            audio_pool: 8,
            lr: 3e-5,
            steps: 100_000,
            batch_size: 32,
        }
    }

    pub fn desk() -> Self {
        Self {
            layers: 4,
            channels: 128,
            heads: 4,
            vocab: 32,
            audio_dim: crate::audio::BUILTIN_ONSET_DIM,
            lr: 1e-3,
            steps: 1000,
            batch_size: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.layers == 0 || self.vocab < 2 || self.context < 2 || self.audio_dim == 0 || self.audio_pool == 0 {
            return bad("gpt sizes must be positive (vocab and context at least 2)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("gpt lr and batch size must be positive".into());
        }
        Ok(())
    }
}

/// Positions of the three segments for a window of `n` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub n: usize,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        3 * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn position(&self, segment: usize, t: usize) -> usize {
        segment * self.n + t
    }

    /// `(segment, time)` of a flat position.
    pub fn locate(&self, pos: usize) -> (usize, usize) {
        (pos / self.n, pos % self.n)
    }
}

/// Additive `3n x 3n` mask: 0 where the key's time step is at most the
/// query's, `-inf` elsewhere.
pub fn attention_mask(n: usize) -> Tensor {
    let lay = TokenLayout { n };
    let size = lay.len();
    let mut m = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            if lay.locate(j).1 > lay.locate(i).1 {
                m[i * size + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::new(vec![size, size], m)
}

/// `softmax(q k^T / sqrt(d) + mask) v` over `[batch, n, d]` operands.
pub fn attend<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, mask: Option<&Tensor>, ctx: Option<&Ctx<'g, '_>>) -> Var<'g> {
    let shape = q.shape();
    let d = *shape.last().unwrap();
    let mut scores = q.bmm(k, true).scale(1.0 / (d as f64).sqrt());
    if let Some(m) = mask {
        let s = scores.shape();
        let (bh, n) = (s[0], s[1]);
        assert_eq!(m.shape(), [n, n], "mask shape");
        let mut full = Vec::with_capacity(bh * n * n);
        for _ in 0..bh {
            full.extend_from_slice(m.data());
        }
        scores = scores.add(q.graph().constant(Tensor::new(vec![bh, n, n], full)));
    }
    let mut att = scores.softmax_last();
    if let Some(c) = ctx {
        att = c.dropout(att);
    }
    att.bmm(v, false)
}

/// Mean cross-entropy over both code streams and all steps.
pub fn ce_loss<'g>(logits_a: Var<'g>, logits_b: Var<'g>, targets_a: &[usize], targets_b: &[usize]) -> Var<'g> {
    logits_a.cross_entropy(targets_a).add(logits_b.cross_entropy(targets_b)).scale(0.5)
}

/// Mean `-ln p[target]` of `[rows, M]` probability rows.
pub fn cross_entropy_probs(probs: &Tensor, targets: &[usize]) -> f64 {
    let m = probs.last_dim();
    let rows: Vec<&[f64]> = probs.data().chunks(m).collect();
    assert_eq!(rows.len(), targets.len());
    rows.iter().zip(targets).map(|(r, &t)| -r[t].ln()).sum::<f64>() / targets.len() as f64
}

/// Probability rows from logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let g = Graph::new();
    (*g.constant(logits.clone()).softmax_last().value()).clone()
}

#[derive(Clone, Debug)]
pub struct GptModel {
    pub config: GptConfig,
    pub params: ParamStore,
    pub audio_stats: FeatureStats,
}

/// One window of `T'` audio tokens and code pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct GptExample {
    /// `T' x audio_dim` raw (unnormalized) pooled audio tokens.
    pub audio: Vec<f64>,
    pub codes_a: Vec<usize>,
    pub codes_b: Vec<usize>,
}

impl GptModel {
    pub fn new(config: GptConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (c, m) = (config.channels, config.vocab);
        let mut p = ParamStore::new();
        init_linear(&mut p, "audio_proj", config.audio_dim, c, true, rng);
        p.insert("emb.a", Tensor::randn(vec![m, c], 0.02, rng));
        p.insert("emb.b", Tensor::randn(vec![m, c], 0.02, rng));
        p.insert("pos", Tensor::randn(vec![3 * config.context, c], 0.02, rng));
        for i in 0..config.layers {
            init_layer_norm(&mut p, &format!("h{i}.ln1"), c);
            init_linear(&mut p, &format!("h{i}.attn.qkv"), c, 3 * c, true, rng);
            init_linear(&mut p, &format!("h{i}.attn.proj"), c, c, true, rng);
            init_layer_norm(&mut p, &format!("h{i}.ln2"), c);
            init_linear(&mut p, &format!("h{i}.mlp.fc"), c, 4 * c, true, rng);
            init_linear(&mut p, &format!("h{i}.mlp.proj"), 4 * c, c, true, rng);
        }
        init_layer_norm(&mut p, "ln_f", c);
        init_linear(&mut p, "head.a", c, m, true, rng);
        init_linear(&mut p, "head.b", c, m, true, rng);
        let audio_stats = FeatureStats::identity(config.audio_dim);
        Ok(Self { config, params: p, audio_stats })
    }

    fn check_codes(&self, codes: &[usize]) -> Result<()> {
        match codes.iter().find(|&&i| i >= self.config.vocab) {
            Some(&bad) => Err(Error::Vocabulary { index: bad, vocab: self.config.vocab }),
            None => Ok(()),
        }
    }

    /// Token embeddings `[batch, 3n, C]` for normalized audio `[batch, n, F]`
    /// and flattened batch-major code indices.
    pub fn embed<'g>(&self, ctx: &Ctx<'g, '_>, audio: &Tensor, codes_a: &[usize], codes_b: &[usize]) -> Result<Var<'g>> {
        let [b, n, f] = audio.shape()[..] else {
            return Err(Error::Shape(format!("audio tokens must be [batch, n, F], got {:?}", audio.shape())));
        };
        if f != self.config.audio_dim {
            return Err(Error::Shape(format!("audio width {f}, model expects {}", self.config.audio_dim)));
        }
        if n == 0 || n > self.config.context {
            return Err(Error::Shape(format!("{n} steps exceed the context of {}", self.config.context)));
        }
        if codes_a.len() != b * n || codes_b.len() != b * n {
            return Err(Error::Shape(format!("expected {} codes per stream", b * n)));
        }
        self.check_codes(codes_a)?;
        self.check_codes(codes_b)?;
        let c = self.config.channels;
        let a = ctx.linear("audio_proj", ctx.constant(audio.clone()));
        let ea = ctx.p("emb.a").gather_rows(codes_a).reshape(vec![b, n, c]);
        let eb = ctx.p("emb.b").gather_rows(codes_b).reshape(vec![b, n, c]);
        let x = Var::concat(&[a, ea, eb], 1);
        let lay = TokenLayout { n };
        let pos_idx: Vec<usize> = (0..3).flat_map(|s| (0..n).map(move |t| s * self.config.context + t)).collect();
        let pos = ctx.p("pos").gather_rows(&pos_idx).reshape(vec![lay.len() * c]);
        Ok(x.reshape(vec![b, lay.len() * c]).add_row(pos).reshape(vec![b, lay.len(), c]))
    }

    fn self_attention<'g>(&self, ctx: &Ctx<'g, '_>, i: usize, x: Var<'g>, mask: &Tensor) -> Var<'g> {
        let [b, n, c] = x.shape()[..] else { unreachable!() };
        let h = self.config.heads;
        let d = c / h;
        let qkv = ctx
            .linear(&format!("h{i}.attn.qkv"), x)
            .reshape(vec![b, n, 3, h, d])
            .permute(&[2, 0, 3, 1, 4])
            .reshape(vec![3, b * h, n, d]);
        let part = |j: usize| qkv.narrow(0, j, 1).reshape(vec![b * h, n, d]);
        let y = attend(part(0), part(1), part(2), Some(mask), Some(ctx));
        let y = y.reshape(vec![b, h, n, d]).permute(&[0, 2, 1, 3]).reshape(vec![b, n, c]);
        ctx.linear(&format!("h{i}.attn.proj"), y)
    }

    fn block<'g>(&self, ctx: &Ctx<'g, '_>, i: usize, x: Var<'g>, mask: &Tensor) -> Var<'g> {
        let a = self.self_attention(ctx, i, ctx.layer_norm(&format!("h{i}.ln1"), x), mask);
        let x = x.add(ctx.dropout(a));
        let hdn = ctx.linear(&format!("h{i}.mlp.fc"), ctx.layer_norm(&format!("h{i}.ln2"), x)).gelu();
        let m = ctx.linear(&format!("h{i}.mlp.proj"), hdn);
        x.add(ctx.dropout(m))
    }

    /// Hidden states `[batch, 3n, C]` after the final layer norm.
    pub fn hidden<'g>(&self, ctx: &Ctx<'g, '_>, tokens: Var<'g>) -> Var<'g> {
        let n = tokens.shape()[1] / 3;
        let mask = attention_mask(n);
        let mut x = ctx.dropout(tokens);
        for i in 0..self.config.layers {
            x = self.block(ctx, i, x, &mask);
        }
        ctx.layer_norm("ln_f", x)
    }

    /// Logits `[batch * n, M]` for both code streams.
    pub fn logits<'g>(&self, ctx: &Ctx<'g, '_>, tokens: Var<'g>) -> (Var<'g>, Var<'g>) {
        let [b, len, c] = tokens.shape()[..] else { panic!("tokens must be [batch, 3n, C]") };
        let n = len / 3;
        let h = self.hidden(ctx, tokens);
        let seg = |s: usize| h.narrow(1, s * n, n).reshape(vec![b * n, c]);
        (ctx.linear("head.a", seg(1)), ctx.linear("head.b", seg(2)))
    }

    /// Full per-position logits `[batch, 3n, M]` of head `a` (used by the
    /// causality checks, which need the audio rows too).
    pub fn all_position_logits<'g>(&self, ctx: &Ctx<'g, '_>, tokens: Var<'g>) -> Var<'g> {
        let h = self.hidden(ctx, tokens);
        ctx.linear("head.a", h)
    }

    fn normalized_audio(&self, rows: &[f64]) -> Vec<f64> {
        let mut v = rows.to_vec();
        self.audio_stats.apply(&mut v);
        v
    }

    /// Teacher-forced batch: inputs are codes `0..n`, targets `1..=n`, audio
    /// tokens `1..=n` (the audio of each target step).
    pub fn batch(&self, examples: &[&GptExample]) -> Result<(Tensor, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> {
        let f = self.config.audio_dim;
        let tq = examples.first().map(|e| e.codes_a.len()).unwrap_or(0);
        if tq < 2 {
            return Err(Error::SequenceTooShort { needed: 2, got: tq });
        }
        let n = tq - 1;
        let (mut audio, mut ia, mut ib, mut ta, mut tb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for e in examples {
            if e.codes_a.len() != tq || e.codes_b.len() != tq || e.audio.len() != tq * f {
                return Err(Error::Shape("examples disagree on window length".into()));
            }
            audio.extend(self.normalized_audio(&e.audio[f..]));
            ia.extend_from_slice(&e.codes_a[..n]);
            ib.extend_from_slice(&e.codes_b[..n]);
            ta.extend_from_slice(&e.codes_a[1..]);
            tb.extend_from_slice(&e.codes_b[1..]);
        }
        Ok((Tensor::new(vec![examples.len(), n, f], audio), ia, ib, ta, tb))
    }

    /// Teacher-forced top-1 accuracy of next-code prediction over both
    /// streams.
    pub fn accuracy(&self, examples: &[GptExample]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for chunk in examples.chunks(32) {
            let refs: Vec<&GptExample> = chunk.iter().collect();
            let (audio, ia, ib, ta, tb) = self.batch(&refs)?;
            let g = Graph::new();
            let ctx = Ctx::inference(&g, &self.params);
            let (la, lb) = self.logits(&ctx, self.embed(&ctx, &audio, &ia, &ib)?);
            for (l, t) in [(la, &ta), (lb, &tb)] {
                let v = l.value();
                for (row, &target) in v.rows().zip(t.iter()) {
                    hit += usize::from(argmax(row) == target);
                    total += 1;
                }
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    /// Extends both code streams by `steps` codes. `audio` holds one raw
    /// token row per code step (seed steps included); the window slides so
    /// at most `T' - 1` past codes are visible.
    pub fn generate(
        &self,
        audio: &[f64],
        seed_a: &[usize],
        seed_b: &[usize],
        steps: usize,
        opts: &SampleOptions,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        if steps < 1 {
            return Err(Error::Argument("generation needs at least one step".into()));
        }
        if seed_a.is_empty() || seed_a.len() != seed_b.len() {
            return Err(Error::Argument("need the same positive number of seed codes per stream".into()));
        }
        self.check_codes(seed_a)?;
        self.check_codes(seed_b)?;
        let f = self.config.audio_dim;
        let total = seed_a.len() + steps;
        let avail = audio.len() / f;
        if !audio.len().is_multiple_of(f) || avail < total {
            return Err(Error::Argument(format!(
                "audio covers {avail} code steps, {total} needed (at most {} new steps)",
                avail.saturating_sub(seed_a.len())
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let (mut a, mut b) = (seed_a.to_vec(), seed_b.to_vec());
        let window = self.config.context - 1;
        while a.len() < total {
            let start = a.len().saturating_sub(window);
            let n = a.len() - start;
            let tokens = self.normalized_audio(&audio[(start + 1) * f..(start + 1 + n) * f]);
            let g = Graph::new();
            let ctx = Ctx::inference(&g, &self.params);
            let emb = self.embed(&ctx, &Tensor::new(vec![1, n, f], tokens), &a[start..], &b[start..])?;
            let (la, lb) = self.logits(&ctx, emb);
            let pick = |l: Var<'_>, rng: &mut ChaCha8Rng| {
                let v = l.value();
                let row = v.rows().nth(n - 1).unwrap().to_vec();
                opts.pick(&row, rng)
            };
            let na = pick(la, &mut rng);
            let nb = pick(lb, &mut rng);
            a.push(na);
            b.push(nb);
        }
        Ok((a, b))
    }

    pub fn to_store(&self) -> ParamStore {
        let mut out = self.params.clone();
        self.audio_stats.to_store(&mut out, "stats.audio");
        out
    }

    pub fn from_store(config: GptConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let (params, stats) = crate::nn::split_stats(store);
        let audio_stats = FeatureStats::from_store(&stats, "stats.audio")?;
        if audio_stats.dim() != config.audio_dim {
            return Err(Error::Checkpoint(format!("audio stats width {} vs config {}", audio_stats.dim(), config.audio_dim)));
        }
        for name in ["emb.a", "emb.b", "pos", "head.a.weight", "head.b.weight", "ln_f.weight"] {
            params.try_get(name)?;
        }
        Ok(Self { config, params, audio_stats })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Decoding policy: greedy when `temperature` is 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleOptions {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl SampleOptions {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn pick(&self, logits: &[f64], rng: &mut impl Rng) -> usize {
        if self.temperature <= 0.0 {
            return argmax(logits);
        }
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&i, &j| logits[j].total_cmp(&logits[i]).then(i.cmp(&j)));
        let keep = self.top_k.unwrap_or(logits.len()).clamp(1, logits.len());
        let kept = &order[..keep];
        let top = logits[kept[0]];
        let w: Vec<f64> = kept.iter().map(|&i| ((logits[i] - top) / self.temperature).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (&i, wi) in kept.iter().zip(&w) {
            if u < *wi {
                return i;
            }
            u -= wi;
        }
        kept[0]
    }
}

/// Cuts aligned code streams and pooled audio tokens (one row per code
/// step) into windows of `context` steps.
pub fn window_examples(
    codes_a: &[usize],
    codes_b: &[usize],
    audio: &crate::audio::OnsetTrack,
    context: usize,
    stride: usize,
) -> Result<Vec<GptExample>> {
    if codes_a.len() != codes_b.len() {
        return Err(Error::Shape(format!("stream lengths {} and {}", codes_a.len(), codes_b.len())));
    }
    let n = codes_a.len().min(audio.len());
    if n < context {
        return Err(Error::SequenceTooShort { needed: context, got: n });
    }
    let stride = stride.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + context <= n {
        let audio_rows = (start..start + context).flat_map(|t| audio.row(t).iter().copied()).collect();
        out.push(GptExample {
            audio: audio_rows,
            codes_a: codes_a[start..start + context].to_vec(),
            codes_b: codes_b[start..start + context].to_vec(),
        });
        start += stride;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GptStep {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct GptTraining {
    pub model: GptModel,
    pub history: Vec<GptStep>,
}

pub fn train_gpt(config: &GptConfig, examples: &[GptExample], seed: u64, mut on_step: impl FnMut(&GptStep)) -> Result<GptTraining> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Validation("no gpt training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GptModel::new(config.clone(), &mut rng)?;
    let f = config.audio_dim;
    model.audio_stats = FeatureStats::fit(f, examples.iter().flat_map(|e| e.audio.chunks(f)));
    let names = model.params.names().to_vec();
    let mut opt = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (audio, ia, ib, ta, tb) = model.batch(&batch)?;
        let g = Graph::new();
        let drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let ctx = Ctx::new(&g, &model.params, true).with_dropout(config.dropout, drop_rng);
        let (la, lb) = model.logits(&ctx, model.embed(&ctx, &audio, &ia, &ib)?);
        let loss = ce_loss(la, lb, &ta, &tb);
        let lv = loss.value().item();
        if !lv.is_finite() {
            return Err(Error::Numerical { step, msg: format!("gpt cross-entropy {lv}") });
        }
        let grads = g.backward(loss);
        opt.step(&mut model.params, &grads, &names);
        let rec = GptStep { step, loss: lv };
        on_step(&rec);
        history.push(rec);
    }
    Ok(GptTraining { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GptConfig {
        GptConfig {
            layers: 2,
            channels: 8,
            heads: 2,
            dropout: 0.0,
            vocab: 5,
            context: 4,
            audio_dim: 3,
            ..GptConfig::desk()
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn mask_is_block_lower_triangular() {
        let m = attention_mask(4);
        assert_eq!(m.shape(), [12, 12]);
        for bi in 0..3 {
            for bj in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        let v = m.at2(bi * 4 + i, bj * 4 + j);
                        assert_eq!(v == 0.0, j <= i);
                    }
                }
            }
        }
    }

    #[test]
    fn embedding_lengths_and_lookup() {
        let model = GptModel::new(tiny(), &mut rng()).unwrap();
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &model.params);
        let audio = Tensor::zeros(vec![1, 3, 3]);
        let e = model.embed(&ctx, &audio, &[2, 2, 1], &[0, 4, 4]).unwrap();
        assert_eq!(e.shape(), [1, 9, 8]);
        let v = e.value();
        let pos = model.params.get("pos");
        let emb = model.params.get("emb.a");
        for t in 0..2 {
            for ch in 0..8 {
                let want = emb.at2(2, ch) + pos.at2(4 + t, ch);
                assert!((v.data()[(3 + t) * 8 + ch] - want).abs() < 1e-15);
            }
        }
        assert!(matches!(model.embed(&ctx, &audio, &[5, 0, 0], &[0, 0, 0]), Err(Error::Vocabulary { index: 5, vocab: 5 })));
    }

    #[test]
    fn paper_context_gives_36_tokens() {
        let cfg = GptConfig { context: 12, ..tiny() };
        let model = GptModel::new(cfg, &mut rng()).unwrap();
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &model.params);
        let e = model.embed(&ctx, &Tensor::zeros(vec![1, 12, 3]), &[0; 12], &[1; 12]).unwrap();
        assert_eq!(e.shape()[1], 36);
    }

    #[test]
    fn singleton_attention_returns_value_row() {
        let g = Graph::new();
        let q = g.constant(Tensor::new(vec![1, 1, 2], vec![0.3, -1.0]));
        let k = g.constant(Tensor::new(vec![1, 1, 2], vec![2.0, 0.5]));
        let v = g.constant(Tensor::new(vec![1, 1, 2], vec![7.0, -3.0]));
        assert_eq!(attend(q, k, v, None, None).value().data(), &[7.0, -3.0]);
        // only self visible
        let n = 3;
        let mut mask = vec![f64::NEG_INFINITY; n * n];
        (0..n).for_each(|i| mask[i * n + i] = 0.0);
        let mut r = rng();
        let q = g.constant(Tensor::randn(vec![1, n, 2], 1.0, &mut r));
        let k = g.constant(Tensor::randn(vec![1, n, 2], 1.0, &mut r));
        let vt = Tensor::randn(vec![1, n, 2], 1.0, &mut r);
        let out = attend(q, k, g.constant(vt.clone()), Some(&Tensor::new(vec![n, n], mask)), None);
        assert_eq!(out.value().data(), vt.data());
    }

    #[test]
    fn attention_matches_dense_reference() {
        let (n, d) = (5, 3);
        let mut r = rng();
        let (qt, kt, vt) = (
            Tensor::randn(vec![1, n, d], 1.0, &mut r),
            Tensor::randn(vec![1, n, d], 1.0, &mut r),
            Tensor::randn(vec![1, n, d], 1.0, &mut r),
        );
        let mask = Tensor::new(
            vec![n, n],
            (0..n * n).map(|i| if i % n > i / n { f64::NEG_INFINITY } else { 0.0 }).collect(),
        );
        let g = Graph::new();
        let got = attend(g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone()), Some(&mask), None).value();
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = (0..d).map(|c| qt.data()[i * d + c] * kt.data()[j * d + c]).sum();
                    dot / (d as f64).sqrt() + mask.at2(i, j)
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..d {
                let want: f64 = (0..n).map(|j| w[j] / z * vt.data()[j * d + c]).sum();
                assert!((got.data()[i * d + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform_rows() {
        let mut model = GptModel::new(tiny(), &mut rng()).unwrap();
        for n in ["head.a.weight", "head.a.bias", "head.b.weight", "head.b.bias"] {
            model.params.get_mut(n).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &model.params);
        let e = model.embed(&ctx, &Tensor::randn(vec![2, 3, 3], 1.0, &mut rng()), &[0, 1, 2, 3, 4, 0], &[1; 6]).unwrap();
        let (la, lb) = model.logits(&ctx, e);
        for l in [la, lb] {
            let p = softmax_rows(&l.value());
            assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
            let targets = vec![3; 6];
            assert!((cross_entropy_probs(&p, &targets) - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let g = Graph::new();
        for m in [32usize, 512] {
            let logits = g.constant(Tensor::zeros(vec![4, m]));
            let ce = ce_loss(logits, logits, &[0, 1, 2, 3], &[5, 6, 7, 8]).value().item();
            assert!((ce - (m as f64).ln()).abs() < 1e-12);
        }
        let onehot = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(cross_entropy_probs(&onehot, &[1, 0]), 0.0);
        let mut r = rng();
        let logits = Tensor::randn(vec![6, 7], 2.0, &mut r);
        let targets = [0, 6, 3, 3, 1, 2];
        let p = softmax_rows(&logits);
        let direct: f64 = targets.iter().enumerate().map(|(i, &t)| -p.at2(i, t).ln()).sum::<f64>() / 6.0;
        let fused = g.constant(logits).cross_entropy(&targets).value().item();
        assert!((direct - fused).abs() < 1e-10);
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let model = GptModel::new(tiny(), &mut rng()).unwrap();
        let mut r = rng();
        let n = 4;
        let audio = Tensor::randn(vec![1, n, 3], 1.0, &mut r);
        let a = vec![0, 1, 2, 3];
        let b = vec![4, 3, 2, 1];
        let run = |audio: &Tensor, a: &[usize], b: &[usize]| {
            let g = Graph::new();
            let ctx = Ctx::inference(&g, &model.params);
            let e = model.embed(&ctx, audio, a, b).unwrap();
            (*model.all_position_logits(&ctx, e).value()).clone()
        };
        let base = run(&audio, &a, &b);
        for t in 0..n - 1 {
            let mut audio2 = audio.clone();
            for v in &mut audio2.data_mut()[(t + 1) * 3..] {
                *v += 1.0;
            }
            let mut a2 = a.clone();
            let mut b2 = b.clone();
            for s in t + 1..n {
                a2[s] = (a2[s] + 1) % 5;
                b2[s] = (b2[s] + 2) % 5;
            }
            let pert = run(&audio2, &a2, &b2);
            let lay = TokenLayout { n };
            for seg in 0..3 {
                for tt in 0..=t {
                    let row = lay.position(seg, tt);
                    for m in 0..5 {
                        let i = row * 5 + m;
                        assert!((base.data()[i] - pert.data()[i]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_limits() {
        let logits = [0.1, 2.0, 2.0, -1.0];
        assert_eq!(argmax(&logits), 1);
        let mut r = rng();
        let cold = SampleOptions { temperature: 1e-9, top_k: None, seed: 0 };
        for _ in 0..50 {
            let i = cold.pick(&[0.1, 2.5, 2.0, -1.0], &mut r);
            assert_eq!(i, 1);
        }
        let top1 = SampleOptions { temperature: 1.0, top_k: Some(1), seed: 0 };
        assert_eq!(top1.pick(&logits, &mut r), 1);
    }

    #[test]
    fn generation_is_deterministic_and_checks_arguments() {
        let model = GptModel::new(tiny(), &mut rng()).unwrap();
        let audio: Vec<f64> = (0..10 * 3).map(|i| (i as f64 * 0.3).sin()).collect();
        let opts = SampleOptions::greedy();
        let x = model.generate(&audio, &[1], &[2], 8, &opts).unwrap();
        let y = model.generate(&audio, &[1], &[2], 8, &opts).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.0.len(), 9);
        assert!(model.generate(&audio, &[1], &[2], 0, &opts).is_err());
        assert!(model.generate(&audio, &[1], &[2], 10, &opts).is_err());
        let s = SampleOptions { temperature: 1.0, top_k: Some(3), seed: 4 };
        assert_eq!(model.generate(&audio, &[1], &[2], 8, &s).unwrap(), model.generate(&audio, &[1], &[2], 8, &s).unwrap());
    }

    #[test]
    fn learns_a_deterministic_class_mapping() {
        // audio token 0 or 1 one-hot selects which fixed code each step gets
        let cfg = GptConfig { steps: 150, batch_size: 8, lr: 5e-3, ..tiny() };
        let examples: Vec<GptExample> = (0..2)
            .map(|cls| {
                let mut audio = Vec::new();
                for _ in 0..4 {
                    audio.extend_from_slice(&[cls as f64, 1.0 - cls as f64, 0.5]);
                }
                GptExample { audio, codes_a: vec![cls + 1; 4], codes_b: vec![3 - cls; 4] }
            })
            .collect();
        let out = train_gpt(&cfg, &examples, 2, |_| {}).unwrap();
        assert_eq!(out.model.accuracy(&examples).unwrap(), 1.0);
        let (a, b) = out.model.generate(&examples[1].audio, &[2], &[2], 3, &SampleOptions::greedy()).unwrap();
        assert_eq!(a, vec![2; 4]);
        assert_eq!(b, vec![2; 4]);
    }

    #[test]
    fn store_roundtrip() {
        let model = GptModel::new(tiny(), &mut rng()).unwrap();
        let back = GptModel::from_store(model.config.clone(), &model.to_store()).unwrap();
        assert_eq!(back.params.names(), model.params.names());
        assert_eq!(back.audio_stats, model.audio_stats);
    }
}
