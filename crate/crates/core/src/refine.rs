//! Audio-driven residual refinement of decoded pattern motion.
//!
//! Each video frame's 28x12 MFCC window goes through a conv/linear audio
//! encoder. The per-frame features, concatenated with the pattern motion's
//! mu and L entries, drive a bidirectional LSTM whose output is squashed to
//! `gain * tanh(.)` residuals on mu and L.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MFCC_CONTEXT, MFCC_DIM};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::motion::{floor_positive_diagonal, CholeskyFactor, MotionSequence, RegionMotionFrame, DIAGONAL_EPS};
use crate::nn::{init_conv2d, init_linear, split_stats, Ctx, FeatureStats};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Conv/pool/linear layout of the per-frame audio encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioEncoderSpec {
    /// Output channels of the five 3x3 convolutions.
    pub channels: [usize; 5],
    /// Linear widths after flattening; the last is the feature size.
    pub hidden: Vec<usize>,
}

impl AudioEncoderSpec {
    pub fn paper() -> Self {
        Self { channels: [64, 128, 256, 256, 512], hidden: vec![2048, 256, 128] }
    }

    pub fn desk() -> Self {
        Self { channels: [4, 8, 8, 8, 16], hidden: vec![64, 32, 32] }
    }

    pub fn out_dim(&self) -> usize {
        *self.hidden.last().unwrap()
    }

    pub fn flatten_dim(&self) -> usize {
        let (h, w) = pooled_hw();
        self.channels[4] * h * w
    }

    /// `(label, shape)` of every intermediate feature for one window.
    pub fn shape_trace(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let (h0, w0) = (MFCC_CONTEXT, MFCC_DIM);
        let (h1, w1) = pool_out(h0, w0, POOL1);
        let (h2, w2) = pool_out(h1, w1, POOL2);
        let mut t = vec![
            ("input".to_string(), vec![1, h0, w0]),
            ("layer-1".into(), vec![c[0], h0, w0]),
            ("layer-2".into(), vec![c[1], h0, w0]),
            ("layer-3".into(), vec![c[1], h1, w1]),
            ("layer-4".into(), vec![c[2], h1, w1]),
            ("layer-5".into(), vec![c[3], h1, w1]),
            ("layer-6".into(), vec![c[4], h1, w1]),
            ("flatten".into(), vec![c[4], h2, w2]),
        ];
        let mut width = self.flatten_dim();
        for (i, &h) in self.hidden.iter().enumerate() {
            t.push((format!("layer-{}", 7 + i), vec![width]));
            width = h;
        }
        t.push(("feature".into(), vec![width]));
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("audio encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// `(kernel, (stride_h, stride_w))` of the two max-pools.
const POOL1: (usize, (usize, usize)) = (3, (1, 2));
const POOL2: (usize, (usize, usize)) = (3, (2, 2));

fn pool_out(h: usize, w: usize, (k, (sh, sw)): (usize, (usize, usize))) -> (usize, usize) {
    ((h - k) / sh + 1, (w - k) / sw + 1)
}

fn pooled_hw() -> (usize, usize) {
    let (h, w) = pool_out(MFCC_CONTEXT, MFCC_DIM, POOL1);
    pool_out(h, w, POOL2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub regions: usize,
    pub encoder: AudioEncoderSpec,
    pub lstm_hidden: usize,
    pub gain_init: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Training crop length in frames.
    pub crop: usize,
}

impl RefineConfig {
    pub fn paper() -> Self {
        Self {
            regions: 20,
            encoder: AudioEncoderSpec::paper(),
            lstm_hidden: 128,
            gain_init: 0.05,
            lr: 1e-4,
            steps: 100_000,
            batch_size: 32,
            crop: 96,
        }
    }

    pub fn desk() -> Self {
        Self { regions: 4, encoder: AudioEncoderSpec::desk(), lr: 2e-3, steps: 500, batch_size: 8, crop: 32, ..Self::paper() }
    }

    pub fn motion_dim(&self) -> usize {
        self.regions * 5
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.regions == 0 || self.lstm_hidden == 0 || self.batch_size == 0 || self.crop == 0 {
            return Err(Error::Config("refinement sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.gain_init.is_finite() {
            return Err(Error::Config("refinement lr must be positive and gain finite".into()));
        }
        Ok(())
    }
}

/// Per-frame residuals: `T x K` mu offsets and `T x K` factor offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTrack {
    pub k: usize,
    pub mu: Vec<[f64; 2]>,
    pub l: Vec<[f64; 3]>,
}

impl ResidualTrack {
    pub fn zeros(k: usize, frames: usize) -> Self {
        Self { k, mu: vec![[0.0; 2]; k * frames], l: vec![[0.0; 3]; k * frames] }
    }

    pub fn len(&self) -> usize {
        self.mu.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// From `[T, 5K]` rows laid out like `MotionSequence::to_rows`.
    pub fn from_rows(k: usize, rows: &[f64]) -> Result<Self> {
        if !rows.len().is_multiple_of(5 * k) {
            return Err(Error::Shape(format!("{} residual values for K = {k}", rows.len())));
        }
        let mut out = Self { k, mu: Vec::new(), l: Vec::new() };
        for r in rows.chunks(5 * k) {
            for j in 0..k {
                out.mu.push([r[2 * j], r[2 * j + 1]]);
                out.l.push([r[2 * k + 3 * j], r[2 * k + 3 * j + 1], r[2 * k + 3 * j + 2]]);
            }
        }
        if !out.is_finite() {
            return Err(Error::Validation("non-finite residual".into()));
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().flatten().chain(self.l.iter().flatten()).all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.mu.iter().flatten().chain(self.l.iter().flatten()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Adds residuals to mu and L and re-floors the factor diagonal.
pub fn compose(pattern: &MotionSequence, residual: &ResidualTrack) -> Result<MotionSequence> {
    if residual.k != pattern.k() || residual.len() != pattern.len() {
        return Err(Error::Shape(format!(
            "residual {}x{} vs motion {}x{}",
            residual.len(),
            residual.k,
            pattern.len(),
            pattern.k()
        )));
    }
    let frames = pattern
        .region_frames()
        .iter()
        .zip(residual.mu.iter().zip(&residual.l))
        .map(|(f, (dm, dl))| {
            let l = f.l.to_array();
            RegionMotionFrame::new(
                [f.mu[0] + dm[0], f.mu[1] + dm[1]],
                floor_positive_diagonal(CholeskyFactor::new(l[0] + dl[0], l[1] + dl[1], l[2] + dl[2])),
            )
        })
        .collect();
    MotionSequence::new(pattern.k(), pattern.fps(), frames)
}

/// Squared Euclidean distance over all mu and L entries.
pub fn residual_loss(gt: &MotionSequence, composed: &MotionSequence) -> Result<f64> {
    if gt.k() != composed.k() || gt.len() != composed.len() {
        return Err(Error::Shape(format!(
            "sequences {}x{} and {}x{}",
            gt.len(),
            gt.k(),
            composed.len(),
            composed.k()
        )));
    }
    Ok(gt
        .region_frames()
        .iter()
        .zip(composed.region_frames())
        .map(|(a, b)| {
            let (la, lb) = (a.l.to_array(), b.l.to_array());
            (a.mu[0] - b.mu[0]).powi(2) + (a.mu[1] - b.mu[1]).powi(2) + (0..3).map(|i| (la[i] - lb[i]).powi(2)).sum::<f64>()
        })
        .sum())
}

/// One training clip: ground truth, decoded pattern motion and the
/// `T x 28 x 12` MFCC windows (row-major).
#[derive(Clone, Debug)]
pub struct RefineExample {
    pub gt: MotionSequence,
    pub pattern: MotionSequence,
    pub mfcc: Vec<f64>,
}

impl RefineExample {
    pub fn new(gt: MotionSequence, pattern: MotionSequence, windows: &[Vec<f64>]) -> Result<Self> {
        if gt.len() != pattern.len() || gt.k() != pattern.k() || windows.len() != gt.len() {
            return Err(Error::Shape(format!(
                "gt {} frames, pattern {}, audio {} windows",
                gt.len(),
                pattern.len(),
                windows.len()
            )));
        }
        let win = MFCC_CONTEXT * MFCC_DIM;
        if let Some(w) = windows.iter().find(|w| w.len() != win) {
            return Err(Error::Shape(format!("mfcc window of {} values, expected {win}", w.len())));
        }
        Ok(Self { gt, pattern, mfcc: windows.concat() })
    }

    fn crop(&self, start: usize, len: usize) -> Result<Self> {
        let win = MFCC_CONTEXT * MFCC_DIM;
        Ok(Self {
            gt: self.gt.slice(start, len)?,
            pattern: self.pattern.slice(start, len)?,
            mfcc: self.mfcc[start * win..(start + len) * win].to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub config: RefineConfig,
    pub params: ParamStore,
    pub mfcc_stats: FeatureStats,
    pub motion_stats: FeatureStats,
}

impl Refiner {
    pub fn new(config: RefineConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let e = &config.encoder;
        let mut cin = 1;
        for (i, &c) in e.channels.iter().enumerate() {
            init_conv2d(&mut p, &format!("enc.conv{i}"), cin, c, 3, rng);
            cin = c;
        }
        let mut din = e.flatten_dim();
        for (i, &h) in e.hidden.iter().enumerate() {
            init_linear(&mut p, &format!("enc.fc{i}"), din, h, true, rng);
            din = h;
        }
        let h = config.lstm_hidden;
        let input = config.motion_dim() + e.out_dim();
        for dir in ["fwd", "bwd"] {
            init_linear(&mut p, &format!("lstm.{dir}.x"), input, 4 * h, true, rng);
            init_linear(&mut p, &format!("lstm.{dir}.h"), h, 4 * h, false, rng);
            // forget gate bias starts open
            let b = p.get_mut(&format!("lstm.{dir}.x.bias"));
            b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        }
        p.insert("out.weight", Tensor::zeros(vec![2 * h, config.motion_dim()]));
        p.insert("out.bias", Tensor::zeros(vec![config.motion_dim()]));
        p.insert("gain", Tensor::new(vec![1], vec![config.gain_init]));
        let (md, ad) = (config.motion_dim(), MFCC_DIM);
        Ok(Self { config, params: p, mfcc_stats: FeatureStats::identity(ad), motion_stats: FeatureStats::identity(md) })
    }

    /// Audio features `[N, F]` for `N` normalized windows given as
    /// `[N, 1, 28, 12]`.
    pub fn encode_audio<'g>(&self, ctx: &Ctx<'g, '_>, windows: Var<'g>) -> Var<'g> {
        let n = windows.shape()[0];
        let mut x = windows;
        for i in 0..5 {
            x = ctx.conv2d(&format!("enc.conv{i}"), x, (1, 1), (1, 1)).relu();
            if i == 1 {
                x = x.max_pool2d((POOL1.0, POOL1.0), POOL1.1);
            }
        }
        x = x.max_pool2d((POOL2.0, POOL2.0), POOL2.1);
        let mut x = x.reshape(vec![n, self.config.encoder.flatten_dim()]);
        for i in 0..self.config.encoder.hidden.len() {
            x = ctx.linear(&format!("enc.fc{i}"), x).relu();
        }
        x
    }

    /// One 28x12 window (raw MFCC) to its feature vector.
    pub fn encode_audio_frame(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != MFCC_CONTEXT * MFCC_DIM {
            return Err(Error::Shape(format!("mfcc window of {} values, expected {}", window.len(), MFCC_CONTEXT * MFCC_DIM)));
        }
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &self.params);
        let x = ctx.constant(Tensor::new(vec![1, 1, MFCC_CONTEXT, MFCC_DIM], self.normalized_mfcc(window)));
        Ok(self.encode_audio(&ctx, x).value().data().to_vec())
    }

    fn normalized_mfcc(&self, windows: &[f64]) -> Vec<f64> {
        let mut v = windows.to_vec();
        self.mfcc_stats.apply(&mut v);
        v
    }

    fn normalized_motion(&self, seq: &MotionSequence) -> Vec<f64> {
        let mut v: Vec<f64> = seq.to_rows().concat();
        self.motion_stats.apply(&mut v);
        v
    }

    /// One LSTM direction over `[B, T, 4H]` precomputed input projections.
    fn lstm_pass<'g>(&self, ctx: &Ctx<'g, '_>, dir: &str, xw: Var<'g>, reverse: bool) -> Vec<Var<'g>> {
        let [b, t, _] = xw.shape()[..] else { unreachable!() };
        let h = self.config.lstm_hidden;
        let mut hs = ctx.constant(Tensor::zeros(vec![b, h]));
        let mut cs = ctx.constant(Tensor::zeros(vec![b, h]));
        let mut out = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for s in order {
            let gates = xw.narrow(1, s, 1).reshape(vec![b, 4 * h]).add(ctx.linear(&format!("lstm.{dir}.h"), hs));
            let gate = |j: usize| gates.narrow(1, j * h, h);
            let (i, f, g, o) = (gate(0).sigmoid(), gate(1).sigmoid(), gate(2).tanh(), gate(3).sigmoid());
            cs = f.mul(cs).add(i.mul(g));
            hs = o.mul(cs.tanh());
            out[s] = Some(hs);
        }
        out.into_iter().map(Option::unwrap).collect()
    }

    /// Hidden states `[B, T, 2H]` of the bidirectional pass over inputs
    /// `[B, T, D]`.
    pub fn bilstm<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        let b = x.shape()[0];
        let h = self.config.lstm_hidden;
        let fwd = self.lstm_pass(ctx, "fwd", ctx.linear("lstm.fwd.x", x), false);
        let bwd = self.lstm_pass(ctx, "bwd", ctx.linear("lstm.bwd.x", x), true);
        let steps: Vec<Var<'g>> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, r)| Var::concat(&[f, r], 1).reshape(vec![b, 1, 2 * h]))
            .collect();
        Var::concat(&steps, 1)
    }

    /// Residual rows `[B, T, 5K]` for normalized motion `[B, T, 5K]` and
    /// normalized MFCC windows `[B*T, 1, 28, 12]`.
    pub fn residuals<'g>(&self, ctx: &Ctx<'g, '_>, motion: Var<'g>, mfcc: Var<'g>) -> Var<'g> {
        let [b, t, _] = motion.shape()[..] else { panic!("motion must be [batch, time, 5K]") };
        let feats = self.encode_audio(ctx, mfcc).reshape(vec![b, t, self.config.encoder.out_dim()]);
        let x = Var::concat(&[motion, feats], 2);
        let hs = self.bilstm(ctx, x);
        let y = ctx.linear("out", hs).tanh();
        y.mul_scalar_var(ctx.p("gain"))
    }

    fn check_pair(&self, pattern: &MotionSequence, mfcc_len: usize) -> Result<()> {
        if pattern.k() != self.config.regions {
            return Err(Error::Shape(format!("motion has {} regions, refiner expects {}", pattern.k(), self.config.regions)));
        }
        let win = MFCC_CONTEXT * MFCC_DIM;
        if mfcc_len != pattern.len() * win {
            return Err(Error::Shape(format!(
                "{} mfcc windows for {} motion frames",
                mfcc_len as f64 / win as f64,
                pattern.len()
            )));
        }
        Ok(())
    }

    /// Residuals for one clip given its MFCC windows (one per frame).
    pub fn predict_residuals(&self, pattern: &MotionSequence, windows: &[Vec<f64>]) -> Result<ResidualTrack> {
        let flat = windows.concat();
        if windows.len() != pattern.len() {
            return Err(Error::Shape(format!("{} mfcc windows for {} motion frames", windows.len(), pattern.len())));
        }
        self.check_pair(pattern, flat.len())?;
        let (t, d) = (pattern.len(), self.config.motion_dim());
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &self.params);
        let motion = ctx.constant(Tensor::new(vec![1, t, d], self.normalized_motion(pattern)));
        let mfcc = ctx.constant(Tensor::new(vec![t, 1, MFCC_CONTEXT, MFCC_DIM], self.normalized_mfcc(&flat)));
        let r = self.residuals(&ctx, motion, mfcc);
        ResidualTrack::from_rows(pattern.k(), r.value().data())
    }

    pub fn refine(&self, pattern: &MotionSequence, windows: &[Vec<f64>]) -> Result<MotionSequence> {
        compose(pattern, &self.predict_residuals(pattern, windows)?)
    }

    /// Differentiable batch loss: summed squared error of the floored
    /// composition, divided by the batch size.
    pub fn batch_loss<'g>(&self, ctx: &Ctx<'g, '_>, batch: &[&RefineExample]) -> Result<Var<'g>> {
        let t = batch[0].gt.len();
        let d = self.config.motion_dim();
        let (mut motion, mut raw, mut mfcc, mut gt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for e in batch {
            if e.gt.len() != t {
                return Err(Error::Shape("batch clips differ in length".into()));
            }
            self.check_pair(&e.pattern, e.mfcc.len())?;
            motion.extend(self.normalized_motion(&e.pattern));
            raw.extend(e.pattern.to_rows().concat());
            mfcc.extend(self.normalized_mfcc(&e.mfcc));
            gt.extend(e.gt.to_rows().concat());
        }
        let b = batch.len();
        let r = self.residuals(
            ctx,
            ctx.constant(Tensor::new(vec![b, t, d], motion)),
            ctx.constant(Tensor::new(vec![b * t, 1, MFCC_CONTEXT, MFCC_DIM], mfcc)),
        );
        let k = self.config.regions;
        let diag: Vec<bool> = (0..d).map(|c| c >= 2 * k && (c - 2 * k) % 3 != 1).collect();
        let composed = r
            .add(ctx.constant(Tensor::new(vec![b, t, d], raw)))
            .reshape(vec![b * t, d])
            .positive_floor_columns(&diag, DIAGONAL_EPS);
        Ok(composed.sub(ctx.constant(Tensor::new(vec![b * t, d], gt))).sum_sq().scale(1.0 / b as f64))
    }

    pub fn to_store(&self) -> ParamStore {
        let mut out = self.params.clone();
        self.mfcc_stats.to_store(&mut out, "stats.mfcc");
        self.motion_stats.to_store(&mut out, "stats.motion");
        out
    }

    pub fn from_store(config: RefineConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let (params, stats) = split_stats(store);
        let mfcc_stats = FeatureStats::from_store(&stats, "stats.mfcc")?;
        let motion_stats = FeatureStats::from_store(&stats, "stats.motion")?;
        if motion_stats.dim() != config.motion_dim() || mfcc_stats.dim() != MFCC_DIM {
            return Err(Error::Checkpoint("refinement stats do not match the config".into()));
        }
        let w = params.try_get("out.weight")?;
        if w.shape() != [2 * config.lstm_hidden, config.motion_dim()] {
            return Err(Error::Checkpoint(format!("out.weight shape {:?} does not match the config", w.shape())));
        }
        params.try_get("gain")?;
        Ok(Self { config, params, mfcc_stats, motion_stats })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefineStep {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct RefineTraining {
    pub model: Refiner,
    pub history: Vec<RefineStep>,
}

pub fn train_refine(
    config: &RefineConfig,
    examples: &[RefineExample],
    seed: u64,
    mut on_step: impl FnMut(&RefineStep),
) -> Result<RefineTraining> {
    config.validate()?;
    let shortest = examples.iter().map(|e| e.gt.len()).min().unwrap_or(0);
    if shortest == 0 {
        return Err(Error::Validation("no refinement training clips".into()));
    }
    let crop = config.crop.min(shortest);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Refiner::new(config.clone(), &mut rng)?;
    model.mfcc_stats = FeatureStats::fit(MFCC_DIM, examples.iter().flat_map(|e| e.mfcc.chunks(MFCC_DIM)));
    let rows: Vec<Vec<f64>> = examples.iter().flat_map(|e| e.pattern.to_rows()).collect();
    model.motion_stats = FeatureStats::fit(config.motion_dim(), rows.iter().map(|r| r.as_slice()));
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
            let e = &examples[order[cursor]];
            let start = rng.random_range(0..=e.gt.len() - crop);
            batch.push(e.crop(start, crop)?);
            cursor += 1;
        }
        let refs: Vec<&RefineExample> = batch.iter().collect();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &model.params, true);
        let loss = model.batch_loss(&ctx, &refs)?;
        let lv = loss.value().item();
        if !lv.is_finite() {
            return Err(Error::Numerical { step, msg: format!("refinement loss {lv}") });
        }
        let grads = g.backward(loss);
        opt.step(&mut model.params, &grads, &names);
        let rec = RefineStep { step, loss: lv };
        on_step(&rec);
        history.push(rec);
    }
    Ok(RefineTraining { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn tiny() -> RefineConfig {
        RefineConfig {
            regions: 2,
            encoder: AudioEncoderSpec { channels: [2, 2, 3, 2, 2], hidden: vec![5, 4] },
            lstm_hidden: 3,
            ..RefineConfig::desk()
        }
    }

    fn motion(t: usize, k: usize, r: &mut ChaCha8Rng) -> MotionSequence {
        let frames = (0..t * k)
            .map(|_| {
                RegionMotionFrame::new(
                    [r.random_range(0.2..0.8), r.random_range(0.2..0.8)],
                    CholeskyFactor::new(r.random_range(0.03..0.08), r.random_range(-0.02..0.02), r.random_range(0.03..0.08)),
                )
            })
            .collect();
        MotionSequence::new(k, 25.0, frames).unwrap()
    }

    fn windows(t: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..MFCC_CONTEXT * MFCC_DIM).map(|_| r.random_range(-3.0..3.0)).collect()).collect()
    }

    #[test]
    fn paper_encoder_shapes() {
        let spec = AudioEncoderSpec::paper();
        let tr = spec.shape_trace();
        let get = |label: &str| tr.iter().find(|(l, _)| l == label).unwrap().1.clone();
        assert_eq!(get("input"), [1, 28, 12]);
        assert_eq!(get("layer-2"), [128, 28, 12]);
        assert_eq!(get("layer-3"), [128, 26, 5]);
        assert_eq!(get("layer-6"), [512, 26, 5]);
        assert_eq!(get("flatten"), [512, 12, 2]);
        assert_eq!(get("layer-7"), [12288]);
        assert_eq!(get("layer-9"), [256]);
        assert_eq!(get("feature"), [128]);
        assert_eq!(spec.flatten_dim(), 12288);
    }

    #[test]
    fn traced_shapes_match_the_graph() {
        let cfg = RefineConfig { encoder: AudioEncoderSpec::desk(), ..tiny() };
        let model = Refiner::new(cfg.clone(), &mut rng()).unwrap();
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &model.params);
        let x = ctx.constant(Tensor::zeros(vec![2, 1, 28, 12]));
        let mut h = ctx.conv2d("enc.conv0", x, (1, 1), (1, 1));
        h = ctx.conv2d("enc.conv1", h, (1, 1), (1, 1));
        assert_eq!(h.shape()[1..], cfg.encoder.shape_trace()[2].1[..]);
        h = h.max_pool2d((3, 3), (1, 2));
        assert_eq!(h.shape()[2..], [26, 5]);
        let out = model.encode_audio(&ctx, x);
        assert_eq!(out.shape(), [2, cfg.encoder.out_dim()]);
    }

    #[test]
    fn zero_network_gives_zero_features_and_identity() {
        let mut r = rng();
        let mut model = Refiner::new(tiny(), &mut r).unwrap();
        crate::nn::zero_all(&mut model.params);
        assert!(model.encode_audio_frame(&vec![0.0; 336]).unwrap().iter().all(|&v| v == 0.0));
        let m = motion(6, 2, &mut r);
        let w = windows(6, &mut r);
        let res = model.predict_residuals(&m, &w).unwrap();
        assert_eq!(res.max_abs(), 0.0);
        assert_eq!(model.refine(&m, &w).unwrap(), m);
        // default init: zero output layer
        let fresh = Refiner::new(tiny(), &mut r).unwrap();
        assert_eq!(fresh.refine(&m, &w).unwrap(), m);
        assert!(model.encode_audio_frame(&[0.0; 10]).is_err());
    }

    #[test]
    fn encoder_is_deterministic() {
        let mut r = rng();
        let model = Refiner::new(tiny(), &mut r).unwrap();
        let w = windows(1, &mut r).pop().unwrap();
        assert_eq!(model.encode_audio_frame(&w).unwrap(), model.encode_audio_frame(&w).unwrap());
    }

    #[test]
    fn residuals_bounded_by_gain() {
        let mut r = rng();
        let mut model = Refiner::new(tiny(), &mut r).unwrap();
        for v in model.params.get_mut("out.weight").data_mut() {
            *v = r.random_range(-50.0..50.0);
        }
        model.params.get_mut("gain").data_mut()[0] = 0.05;
        for _ in 0..5 {
            let m = motion(7, 2, &mut r);
            let res = model.predict_residuals(&m, &windows(7, &mut r)).unwrap();
            assert!(res.max_abs() <= 0.05 + 1e-15);
            assert!(res.max_abs() > 0.0);
            let composed = compose(&m, &res).unwrap();
            composed.validate().unwrap();
        }
    }

    #[test]
    fn backward_direction_is_time_reversed_forward() {
        // forward cell with the backward weights on reversed time must
        // reproduce the backward half
        let mut r = rng();
        let (b, t, d) = (2, 5, 4);
        let mut model = Refiner::new(tiny(), &mut r).unwrap();
        let h = model.config.lstm_hidden;
        for dir in ["fwd", "bwd"] {
            model.params.insert(format!("lstm.{dir}.x.weight"), Tensor::randn(vec![d, 4 * h], 0.5, &mut r));
            model.params.insert(format!("lstm.{dir}.x.bias"), Tensor::randn(vec![4 * h], 0.5, &mut r));
        }
        let mut mirror = model.clone();
        for s in ["x.weight", "x.bias", "h.weight"] {
            let v = model.params.get(&format!("lstm.bwd.{s}")).clone();
            mirror.params.insert(format!("lstm.fwd.{s}"), v);
        }
        let x = Tensor::randn(vec![b, t, d], 1.0, &mut r);
        let mut xr = x.clone();
        for bi in 0..b {
            for s in 0..t {
                for c in 0..d {
                    xr.data_mut()[(bi * t + s) * d + c] = x.data()[(bi * t + (t - 1 - s)) * d + c];
                }
            }
        }
        let g = Graph::new();
        let c1 = Ctx::inference(&g, &model.params);
        let y = model.bilstm(&c1, c1.constant(x)).value();
        let c2 = Ctx::inference(&g, &mirror.params);
        let yr = mirror.bilstm(&c2, c2.constant(xr)).value();
        for bi in 0..b {
            for s in 0..t {
                for j in 0..h {
                    let back = y.data()[(bi * t + s) * 2 * h + h + j];
                    let fwd_rev = yr.data()[(bi * t + (t - 1 - s)) * 2 * h + j];
                    assert!((back - fwd_rev).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn loss_closed_forms() {
        let mut r = rng();
        let gt = motion(9, 2, &mut r);
        assert_eq!(residual_loss(&gt, &gt).unwrap(), 0.0);
        let c = 0.125;
        let mut frames = gt.region_frames().to_vec();
        for t in 0..9 {
            frames[t * 2 + 1].mu[0] += c;
        }
        let shifted = MotionSequence::new(2, 25.0, frames).unwrap();
        assert!((residual_loss(&gt, &shifted).unwrap() - 9.0 * c * c).abs() < 1e-12);
        let other = motion(9, 2, &mut r);
        let direct: f64 = gt
            .to_rows()
            .concat()
            .iter()
            .zip(other.to_rows().concat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!((residual_loss(&gt, &other).unwrap() - direct).abs() < 1e-10);
        assert!(residual_loss(&gt, &motion(8, 2, &mut r)).is_err());
    }

    #[test]
    fn compose_zero_is_identity_and_floors() {
        let mut r = rng();
        let m = motion(4, 2, &mut r);
        assert_eq!(compose(&m, &ResidualTrack::zeros(2, 4)).unwrap(), m);
        let mut res = ResidualTrack::zeros(2, 4);
        res.l[3] = [-1.0, 0.0, -1.0];
        let c = compose(&m, &res).unwrap();
        c.validate().unwrap();
        assert!(compose(&m, &ResidualTrack::zeros(2, 3)).is_err());
    }

    #[test]
    fn batch_loss_matches_residual_loss() {
        let mut r = rng();
        let mut model = Refiner::new(tiny(), &mut r).unwrap();
        for v in model.params.get_mut("out.weight").data_mut() {
            *v = r.random_range(-2.0..2.0);
        }
        let ex: Vec<RefineExample> = (0..2)
            .map(|_| RefineExample::new(motion(5, 2, &mut r), motion(5, 2, &mut r), &windows(5, &mut r)).unwrap())
            .collect();
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &model.params);
        let got = model.batch_loss(&ctx, &ex.iter().collect::<Vec<_>>()).unwrap().value().item();
        let win: Vec<Vec<Vec<f64>>> = ex.iter().map(|e| e.mfcc.chunks(336).map(|c| c.to_vec()).collect()).collect();
        let want: f64 = ex
            .iter()
            .zip(&win)
            .map(|(e, w)| residual_loss(&e.gt, &model.refine(&e.pattern, w).unwrap()).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn refinement_gradients_match_finite_differences() {
        let mut r = rng();
        let mut model = Refiner::new(tiny(), &mut r).unwrap();
        for v in model.params.get_mut("out.weight").data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        // small enough that no diagonal reaches the floor
        model.params.get_mut("gain").data_mut()[0] = 0.02;
        // positive encoder weights and inputs keep every ReLU in its linear
        // regime so finite differences do not straddle a kink
        for name in model.params.names().to_vec() {
            if !name.starts_with("enc.") {
                continue;
            }
            let t = model.params.get_mut(&name);
            let fan_in = match t.shape() {
                [_] => 10.0,
                [cout, ..] if name.contains("conv") => (t.numel() / cout) as f64,
                [din, _] => *din as f64,
                s => panic!("{s:?}"),
            };
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..1.5) / fan_in);
        }
        // ramps keep every max-pool winner clear of its neighbours
        let positive = |r: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..4)
                .map(|_| {
                    let base = r.random_range(0.5..1.5);
                    (0..MFCC_CONTEXT * MFCC_DIM)
                        .map(|i| base + 0.08 * (i / MFCC_DIM) as f64 + 0.1 * (i % MFCC_DIM) as f64 + r.random_range(0.0..0.02))
                        .collect()
                })
                .collect()
        };
        let ex: Vec<RefineExample> = (0..2)
            .map(|_| RefineExample::new(motion(4, 2, &mut r), motion(4, 2, &mut r), &positive(&mut r)).unwrap())
            .collect();
        let refs: Vec<&RefineExample> = ex.iter().collect();
        let m = model.clone();
        let checks = check_param_gradients(&model.params, 24, |g, store, trainable| {
            let ctx = Ctx::new(g, store, trainable);
            m.batch_loss(&ctx, &refs).unwrap()
        });
        for c in &checks {
            assert!(c.relative_error < 1e-4, "{}: {:.3e}", c.name, c.relative_error);
        }
        assert!(checks.iter().any(|c| c.name.starts_with("enc.conv")));
    }

    #[test]
    fn training_reduces_loss_on_audio_driven_offsets() {
        // gt = pattern + 0.02 * (mfcc coefficient sign) on every mu
        let mut r = rng();
        let cfg = RefineConfig { steps: 60, lr: 1e-2, crop: 6, batch_size: 4, ..tiny() };
        let ex: Vec<RefineExample> = (0..6)
            .map(|_| {
                let p = motion(6, 2, &mut r);
                let w = windows(6, &mut r);
                let mut frames = p.region_frames().to_vec();
                for t in 0..6 {
                    let s = if w[t][0] > 0.0 { 0.02 } else { -0.02 };
                    for j in 0..2 {
                        frames[t * 2 + j].mu[0] += s;
                    }
                }
                RefineExample::new(MotionSequence::new(2, 25.0, frames).unwrap(), p, &w).unwrap()
            })
            .collect();
        let out = train_refine(&cfg, &ex, 1, |_| {}).unwrap();
        let base: f64 = ex.iter().map(|e| residual_loss(&e.gt, &e.pattern).unwrap()).sum();
        let after: f64 = ex
            .iter()
            .map(|e| {
                let w: Vec<Vec<f64>> = e.mfcc.chunks(336).map(|c| c.to_vec()).collect();
                residual_loss(&e.gt, &out.model.refine(&e.pattern, &w).unwrap()).unwrap()
            })
            .sum();
        assert!(after < 0.5 * base, "{after} vs {base}");
    }

    #[test]
    fn store_roundtrip() {
        let model = Refiner::new(tiny(), &mut rng()).unwrap();
        let back = Refiner::from_store(tiny(), &model.to_store()).unwrap();
        assert_eq!(back.params.names(), model.params.names());
        assert!(Refiner::from_store(RefineConfig { lstm_hidden: 4, ..tiny() }, &model.to_store()).is_err());
    }
}
