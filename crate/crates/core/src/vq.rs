//! Motion VQ: temporal conv encoders/decoders per motion stream, nearest
//! neighbour codebooks with straight-through gradients, and the quantization
//! ablation modes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::motion::{
    affine_from_covariance, floor_positive_diagonal, integrate, is_spd, CholeskyFactor, Mat2, MotionSequence,
    RegionMotionFrame, RelativeMotionSequence,
};
use crate::nn::{init_conv1d, Ctx};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Temporal downsampling of the encoder (three stride-2 layers).
pub const DOWNSAMPLE: usize = 8;
const ENCODER_LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QuantizationMode {
    AbsMuAbsL,
    RelMuAbsL,
    AbsMuRelL,
    #[default]
    RelMuRelL,
    NaiveMuCA,
}

impl QuantizationMode {
    pub const ALL: [QuantizationMode; 5] = [
        QuantizationMode::AbsMuAbsL,
        QuantizationMode::RelMuAbsL,
        QuantizationMode::AbsMuRelL,
        QuantizationMode::RelMuRelL,
        QuantizationMode::NaiveMuCA,
    ];

    pub fn streams(self) -> &'static [StreamKind] {
        use StreamKind::*;
        match self {
            QuantizationMode::AbsMuAbsL => &[Mu, L],
            QuantizationMode::RelMuAbsL => &[DeltaMu, L],
            QuantizationMode::AbsMuRelL => &[Mu, DeltaL],
            QuantizationMode::RelMuRelL => &[DeltaMu, DeltaL],
            QuantizationMode::NaiveMuCA => &[Mu, Cov, Affine],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantizationMode::AbsMuAbsL => "abs-mu-abs-l",
            QuantizationMode::RelMuAbsL => "rel-mu-abs-l",
            QuantizationMode::AbsMuRelL => "abs-mu-rel-l",
            QuantizationMode::RelMuRelL => "rel-mu-rel-l",
            QuantizationMode::NaiveMuCA => "naive-mu-c-a",
        }
    }
}

impl fmt::Display for QuantizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<QuantizationMode> for String {
    fn from(m: QuantizationMode) -> String {
        m.name().to_string()
    }
}

impl TryFrom<String> for QuantizationMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for QuantizationMode {
    type Err = Error;

    /// Accepts `rel-mu-rel-l` as well as `REL_MU_REL_L`.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Argument(format!("unknown quantization mode {s:?}")))
    }
}

/// One quantized motion component. Channels are laid out region-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamKind {
    Mu,
    DeltaMu,
    L,
    DeltaL,
    Cov,
    Affine,
}

impl StreamKind {
    /// Values per region.
    pub fn width(self) -> usize {
        match self {
            StreamKind::Mu | StreamKind::DeltaMu => 2,
            StreamKind::L | StreamKind::DeltaL => 3,
            StreamKind::Cov | StreamKind::Affine => 4,
        }
    }

    pub fn is_relative(self) -> bool {
        matches!(self, StreamKind::DeltaMu | StreamKind::DeltaL)
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Mu => "mu",
            StreamKind::DeltaMu => "delta_mu",
            StreamKind::L => "l",
            StreamKind::DeltaL => "delta_l",
            StreamKind::Cov => "cov",
            StreamKind::Affine => "affine",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        use StreamKind::*;
        [Mu, DeltaMu, L, DeltaL, Cov, Affine]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown stream {s:?}")))
    }

    /// Per-frame raw values of one region for this stream; relative streams
    /// need the previous frame and read zero at `t = 0`.
    fn region_values(self, cur: &RegionMotionFrame, prev: Option<&RegionMotionFrame>) -> Result<Vec<f64>> {
        Ok(match self {
            StreamKind::Mu => cur.mu.to_vec(),
            StreamKind::L => cur.l.to_array().to_vec(),
            StreamKind::DeltaMu => match prev {
                Some(p) => vec![cur.mu[0] - p.mu[0], cur.mu[1] - p.mu[1]],
                None => vec![0.0; 2],
            },
            StreamKind::DeltaL => match prev {
                Some(p) => {
                    let (a, b) = (cur.l.to_array(), p.l.to_array());
                    vec![a[0] - b[0], a[1] - b[1], a[2] - b[2]]
                }
                None => vec![0.0; 3],
            },
            StreamKind::Cov => {
                let c = cur.covariance();
                vec![c[0][0], c[0][1], c[1][0], c[1][1]]
            }
            StreamKind::Affine => {
                let a = affine_from_covariance(&cur.covariance())?;
                vec![a[0][0], a[0][1], a[1][0], a[1][1]]
            }
        })
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Raw `[channels, T]` track of one stream for a sequence. Relative streams
/// are left-padded with a zero frame so the track keeps length `T`.
pub fn stream_track(seq: &MotionSequence, kind: StreamKind) -> Result<Tensor> {
    let (k, t_len, w) = (seq.k(), seq.len(), kind.width());
    let mut data = vec![0.0; k * w * t_len];
    for t in 0..t_len {
        let cur = seq.frame(t);
        let prev = (t > 0).then(|| seq.frame(t - 1));
        for j in 0..k {
            let vals = kind.region_values(&cur[j], prev.map(|p| &p[j]))?;
            for (c, v) in vals.into_iter().enumerate() {
                data[(j * w + c) * t_len + t] = v;
            }
        }
    }
    Ok(Tensor::new(vec![k * w, t_len], data))
}

/// `M x l` table of code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        let [m, _] = entries.shape() else {
            return Err(Error::Shape(format!("codebook must be 2-D, got {:?}", entries.shape())));
        };
        if *m < 2 {
            return Err(Error::Validation(format!("codebook needs at least 2 entries, got {m}")));
        }
        if !entries.is_finite() {
            return Err(Error::Validation("codebook has non-finite entries".into()));
        }
        let rows: Vec<&[f64]> = entries.rows().collect();
        for i in 0..rows.len() {
            for j in 0..i {
                if rows[i] == rows[j] {
                    return Err(Error::Validation(format!("codebook entries {j} and {i} are identical")));
                }
            }
        }
        Ok(Self { entries })
    }

    /// Entries drawn from `N(0, 1) / sqrt(l)`.
    pub fn random(m: usize, l: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(Tensor::randn(vec![m, l], 1.0 / (l as f64).sqrt(), rng))
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        let l = self.dim();
        &self.entries.data()[i * l..(i + 1) * l]
    }

    /// Index of the Euclidean-nearest entry; ties go to the lowest index.
    pub fn nearest(&self, q: &[f64]) -> usize {
        nearest_row(self.entries.data(), self.dim(), q)
    }

    /// Text table: one line per entry, `index v1 .. vl`.
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.size() {
            out.push_str(&i.to_string());
            for v in self.entry(i) {
                out.push(' ');
                out.push_str(&crate::motion::fmt_real(*v));
            }
            out.push('\n');
        }
        out
    }
}

fn nearest_row(book: &[f64], l: usize, q: &[f64]) -> usize {
    debug_assert_eq!(q.len(), l);
    let mut best = f64::INFINITY;
    let mut best_i = 0;
    for (i, row) in book.chunks_exact(l).enumerate() {
        let d: f64 = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best {
            best = d;
            best_i = i;
        }
    }
    best_i
}

/// Replaces each row of `e` (`[N, l]`) by its nearest entry.
pub fn quantize(e: &Tensor, book: &Codebook) -> (Tensor, Vec<usize>) {
    let l = book.dim();
    assert_eq!(e.last_dim(), l, "latent width does not match codebook");
    let idx: Vec<usize> = e.rows().map(|r| book.nearest(r)).collect();
    let mut out = Vec::with_capacity(e.numel());
    for &i in &idx {
        out.extend_from_slice(book.entry(i));
    }
    (Tensor::new(e.shape().to_vec(), out), idx)
}

/// Codebook perplexity `exp(H)` of a set of code indices.
pub fn perplexity(indices: &[usize], m: usize) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; m];
    indices.iter().for_each(|&i| counts[i] += 1);
    let n = indices.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSequence {
    pub stream: StreamKind,
    pub indices: Vec<usize>,
}

impl CodeSequence {
    pub fn new(stream: StreamKind, indices: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocabulary { index: bad, vocab });
        }
        Ok(Self { stream, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `stream: i0 i1 ...`
    pub fn to_text(&self) -> String {
        let idx: Vec<String> = self.indices.iter().map(|i| i.to_string()).collect();
        format!("{}: {}", self.stream, idx.join(" "))
    }

    pub fn from_text(line: &str) -> Result<Self> {
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse { line: 1, msg: "expected `stream: indices`".into() })?;
        let stream = StreamKind::from_name(name.trim())?;
        let indices = rest
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| Error::Parse { line: 1, msg: format!("{s:?}: {e}") }))
            .collect::<Result<_>>()?;
        Ok(Self { stream, indices })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub mode: QuantizationMode,
    pub regions: usize,
    /// Training window length `T` (a multiple of 8).
    pub window: usize,
    pub window_stride: usize,
    pub hidden: usize,
    /// Code width `l`.
    pub code_dim: usize,
    /// Entries per codebook `M`.
    pub codebook_size: usize,
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Steps an entry may go unused before it is reset.
    pub revive_after: usize,
}

impl VqConfig {
    pub fn paper() -> Self {
        Self {
            mode: QuantizationMode::RelMuRelL,
            regions: 20,
            window: 96,
            window_stride: 32,
            hidden: 512,
            code_dim: 512,
            codebook_size: 512,
            beta: 0.1,
            lr: 3e-5,
            steps: 100_000,
            batch_size: 32,
            revive_after: 256,
        }
    }

    pub fn desk() -> Self {
        Self {
            regions: 4,
            hidden: 64,
            code_dim: 32,
            codebook_size: 32,
            lr: 2e-3,
            steps: 1500,
            batch_size: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window == 0 || !self.window.is_multiple_of(DOWNSAMPLE) {
            return bad(format!("vq window {} must be a positive multiple of {DOWNSAMPLE}", self.window));
        }
        if self.codebook_size < 2 {
            return bad(format!("codebook size {} must be at least 2", self.codebook_size));
        }
        if self.regions == 0 || self.hidden == 0 || self.code_dim == 0 || self.batch_size == 0 {
            return bad("vq sizes must be positive".into());
        }
        if self.window_stride == 0 {
            return bad("vq window stride must be positive".into());
        }
        if !(self.beta >= 0.0) || !(self.lr > 0.0) {
            return bad(format!("invalid beta {} or lr {}", self.beta, self.lr));
        }
        Ok(())
    }
}

/// Per-channel input normalization of one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StreamStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn fit(tracks: &[Tensor]) -> Self {
        let c = tracks[0].shape()[0];
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for t in tracks {
            let len = t.shape()[1];
            n += len;
            for (ch, row) in t.data().chunks(len).enumerate() {
                mean[ch] += row.iter().sum::<f64>();
                sq[ch] += row.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let n = n.max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                let var = (s / n - *m * *m).max(0.0);
                if var > 1e-16 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, track: &Tensor) -> Tensor {
        let len = track.shape()[1];
        let mut out = track.clone();
        for (ch, row) in out.data_mut().chunks_mut(len).enumerate() {
            row.iter_mut().for_each(|v| *v = (*v - self.mean[ch]) / self.std[ch]);
        }
        out
    }

    pub fn denormalize(&self, track: &Tensor) -> Tensor {
        let len = track.last_dim();
        let c = self.mean.len();
        let mut out = track.clone();
        for (i, row) in out.data_mut().chunks_mut(len).enumerate() {
            let ch = i % c;
            row.iter_mut().for_each(|v| *v = *v * self.std[ch] + self.mean[ch]);
        }
        out
    }
}

/// How latents reach the decoder.
#[derive(Clone, Copy, Debug)]
pub enum QuantPath<'a> {
    /// Nearest codebook entries with the straight-through estimator.
    Nearest,
    /// Encoder output fed to the decoder unchanged.
    Bypass,
    /// Caller-supplied indices per stream, flattened batch-major.
    Fixed(&'a [Vec<usize>]),
}

/// Graph outputs of one VQ forward pass.
pub struct VqForward<'g> {
    pub recon: Var<'g>,
    pub codebook: Var<'g>,
    pub commit: Var<'g>,
    /// Per stream, flattened `[batch * T']` code indices.
    pub indices: Vec<Vec<usize>>,
    /// Per stream, `[batch * T', l]` encoder outputs.
    pub latents: Vec<Tensor>,
    /// Per stream, `[batch, channels, T]` reconstructions (normalized units).
    pub outputs: Vec<Var<'g>>,
}

impl<'g> VqForward<'g> {
    pub fn loss(&self, beta: f64) -> Var<'g> {
        self.recon.add(self.codebook).add(self.commit.scale(beta))
    }
}

/// `|x_hat - x|^2 + |sg[e] - e_q|^2 + beta |e - sg[e_q]|^2`.
pub fn vq_loss<'g>(x: Var<'g>, x_hat: Var<'g>, e: Var<'g>, e_q: Var<'g>, beta: f64) -> Var<'g> {
    let recon = x_hat.sub(x).sum_sq();
    let codebook = e.detach().sub(e_q).sum_sq();
    let commit = e.sub(e_q.detach()).sum_sq();
    recon.add(codebook).add(commit.scale(beta))
}

/// `e + sg[e_q - e]`: forward value `e_q`, gradient copied to `e`.
pub fn straight_through<'g>(e: Var<'g>, e_q: Var<'g>) -> Var<'g> {
    e.add(e_q.sub(e).detach())
}

#[derive(Clone, Debug)]
pub struct VqModel {
    pub config: VqConfig,
    pub params: ParamStore,
    pub stats: Vec<StreamStats>,
}

impl VqModel {
    pub fn new(config: VqConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (h, l) = (config.hidden, config.code_dim);
        let mut stats = Vec::new();
        for &s in config.mode.streams() {
            let c = config.regions * s.width();
            init_conv1d(&mut params, &format!("enc.{s}.conv0"), c, h, 3, rng);
            init_conv1d(&mut params, &format!("enc.{s}.conv1"), h, h, 3, rng);
            init_conv1d(&mut params, &format!("enc.{s}.conv2"), h, l, 3, rng);
            init_conv1d(&mut params, &format!("dec.{s}.conv0"), l, h, 3, rng);
            init_conv1d(&mut params, &format!("dec.{s}.conv1"), h, h, 3, rng);
            init_conv1d(&mut params, &format!("dec.{s}.conv2"), h, c, 3, rng);
            let book = Codebook::random(config.codebook_size, l, rng)?;
            params.insert(format!("codebook.{s}"), book.entries);
            stats.push(StreamStats::identity(c));
        }
        Ok(Self { config, params, stats })
    }

    pub fn streams(&self) -> &'static [StreamKind] {
        self.config.mode.streams()
    }

    pub fn channels(&self, s: StreamKind) -> usize {
        self.config.regions * s.width()
    }

    pub fn codebook(&self, s: StreamKind) -> Result<Codebook> {
        Codebook::new(self.params.try_get(&format!("codebook.{s}"))?.clone())
    }

    /// Normalized `[batch, C, T]` inputs per stream.
    pub fn batch_inputs(&self, seqs: &[&MotionSequence]) -> Result<Vec<Tensor>> {
        let t_len = seqs.first().map(|s| s.len()).unwrap_or(0);
        if t_len == 0 || !t_len.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Shape(format!("sequence length {t_len} must be a positive multiple of {DOWNSAMPLE}")));
        }
        let mut out = Vec::new();
        for (si, &s) in self.streams().iter().enumerate() {
            let c = self.channels(s);
            let mut data = Vec::with_capacity(seqs.len() * c * t_len);
            for seq in seqs {
                if seq.len() != t_len || seq.k() != self.config.regions {
                    return Err(Error::Shape(format!(
                        "expected {t_len} frames of {} regions, got {} of {}",
                        self.config.regions,
                        seq.len(),
                        seq.k()
                    )));
                }
                let tr = self.stats[si].normalize(&stream_track(seq, s)?);
                data.extend_from_slice(tr.data());
            }
            out.push(Tensor::new(vec![seqs.len(), c, t_len], data));
        }
        Ok(out)
    }

    /// `[B, C, T] -> [B, l, T / 8]`.
    pub fn encode_stream<'g>(&self, ctx: &Ctx<'g, '_>, s: StreamKind, x: Var<'g>) -> Var<'g> {
        let c = x.shape()[1];
        if c != self.channels(s) {
            panic!("stream {s} expects {} channels, got {c}", self.channels(s));
        }
        let mut h = x;
        for i in 0..ENCODER_LAYERS {
            h = ctx.conv1d(&format!("enc.{s}.conv{i}"), h, 2, 1);
            if i + 1 < ENCODER_LAYERS {
                h = h.relu();
            }
        }
        h
    }

    /// `[B, l, T'] -> [B, C, 8 T']`.
    pub fn decode_stream<'g>(&self, ctx: &Ctx<'g, '_>, s: StreamKind, z: Var<'g>) -> Var<'g> {
        let mut h = z;
        for i in 0..ENCODER_LAYERS {
            h = ctx.conv1d(&format!("dec.{s}.conv{i}"), h.upsample_last(2), 1, 1);
            if i + 1 < ENCODER_LAYERS {
                h = h.relu();
            }
        }
        h
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, inputs: &[Tensor], path: QuantPath<'_>) -> VqForward<'g> {
        let g = ctx.graph;
        let zero = || g.constant(Tensor::scalar(0.0));
        let (mut recon, mut codebook, mut commit) = (zero(), zero(), zero());
        let (mut indices, mut latents, mut outputs) = (Vec::new(), Vec::new(), Vec::new());
        for (si, &s) in self.streams().iter().enumerate() {
            let x = g.constant(inputs[si].clone());
            let e = self.encode_stream(ctx, s, x);
            let [b, l, tq] = e.shape()[..] else { unreachable!() };
            let rows = e.permute(&[0, 2, 1]).reshape(vec![b * tq, l]);
            let z_rows = match path {
                QuantPath::Bypass => {
                    indices.push(Vec::new());
                    rows
                }
                QuantPath::Nearest | QuantPath::Fixed(_) => {
                    let idx = match path {
                        QuantPath::Fixed(all) => all[si].clone(),
                        _ => {
                            let book = self.params.get(&format!("codebook.{s}"));
                            let ev = rows.value();
                            ev.rows().map(|r| nearest_row(book.data(), l, r)).collect()
                        }
                    };
                    let book = ctx.p(&format!("codebook.{s}"));
                    let e_q = book.gather_rows(&idx);
                    codebook = codebook.add(rows.detach().sub(e_q).sum_sq());
                    commit = commit.add(rows.sub(e_q.detach()).sum_sq());
                    indices.push(idx);
                    straight_through(rows, e_q)
                }
            };
            latents.push((*rows.value()).clone());
            let z = z_rows.reshape(vec![b, tq, l]).permute(&[0, 2, 1]);
            let y = self.decode_stream(ctx, s, z);
            recon = recon.add(y.sub(x).sum_sq());
            outputs.push(y);
        }
        VqForward { recon, codebook, commit, indices, latents, outputs }
    }

    /// Per stream `[B, T', l]` latents for sequences of equal length.
    pub fn encode(&self, seqs: &[&MotionSequence]) -> Result<Vec<Tensor>> {
        let inputs = self.batch_inputs(seqs)?;
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &self.params);
        Ok(self
            .streams()
            .iter()
            .zip(&inputs)
            .map(|(&s, x)| {
                let e = self.encode_stream(&ctx, s, g.constant(x.clone()));
                (*e.permute(&[0, 2, 1]).value()).clone()
            })
            .collect())
    }

    /// Code indices per stream for one sequence.
    pub fn codes(&self, seq: &MotionSequence) -> Result<Vec<CodeSequence>> {
        let lat = self.encode(&[seq])?;
        self.streams()
            .iter()
            .zip(lat)
            .map(|(&s, e)| {
                let [_, tq, l] = e.shape()[..] else { unreachable!() };
                let (_, idx) = quantize(&e.reshape(vec![tq, l]), &self.codebook(s)?);
                Ok(CodeSequence { stream: s, indices: idx })
            })
            .collect()
    }

    /// Decodes `[T', l]` latents per stream into raw `[C, 8 T']` tracks.
    pub fn decode_latents(&self, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        if latents.len() != self.streams().len() {
            return Err(Error::Shape(format!("{} latent tracks for {} streams", latents.len(), self.streams().len())));
        }
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &self.params);
        let mut out = Vec::new();
        for (si, (&s, e)) in self.streams().iter().zip(latents).enumerate() {
            let [tq, l] = e.shape()[..] else {
                return Err(Error::Shape(format!("latents must be [T', l], got {:?}", e.shape())));
            };
            if l != self.config.code_dim || tq == 0 {
                return Err(Error::Shape(format!("latent width {l} vs code dim {}", self.config.code_dim)));
            }
            let z = g.constant(e.clone()).reshape(vec![1, tq, l]).permute(&[0, 2, 1]);
            let y = self.decode_stream(&ctx, s, z).value();
            let c = self.channels(s);
            out.push(self.stats[si].denormalize(&(*y).clone().reshape(vec![c, tq * DOWNSAMPLE])));
        }
        Ok(out)
    }

    pub fn decode_codes(&self, codes: &[CodeSequence]) -> Result<Vec<Tensor>> {
        let mut lat = Vec::new();
        for (&s, cs) in self.streams().iter().zip(codes) {
            if cs.stream != s {
                return Err(Error::Shape(format!("expected {s} codes, got {}", cs.stream)));
            }
            let book = self.codebook(s)?;
            if let Some(&bad) = cs.indices.iter().find(|&&i| i >= book.size()) {
                return Err(Error::Vocabulary { index: bad, vocab: book.size() });
            }
            let mut data = Vec::with_capacity(cs.len() * book.dim());
            cs.indices.iter().for_each(|&i| data.extend_from_slice(book.entry(i)));
            lat.push(Tensor::new(vec![cs.len(), book.dim()], data));
        }
        self.decode_latents(&lat)
    }

    /// Decodes quantized `Δμ`/`ΔL` latents (`[T', l]` each) into `8 T' - 1`
    /// differences; the padded first frame is dropped. Only valid in
    /// `RelMuRelL` mode.
    pub fn decode_relative(&self, e_q_mu: &Tensor, e_q_l: &Tensor) -> Result<RelativeMotionSequence> {
        if self.config.mode != QuantizationMode::RelMuRelL {
            return Err(Error::Argument(format!("relative decoding needs rel-mu-rel-l, model is {}", self.config.mode)));
        }
        let tracks = self.decode_latents(&[e_q_mu.clone(), e_q_l.clone()])?;
        Ok(relative_from_tracks(self.config.regions, &tracks[0], &tracks[1]))
    }

    /// Rebuilds a motion sequence from decoded stream tracks starting at `init`.
    pub fn assemble(&self, tracks: &[Tensor], init: &[RegionMotionFrame], fps: f64) -> Result<MotionSequence> {
        let k = self.config.regions;
        if init.len() != k {
            return Err(Error::Shape(format!("init frame has {} regions, model expects {k}", init.len())));
        }
        let streams = self.streams();
        if streams.contains(&StreamKind::Cov) {
            return Err(Error::Argument("naive mode output is not a factor sequence; use decode_naive".into()));
        }
        let t_len = tracks[0].shape()[1];
        let (mu_track, l_track) = (&tracks[0], &tracks[1]);
        let rel = relative_from_tracks(k, mu_track, l_track);
        let base = integrate(init, &rel, fps)?;
        let mut frames = base.region_frames().to_vec();
        for t in 0..t_len {
            for j in 0..k {
                let f = &mut frames[t * k + j];
                if streams[0] == StreamKind::Mu {
                    f.mu = [mu_track.at2(2 * j, t), mu_track.at2(2 * j + 1, t)];
                }
                if streams[1] == StreamKind::L {
                    let l = CholeskyFactor::new(l_track.at2(3 * j, t), l_track.at2(3 * j + 1, t), l_track.at2(3 * j + 2, t));
                    f.l = floor_positive_diagonal(l);
                }
            }
        }
        MotionSequence::new(k, fps, frames)
    }

    pub fn reconstruct(&self, codes: &[CodeSequence], init: &[RegionMotionFrame], fps: f64) -> Result<MotionSequence> {
        self.assemble(&self.decode_codes(codes)?, init, fps)
    }

    /// Decoded covariances `[T][K]` of a naive-mode model (no validity
    /// guarantee).
    pub fn decode_naive(&self, codes: &[CodeSequence]) -> Result<Vec<Vec<Mat2>>> {
        if self.config.mode != QuantizationMode::NaiveMuCA {
            return Err(Error::Argument(format!("naive decoding needs naive-mu-c-a, model is {}", self.config.mode)));
        }
        let tracks = self.decode_codes(codes)?;
        let cov = &tracks[1];
        let t_len = cov.shape()[1];
        Ok((0..t_len)
            .map(|t| {
                (0..self.config.regions)
                    .map(|j| {
                        let v = |c: usize| cov.at2(4 * j + c, t);
                        [[v(0), v(1)], [v(2), v(3)]]
                    })
                    .collect()
            })
            .collect())
    }

    /// Number of decoded region frames and how many of them are not SPD.
    pub fn count_invalid_frames(&self, seq: &MotionSequence) -> Result<(usize, usize)> {
        let codes = self.codes(seq)?;
        if self.config.mode == QuantizationMode::NaiveMuCA {
            let covs = self.decode_naive(&codes)?;
            let total = covs.iter().map(|f| f.len()).sum();
            let bad = covs.iter().flatten().filter(|c| !is_spd(c)).count();
            return Ok((total, bad));
        }
        let rec = self.reconstruct(&codes, seq.frame(0), seq.fps())?;
        let bad = rec.region_frames().iter().filter(|f| !is_spd(&f.covariance())).count();
        Ok((rec.region_frames().len(), bad))
    }

    /// Parameters, normalization stats and codebooks in one store.
    pub fn to_store(&self) -> ParamStore {
        let mut out = self.params.clone();
        for (s, st) in self.streams().iter().zip(&self.stats) {
            let c = st.mean.len();
            out.insert(format!("stats.{s}.mean"), Tensor::new(vec![c], st.mean.clone()));
            out.insert(format!("stats.{s}.std"), Tensor::new(vec![c], st.std.clone()));
        }
        out
    }

    pub fn from_store(config: VqConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (n, t) in store.iter() {
            if !n.starts_with("stats.") {
                params.insert(n, t.clone());
            }
        }
        let mut stats = Vec::new();
        for &s in config.mode.streams() {
            let mean = store.try_get(&format!("stats.{s}.mean"))?.data().to_vec();
            let std = store.try_get(&format!("stats.{s}.std"))?.data().to_vec();
            if mean.len() != config.regions * s.width() {
                return Err(Error::Checkpoint(format!("stats for {s} have {} channels", mean.len())));
            }
            stats.push(StreamStats { mean, std });
            for name in ["enc", "dec"] {
                for i in 0..ENCODER_LAYERS {
                    store.try_get(&format!("{name}.{s}.conv{i}.weight"))?;
                }
            }
            Codebook::new(store.try_get(&format!("codebook.{s}"))?.clone())?;
        }
        Ok(Self { config, params, stats })
    }
}

fn relative_from_tracks(k: usize, mu: &Tensor, l: &Tensor) -> RelativeMotionSequence {
    let t_len = mu.shape()[1];
    let mut rel = RelativeMotionSequence::zeros(k, t_len - 1);
    for t in 1..t_len {
        for j in 0..k {
            rel.d_mu[(t - 1) * k + j] = [mu.at2(2 * j, t), mu.at2(2 * j + 1, t)];
            rel.d_l[(t - 1) * k + j] = [l.at2(3 * j, t), l.at2(3 * j + 1, t), l.at2(3 * j + 2, t)];
        }
    }
    rel
}

/// One logged training step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VqStep {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub revived: usize,
}

#[derive(Clone, Debug)]
pub struct VqTraining {
    pub model: VqModel,
    pub history: Vec<VqStep>,
}

/// Training windows cut from a corpus at the configured length and stride.
pub fn training_windows(config: &VqConfig, corpus: &[MotionSequence]) -> Vec<MotionSequence> {
    corpus.iter().flat_map(|s| s.windows(config.window, config.window_stride)).collect()
}

pub fn train_vq(
    config: &VqConfig,
    corpus: &[MotionSequence],
    seed: u64,
    mut on_step: impl FnMut(&VqStep),
) -> Result<VqTraining> {
    config.validate()?;
    let windows = training_windows(config, corpus);
    if windows.is_empty() {
        return Err(Error::Validation(format!("corpus has no clips of {} frames", config.window)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VqModel::new(config.clone(), &mut rng)?;
    let streams = model.streams();
    let raw: Vec<Vec<Tensor>> = streams
        .iter()
        .map(|&s| windows.iter().map(|w| stream_track(w, s)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    model.stats = raw.iter().map(|tr| StreamStats::fit(tr)).collect();
    let normed: Vec<Vec<Tensor>> = raw
        .iter()
        .zip(&model.stats)
        .map(|(tr, st)| tr.iter().map(|t| st.normalize(t)).collect())
        .collect();
    let trainable: Vec<String> = model.params.names().to_vec();
    let mut opt = Adam::new(config.lr);
    let m = config.codebook_size;
    let mut last_used = vec![vec![0usize; m]; streams.len()];
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(config.steps);
    let per_item = |v: f64| v / config.batch_size as f64;
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let inputs: Vec<Tensor> = normed
            .iter()
            .map(|tr| {
                let shape = tr[0].shape();
                let mut data = Vec::with_capacity(batch.len() * tr[0].numel());
                batch.iter().for_each(|&i| data.extend_from_slice(tr[i].data()));
                Tensor::new(vec![batch.len(), shape[0], shape[1]], data)
            })
            .collect();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &model.params, true);
        let fwd = model.forward(&ctx, &inputs, QuantPath::Nearest);
        let loss = fwd.loss(config.beta).scale(1.0 / config.batch_size as f64);
        let (lv, rv, cv, mv) = (
            loss.value().item(),
            fwd.recon.value().item(),
            fwd.codebook.value().item(),
            fwd.commit.value().item(),
        );
        if !lv.is_finite() {
            return Err(Error::Numerical {
                step,
                msg: format!("vq loss {lv} (recon {rv}, codebook {cv}, commit {mv})"),
            });
        }
        let grads = g.backward(loss);
        opt.step(&mut model.params, &grads, &trainable);
        let mut revived = 0;
        for (si, &s) in streams.iter().enumerate() {
            fwd.indices[si].iter().for_each(|&i| last_used[si][i] = step);
            let l = config.code_dim;
            let lat = &fwd.latents[si];
            let n_rows = lat.shape()[0];
            let book = model.params.get_mut(&format!("codebook.{s}"));
            for (i, used) in last_used[si].iter_mut().enumerate() {
                if step - *used >= config.revive_after {
                    let r = rng.random_range(0..n_rows);
                    book.data_mut()[i * l..(i + 1) * l].copy_from_slice(&lat.data()[r * l..(r + 1) * l]);
                    *used = step;
                    revived += 1;
                }
            }
        }
        let rec = VqStep { step, loss: lv, recon: per_item(rv), codebook: per_item(cv), commit: per_item(mv), revived };
        on_step(&rec);
        history.push(rec);
    }
    Ok(VqTraining { model, history })
}

/// Held-out reconstruction quality of the first (translation) stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VqEval {
    /// Mean squared error of the decoded first-stream track (raw units,
    /// padded frame excluded for relative streams).
    pub mse: f64,
    /// Variance of the ground-truth first-stream values.
    pub variance: f64,
    /// Perplexity per stream.
    pub perplexity: Vec<f64>,
}

pub fn evaluate_vq(model: &VqModel, clips: &[MotionSequence]) -> Result<VqEval> {
    let windows = training_windows(&model.config, clips);
    if windows.is_empty() {
        return Err(Error::Validation("no evaluation windows".into()));
    }
    let first = model.streams()[0];
    let skip = usize::from(first.is_relative());
    let (mut se, mut n, mut sum, mut sq) = (0.0, 0usize, 0.0, 0.0);
    let mut all_idx = vec![Vec::new(); model.streams().len()];
    for w in &windows {
        let codes = model.codes(w)?;
        let dec = model.decode_codes(&codes)?;
        let truth = stream_track(w, first)?;
        let t_len = truth.shape()[1];
        for c in 0..truth.shape()[0] {
            for t in skip..t_len {
                let (a, b) = (truth.at2(c, t), dec[0].at2(c, t));
                se += (a - b) * (a - b);
                sum += a;
                sq += a * a;
                n += 1;
            }
        }
        for (si, cs) in codes.into_iter().enumerate() {
            all_idx[si].extend(cs.indices);
        }
    }
    let nf = n as f64;
    let mean = sum / nf;
    Ok(VqEval {
        mse: se / nf,
        variance: sq / nf - mean * mean,
        perplexity: all_idx.iter().map(|i| perplexity(i, model.config.codebook_size)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::to_relative;
    use crate::nn::zero_all;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn tiny_config() -> VqConfig {
        VqConfig { regions: 2, window: 16, hidden: 5, code_dim: 4, codebook_size: 6, ..VqConfig::desk() }
    }

    fn random_seq(k: usize, t: usize, rng: &mut impl Rng) -> MotionSequence {
        let mut frames = Vec::new();
        let mut state: Vec<RegionMotionFrame> = (0..k)
            .map(|_| {
                RegionMotionFrame::new(
                    [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)],
                    CholeskyFactor::new(rng.random_range(0.05..0.1), rng.random_range(-0.02..0.02), rng.random_range(0.05..0.1)),
                )
            })
            .collect();
        for _ in 0..t {
            for f in &mut state {
                f.mu[0] += rng.random_range(-0.01..0.01);
                f.mu[1] += rng.random_range(-0.01..0.01);
                f.l.l1 = (f.l.l1 + rng.random_range(-0.002..0.002)).max(0.02);
                f.l.l2 += rng.random_range(-0.002..0.002);
                f.l.l3 = (f.l.l3 + rng.random_range(-0.002..0.002)).max(0.02);
            }
            frames.extend(state.iter().copied());
        }
        MotionSequence::new(k, 25.0, frames).unwrap()
    }

    #[test]
    fn nearest_of_two_and_tie_break() {
        let book = Codebook::new(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0])).unwrap();
        assert_eq!(book.nearest(&[0.2, 0.1]), 0);
        assert_eq!(book.nearest(&[0.5, 0.5]), 0);
        assert_eq!(book.nearest(&[0.6, 0.5]), 1);
    }

    #[test]
    fn codebook_rejects_degenerate_tables() {
        assert!(Codebook::new(Tensor::new(vec![1, 2], vec![0.0, 0.0])).is_err());
        assert!(Codebook::new(Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0])).is_err());
        assert!(Codebook::new(Tensor::new(vec![2, 1], vec![f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut r = rng();
        let book = Codebook::random(16, 3, &mut r).unwrap();
        let e = Tensor::randn(vec![200, 3], 0.5, &mut r);
        let (eq, idx) = quantize(&e, &book);
        for (row, (&i, qrow)) in e.rows().zip(idx.iter().zip(eq.rows())) {
            let d: Vec<f64> = (0..16)
                .map(|j| book.entry(j).iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = d.iter().position(|&v| v == min).unwrap();
            assert_eq!(i, first);
            assert_eq!(qrow, book.entry(i));
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("REL_MU_REL_L".parse::<QuantizationMode>().unwrap(), QuantizationMode::RelMuRelL);
        assert_eq!("naive-mu-c-a".parse::<QuantizationMode>().unwrap(), QuantizationMode::NaiveMuCA);
        assert!("mu".parse::<QuantizationMode>().is_err());
        for m in QuantizationMode::ALL {
            assert_eq!(m.name().parse::<QuantizationMode>().unwrap(), m);
        }
    }

    #[test]
    fn encoder_downsamples_by_eight() {
        let cfg = VqConfig { window: 96, ..tiny_config() };
        let model = VqModel::new(cfg, &mut rng()).unwrap();
        let seq = random_seq(2, 96, &mut rng());
        let lat = model.encode(&[&seq]).unwrap();
        assert_eq!(lat[0].shape(), [1, 12, 4]);
        let codes = model.codes(&seq).unwrap();
        assert_eq!(codes[0].len(), 12);
        let dec = model.decode_codes(&codes).unwrap();
        assert_eq!(dec[0].shape(), [4, 96]);
        let rel = model.decode_relative(&Tensor::zeros(vec![12, 4]), &Tensor::zeros(vec![12, 4])).unwrap();
        assert_eq!(rel.len(), 95);
    }

    #[test]
    fn zero_network_gives_zero_latents_and_outputs() {
        let mut model = VqModel::new(tiny_config(), &mut rng()).unwrap();
        zero_all(&mut model.params);
        let seq = MotionSequence::new(2, 25.0, vec![RegionMotionFrame::new([0.5, 0.5], CholeskyFactor::IDENTITY); 32]).unwrap();
        let lat = model.encode(&[&seq]).unwrap();
        assert!(lat.iter().all(|t| t.max_abs() == 0.0));
        let dec = model.decode_latents(&[Tensor::zeros(vec![2, 4]), Tensor::zeros(vec![2, 4])]).unwrap();
        assert!(dec.iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn encoding_is_batch_independent() {
        let model = VqModel::new(tiny_config(), &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let a = random_seq(2, 16, &mut r);
        let b = random_seq(2, 16, &mut r);
        let single = model.encode(&[&a]).unwrap();
        let double = model.encode(&[&a, &b]).unwrap();
        for (s, d) in single.iter().zip(&double) {
            let n = s.numel();
            for (x, y) in s.data().iter().zip(&d.data()[..n]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vq_loss_vanishes_when_everything_matches() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let e = g.constant(Tensor::new(vec![2], vec![0.5, -0.5]));
        assert_eq!(vq_loss(x, x, e, e, 0.1).value().item(), 0.0);
        let z = g.constant(Tensor::zeros(vec![3]));
        let ez = g.constant(Tensor::zeros(vec![2]));
        assert_eq!(vq_loss(z.scale(0.0), z, ez, ez.scale(0.0), 0.1).value().item(), 0.0);
    }

    #[test]
    fn commitment_gradient_is_two_beta_times_gap() {
        let beta = 0.1;
        let ev = Tensor::new(vec![4], vec![0.3, -0.2, 0.8, 0.1]);
        let eqv = Tensor::new(vec![4], vec![0.5, 0.0, 0.7, -0.4]);
        let g = Graph::new();
        let e = g.leaf(ev.clone());
        let e_q = g.constant(eqv.clone());
        let x = g.constant(Tensor::zeros(vec![4]));
        // decoder is the identity on the straight-through latent
        let x_hat = straight_through(e, e_q);
        let loss = vq_loss(x, x_hat, e, e_q, beta);
        let grads = g.backward(loss);
        let ge = grads.get(e).unwrap();
        for i in 0..4 {
            let commit = 2.0 * beta * (ev.data()[i] - eqv.data()[i]);
            let recon = 2.0 * eqv.data()[i];
            assert!((ge.data()[i] - (commit + recon)).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_leaves_codes_unchanged() {
        let model = VqModel::new(tiny_config(), &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let seq = random_seq(2, 16, &mut r);
            let v = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
            assert_eq!(model.codes(&seq).unwrap(), model.codes(&seq.shifted(v)).unwrap());
        }
    }

    #[test]
    fn stream_tracks_follow_relative_differences() {
        let seq = random_seq(2, 16, &mut rng());
        let tr = stream_track(&seq, StreamKind::DeltaMu).unwrap();
        let rel = to_relative(&seq).unwrap();
        assert_eq!(tr.at2(0, 0), 0.0);
        for t in 1..16 {
            assert_eq!(tr.at2(2, t), rel.d_mu[(t - 1) * 2 + 1][0]);
        }
    }

    #[test]
    fn store_roundtrip_preserves_model() {
        let model = VqModel::new(tiny_config(), &mut rng()).unwrap();
        let back = VqModel::from_store(model.config.clone(), &model.to_store()).unwrap();
        assert_eq!(back.params.names(), model.params.names());
        assert_eq!(back.stats, model.stats);
    }

    #[test]
    fn perplexity_counts_effective_entries() {
        assert!((perplexity(&[0, 1, 2, 3], 8) - 4.0).abs() < 1e-12);
        assert!((perplexity(&[5, 5, 5], 8) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn code_sequence_text_roundtrip() {
        let cs = CodeSequence::new(StreamKind::DeltaL, vec![3, 0, 7], 8).unwrap();
        assert_eq!(CodeSequence::from_text(&cs.to_text()).unwrap(), cs);
        assert!(CodeSequence::new(StreamKind::DeltaL, vec![8], 8).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = VqConfig { steps: 40, batch_size: 4, window_stride: 8, ..tiny_config() };
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let corpus: Vec<MotionSequence> = (0..6).map(|_| random_seq(2, 32, &mut r)).collect();
        let a = train_vq(&cfg, &corpus, 1, |_| {}).unwrap();
        let b = train_vq(&cfg, &corpus, 1, |_| {}).unwrap();
        let la: Vec<f64> = a.history.iter().map(|s| s.loss).collect();
        let lb: Vec<f64> = b.history.iter().map(|s| s.loss).collect();
        assert_eq!(la, lb);
        let head: f64 = la[..5].iter().sum();
        let tail: f64 = la[la.len() - 5..].iter().sum();
        assert!(tail < head, "loss did not drop: {head} -> {tail}");
    }
}
