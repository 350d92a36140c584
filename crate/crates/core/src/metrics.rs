//! Fréchet gesture distance, beat consistency and diversity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::nn::{init_conv1d, init_linear, split_stats, Ctx, FeatureStats};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Gaussian kernel width for beat matching, in seconds.
pub const BC_SIGMA: f64 = 0.1;
/// Minimum prominence of a speed minimum, as a fraction of the speed std.
pub const BEAT_PROMINENCE: f64 = 0.1;
pub const DIVERSITY_PAIRS: usize = 400;
pub const DIVERSITY_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::Shape(format!("mean of dim {d} with covariance {:?}", cov.shape())));
        }
        if (&cov - cov.transpose()).amax() > 1e-8 {
            return Err(Error::Validation("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance of feature rows.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Validation(format!("need at least 2 features, got {n}")));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("features must share a positive dimension".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Square root of a symmetric PSD matrix, clamping negative eigenvalues.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|m1 - m2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, clamped at 0.
///
/// The trace of `(S1 S2)^(1/2)` is taken as the trace of the symmetric
/// `(S1^(1/2) S2 S1^(1/2))^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} and {}", a.dim(), b.dim())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let r = psd_sqrt(&a.cov);
    let inner = psd_sqrt(&(&r * &b.cov * &r));
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * inner.trace();
    Ok(d.max(0.0))
}

/// Mean mu speed over regions per frame (central differences, one-sided at
/// the ends), in units per second.
pub fn mean_speed(motion: &MotionSequence) -> Vec<f64> {
    let (t, k, fps) = (motion.len(), motion.k(), motion.fps());
    if t < 2 {
        return vec![0.0; t];
    }
    (0..t)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(t - 1));
            let span = (b - a) as f64 / fps;
            let (fa, fb) = (motion.frame(a), motion.frame(b));
            fa.iter().zip(fb).map(|(p, q)| ((q.mu[0] - p.mu[0]).powi(2) + (q.mu[1] - p.mu[1]).powi(2)).sqrt() / span).sum::<f64>()
                / k as f64
        })
        .collect()
}

/// Interior strict local minima whose prominence reaches `min_prominence`.
pub fn prominent_minima(x: &[f64], min_prominence: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 1..x.len().saturating_sub(1) {
        if !(x[i] < x[i - 1] && x[i] <= x[i + 1]) {
            continue;
        }
        let side = |range: &mut dyn Iterator<Item = usize>| {
            let mut top = x[i];
            for j in range {
                if x[j] < x[i] {
                    break;
                }
                top = top.max(x[j]);
            }
            top
        };
        let left = side(&mut (0..i).rev());
        let right = side(&mut (i + 1..x.len()));
        if left.min(right) - x[i] >= min_prominence {
            out.push(i);
        }
    }
    out
}

/// Times (seconds) of kinematic beats: prominent minima of the mean speed.
pub fn gesture_beats(motion: &MotionSequence) -> Vec<f64> {
    let s = mean_speed(motion);
    let n = s.len().max(1) as f64;
    let mean = s.iter().sum::<f64>() / n;
    let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // rounding noise on a constant speed must not count as beats
    let floor = 1e-9 * mean.max(f64::MIN_POSITIVE);
    prominent_minima(&s, (BEAT_PROMINENCE * std).max(floor)).into_iter().map(|i| i as f64 / motion.fps()).collect()
}

/// Mean over audio beats of `exp(-dt^2 / (2 sigma^2))`, `dt` being the
/// distance to the closest gesture beat.
pub fn beat_consistency_times(audio_peaks: &[f64], gesture: &[f64], sigma: f64) -> Result<f64> {
    if audio_peaks.is_empty() {
        return Err(Error::Validation("beat consistency needs at least one audio beat".into()));
    }
    if gesture.is_empty() {
        log::warn!("no gesture beats detected; beat consistency is 0");
        return Ok(0.0);
    }
    let total: f64 = audio_peaks
        .iter()
        .map(|&a| {
            let dt = gesture.iter().map(|g| (g - a).abs()).fold(f64::INFINITY, f64::min);
            (-dt * dt / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / audio_peaks.len() as f64)
}

pub fn beat_consistency(audio_peaks: &[f64], motion: &MotionSequence) -> Result<f64> {
    beat_consistency_times(audio_peaks, &gesture_beats(motion), BC_SIGMA)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Mean L1 distance over `pairs` random distinct pairs, for one seed.
pub fn diversity_once(features: &[Vec<f64>], pairs: usize, seed: u64) -> Result<f64> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Validation(format!("diversity needs at least 2 features, got {n}")));
    }
    if pairs == 0 {
        return Err(Error::Argument("diversity needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..pairs)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            l1_distance(&features[i], &features[j])
        })
        .sum();
    Ok(total / pairs as f64)
}

/// Diversity repeated over `seeds`; `std` is the sample standard deviation.
pub fn diversity(features: &[Vec<f64>], pairs: usize, seeds: &[u64]) -> Result<DiversityReport> {
    let per_seed = seeds.iter().map(|&s| diversity_once(features, pairs, s)).collect::<Result<Vec<_>>>()?;
    let m = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / m;
    let std = if per_seed.len() > 1 {
        (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(DiversityReport { per_seed, mean, std })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub regions: usize,
    /// Frames per feature window.
    pub window: usize,
    pub window_stride: usize,
    pub hidden: usize,
    pub dim: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl FeatureConfig {
    pub fn desk() -> Self {
        Self { regions: 4, window: 96, window_stride: 32, hidden: 64, dim: 32, lr: 2e-3, steps: 300, batch_size: 16 }
    }

    pub fn paper() -> Self {
        Self { regions: 20, hidden: 256, steps: 5000, ..Self::desk() }
    }

    pub fn channels(&self) -> usize {
        self.regions * 5
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.hidden == 0 || self.dim == 0 || self.batch_size == 0 || self.window_stride == 0 {
            return Err(Error::Config("feature extractor sizes must be positive".into()));
        }
        if self.window < 4 || !self.window.is_multiple_of(4) {
            return Err(Error::Config(format!("feature window {} must be a positive multiple of 4", self.window)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("feature extractor lr must be positive".into()));
        }
        Ok(())
    }
}

/// Temporal-conv autoencoder; the encoder half (mean-pooled over time) is
/// the feature map.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub config: FeatureConfig,
    pub params: ParamStore,
    pub stats: FeatureStats,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (c, h, d) = (config.channels(), config.hidden, config.dim);
        let mut p = ParamStore::new();
        init_conv1d(&mut p, "enc.conv0", c, h, 3, rng);
        init_conv1d(&mut p, "enc.conv1", h, d, 3, rng);
        init_linear(&mut p, "dec.fc", d, h * (config.window / 4), true, rng);
        init_conv1d(&mut p, "dec.conv0", h, h, 3, rng);
        init_conv1d(&mut p, "dec.conv1", h, c, 3, rng);
        let stats = FeatureStats::identity(c);
        Ok(Self { config, params: p, stats })
    }

    /// Motion rows relative to the window's first-frame mu, so features do
    /// not depend on where the gesture sits in the frame.
    fn window_rows(&self, seq: &MotionSequence) -> Vec<f64> {
        let k = seq.k();
        let origin: Vec<f64> = seq.frame(0).iter().flat_map(|f| f.mu).collect();
        let mut rows = seq.to_rows();
        for r in &mut rows {
            for (v, o) in r[..2 * k].iter_mut().zip(&origin) {
                *v -= o;
            }
        }
        rows.concat()
    }

    /// Normalized batch `[B, C, window]` from windows of exactly `window`
    /// frames.
    fn batch(&self, windows: &[&MotionSequence]) -> Result<Tensor> {
        let (c, w) = (self.config.channels(), self.config.window);
        let mut data = vec![0.0; windows.len() * c * w];
        for (b, seq) in windows.iter().enumerate() {
            if seq.len() != w || seq.k() != self.config.regions {
                return Err(Error::Shape(format!(
                    "feature window must be {w} frames x {} regions, got {} x {}",
                    self.config.regions,
                    seq.len(),
                    seq.k()
                )));
            }
            let mut rows = self.window_rows(seq);
            self.stats.apply(&mut rows);
            for t in 0..w {
                for ch in 0..c {
                    data[(b * c + ch) * w + t] = rows[t * c + ch];
                }
            }
        }
        Ok(Tensor::new(vec![windows.len(), c, w], data))
    }

    /// Pre-pooling encoder output `[B, d, window / 4]`.
    fn encode_var<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Var<'g> {
        let h = ctx.conv1d("enc.conv0", x, 2, 1).relu();
        ctx.conv1d("enc.conv1", h, 2, 1)
    }

    fn decode_var<'g>(&self, ctx: &Ctx<'g, '_>, z: Var<'g>) -> Var<'g> {
        let b = z.shape()[0];
        let (h, t4) = (self.config.hidden, self.config.window / 4);
        let y = ctx.linear("dec.fc", z).relu().reshape(vec![b, h, t4]);
        let y = ctx.conv1d("dec.conv0", y.upsample_last(2), 1, 1).relu();
        ctx.conv1d("dec.conv1", y.upsample_last(2), 1, 1)
    }

    fn pooled<'g>(&self, e: Var<'g>) -> Var<'g> {
        let [b, d, t] = e.shape()[..] else { unreachable!() };
        // mean over time via a constant averaging matrix
        let avg = e.graph().constant(Tensor::full(vec![t, 1], 1.0 / t as f64));
        e.reshape(vec![b * d, t]).matmul(avg).reshape(vec![b, d])
    }

    pub fn reconstruction_loss<'g>(&self, ctx: &Ctx<'g, '_>, windows: &[&MotionSequence]) -> Result<Var<'g>> {
        let x = self.batch(windows)?;
        let n = x.numel() as f64;
        let z = self.pooled(self.encode_var(ctx, ctx.constant(x.clone())));
        let y = self.decode_var(ctx, z);
        Ok(y.sub(ctx.constant(x)).sum_sq().scale(1.0 / n))
    }

    /// Feature of one window of exactly `window` frames.
    pub fn feature(&self, window: &MotionSequence) -> Result<Vec<f64>> {
        let g = Graph::new();
        let ctx = Ctx::inference(&g, &self.params);
        let x = self.batch(&[window])?;
        Ok(self.pooled(self.encode_var(&ctx, ctx.constant(x))).value().data().to_vec())
    }

    /// Features of every `window`-frame window of each sequence.
    pub fn features(&self, seqs: &[MotionSequence]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for s in seqs {
            let ws = s.windows(self.config.window, self.config.window_stride);
            if ws.is_empty() {
                return Err(Error::SequenceTooShort { needed: self.config.window, got: s.len() });
            }
            for w in ws {
                out.push(self.feature(&w)?);
            }
        }
        Ok(out)
    }

    /// Mean feature of each sequence's windows.
    pub fn sequence_features(&self, seqs: &[MotionSequence]) -> Result<Vec<Vec<f64>>> {
        seqs.iter()
            .map(|s| {
                let f = self.features(std::slice::from_ref(s))?;
                let n = f.len() as f64;
                Ok((0..self.config.dim).map(|j| f.iter().map(|r| r[j]).sum::<f64>() / n).collect())
            })
            .collect()
    }

    pub fn to_store(&self) -> ParamStore {
        let mut out = self.params.clone();
        self.stats.to_store(&mut out, "stats.motion");
        out
    }

    pub fn from_store(config: FeatureConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let (params, stats) = split_stats(store);
        let stats = FeatureStats::from_store(&stats, "stats.motion")?;
        if stats.dim() != config.channels() {
            return Err(Error::Checkpoint("feature extractor stats do not match the config".into()));
        }
        let w = params.try_get("enc.conv1.weight")?;
        if w.shape()[0] != config.dim {
            return Err(Error::Checkpoint(format!("feature dim {} vs config {}", w.shape()[0], config.dim)));
        }
        Ok(Self { config, params, stats })
    }
}

pub fn train_feature_extractor(config: &FeatureConfig, corpus: &[MotionSequence], seed: u64) -> Result<FeatureExtractor> {
    config.validate()?;
    let windows: Vec<MotionSequence> =
        corpus.iter().flat_map(|s| s.windows(config.window, config.window_stride)).collect();
    if windows.is_empty() {
        return Err(Error::Validation(format!("no sequence has {} frames for the feature extractor", config.window)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FeatureExtractor::new(config.clone(), &mut rng)?;
    let rows: Vec<f64> = windows.iter().flat_map(|w| model.window_rows(w)).collect();
    model.stats = FeatureStats::fit(config.channels(), rows.chunks(config.channels()));
    let names = model.params.names().to_vec();
    let mut opt = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut cursor = order.len();
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&windows[order[cursor]]);
            cursor += 1;
        }
        let g = Graph::new();
        let ctx = Ctx::new(&g, &model.params, true);
        let loss = model.reconstruction_loss(&ctx, &batch)?;
        let lv = loss.value().item();
        if !lv.is_finite() {
            return Err(Error::Numerical { step, msg: format!("feature autoencoder loss {lv}") });
        }
        let grads = g.backward(loss);
        opt.step(&mut model.params, &grads, &names);
    }
    Ok(model)
}

/// FGD between two sets of feature rows.
pub fn fgd(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::Validation("FGD needs non-empty feature sets".into()));
    }
    frechet_distance(&GaussianStats::fit(real)?, &GaussianStats::fit(generated)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{CholeskyFactor, RegionMotionFrame};
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, shift: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|j| rng.sample::<f64, _>(StandardNormal) + shift[j]).collect()).collect()
    }

    fn seq_from_x(x: &[f64], fps: f64) -> MotionSequence {
        let frames = x
            .iter()
            .map(|&v| vec![RegionMotionFrame::new([0.5 + v, 0.5], CholeskyFactor::new(0.05, 0.0, 0.05))])
            .collect();
        MotionSequence::from_frames(fps, frames).unwrap()
    }

    #[test]
    fn frechet_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let a = GaussianStats::fit(&gaussian(50, d, &[0.0; 4], &mut rng)).unwrap();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
        let eye = |m: Vec<f64>| GaussianStats::new(DVector::from_vec(m), DMatrix::identity(d, d)).unwrap();
        let m = vec![1.0, -2.0, 0.5, 0.0];
        assert!((frechet_distance(&eye(vec![0.0; 4]), &eye(m.clone())).unwrap() - 5.25).abs() < 1e-12);
        // diagonal covariances: sum (sqrt(a) - sqrt(b))^2
        let s1 = GaussianStats::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]))).unwrap();
        let s2 = GaussianStats::new(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0]))).unwrap();
        assert!((frechet_distance(&s1, &s2).unwrap() - 5.0).abs() < 1e-12);
        let b = GaussianStats::fit(&gaussian(60, d, &m, &mut rng)).unwrap();
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9 * ab);
        let three = GaussianStats::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert!(frechet_distance(&a, &three).is_err());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let m = &b * b.transpose();
        let r = psd_sqrt(&m);
        assert!((&r * &r - &m).amax() < 1e-10);
    }

    #[test]
    fn speed_minima_and_prominence() {
        assert_eq!(prominent_minima(&[3.0, 1.0, 3.0, 2.9, 3.0], 0.5), vec![1]);
        assert_eq!(prominent_minima(&[3.0, 1.0, 3.0, 2.9, 3.0], 0.05), vec![1, 3]);
        assert!(prominent_minima(&[1.0; 6], 0.0).is_empty());
    }

    #[test]
    fn coincident_beats_score_one() {
        // x = A cos(2 pi t / 20 frames): speed minima every 10 frames
        let fps = 25.0;
        let x: Vec<f64> = (0..100).map(|t| 0.1 * (2.0 * std::f64::consts::PI * t as f64 / 20.0).cos()).collect();
        let seq = seq_from_x(&x, fps);
        let beats = gesture_beats(&seq);
        let want: Vec<f64> = (1..10).map(|i| i as f64 * 10.0 / fps).collect();
        assert_eq!(beats.len(), want.len());
        for (b, w) in beats.iter().zip(&want) {
            assert!((b - w).abs() < 1e-12);
        }
        assert!((beat_consistency(&want, &seq).unwrap() - 1.0).abs() < 1e-12);
        let late: Vec<f64> = want.iter().map(|t| t + 0.1).collect();
        assert!((beat_consistency(&late, &seq).unwrap() - (-0.5f64).exp()).abs() < 1e-3);
        let later: Vec<f64> = want.iter().map(|t| t + 0.15).collect();
        assert!(beat_consistency(&later, &seq).unwrap() < beat_consistency(&late, &seq).unwrap());
        assert!(beat_consistency(&[], &seq).is_err());
    }

    #[test]
    fn constant_velocity_has_no_beats() {
        let x: Vec<f64> = (0..50).map(|t| 0.002 * t as f64).collect();
        let seq = seq_from_x(&x, 25.0);
        assert!(gesture_beats(&seq).is_empty());
        assert_eq!(beat_consistency(&[0.4, 1.0], &seq).unwrap(), 0.0);
    }

    #[test]
    fn diversity_closed_forms() {
        let same = vec![vec![1.0, 2.0]; 5];
        let r = diversity(&same, 400, &DIVERSITY_SEEDS).unwrap();
        assert!(r.per_seed.iter().all(|&v| v == 0.0));
        let two = vec![vec![0.0, 1.0, 2.0], vec![1.0, -1.0, 2.5]];
        let r = diversity(&two, 37, &DIVERSITY_SEEDS).unwrap();
        assert!(r.per_seed.iter().all(|&v| (v - 3.5).abs() < 1e-12));
        assert!(diversity(&two[..1], 10, &[0]).is_err());
    }

    #[test]
    fn diversity_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = gaussian(30, 6, &[0.0; 6], &mut rng);
        assert_eq!(diversity_once(&f, 100, 9).unwrap(), diversity_once(&f, 100, 9).unwrap());
    }

    #[test]
    fn extractor_trains_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FeatureConfig { regions: 1, window: 16, window_stride: 8, hidden: 8, dim: 4, steps: 40, ..FeatureConfig::desk() };
        let seqs: Vec<MotionSequence> = (0..6)
            .map(|i| {
                let x: Vec<f64> = (0..32).map(|t| 0.05 * ((t as f64) * 0.3 + i as f64).sin() + rng.random_range(-0.01..0.01)).collect();
                seq_from_x(&x, 25.0)
            })
            .collect();
        let model = train_feature_extractor(&cfg, &seqs, 4).unwrap();
        let f = model.features(&seqs).unwrap();
        assert_eq!(f.len(), 6 * 3);
        assert_eq!(f[0].len(), 4);
        assert_eq!(f, model.features(&seqs).unwrap());
        let fx = fgd(&f, &f).unwrap();
        assert!(fx < 1e-9);
        let back = FeatureExtractor::from_store(cfg.clone(), &model.to_store()).unwrap();
        assert_eq!(back.features(&seqs).unwrap(), f);
        assert!(model.features(&[seqs[0].slice(0, 10).unwrap()]).is_err());
        // translation of the whole clip leaves features unchanged
        let moved = seqs[1].shifted([0.125, -0.25]);
        let (a, b) = (model.feature(&seqs[1].slice(0, 16).unwrap()).unwrap(), model.feature(&moved.slice(0, 16).unwrap()).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
