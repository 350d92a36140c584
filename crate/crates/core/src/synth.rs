//! Synthetic gesture corpus: periodic per-class motion templates plus an
//! audio-driven rhythmic jitter, paired with audio whose tone identifies the
//! class and whose noise level follows the jitter envelope.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::motion::{read_motion_file, write_motion_file, CholeskyFactor, MotionSequence, RegionMotionFrame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub regions: usize,
    pub frames: usize,
    pub fps: f64,
    /// Template period in frames.
    pub period: usize,
    pub jitter_scale: f64,
    pub clips_per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { classes: 8, regions: 4, frames: 96, fps: 25.0, period: 16, jitter_scale: 0.02, clips_per_class: 40 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.regions == 0 || self.frames < 2 || self.period == 0 {
            return Err(Error::Config("synthetic corpus sizes must be positive (frames >= 2)".into()));
        }
        if self.clips_per_class < 2 {
            return Err(Error::Config(format!("need at least 2 clips per class, got {}", self.clips_per_class)));
        }
        if !(self.fps > 0.0) || !(self.jitter_scale >= 0.0) {
            return Err(Error::Config("fps must be positive and jitter scale nonnegative".into()));
        }
        Ok(())
    }
}

/// Golden-ratio style fractional hash used to spread class/region phases.
fn frac_hash(i: usize, mult: f64, offset: f64) -> f64 {
    let v = i as f64 * mult + offset;
    v - v.floor()
}

/// Deterministic periodic templates, one per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternLibrary {
    pub classes: usize,
    pub regions: usize,
    pub period: usize,
}

impl PatternLibrary {
    pub fn new(classes: usize, regions: usize, period: usize) -> Self {
        Self { classes, regions, period }
    }

    pub fn from_config(cfg: &SynthConfig) -> Self {
        Self::new(cfg.classes, cfg.regions, cfg.period)
    }

    fn raw(&self, class_id: usize, region: usize, t: usize) -> ([f64; 2], [f64; 3]) {
        let idx = class_id * self.regions + region;
        let w = 2.0 * PI / self.period as f64;
        let ph = |m: f64, o: f64| 2.0 * PI * frac_hash(idx, m, o);
        let ax = 0.05 * (1.0 + 0.4 * ((class_id + 2 * region) as f64).cos());
        let ay = 0.05 * (1.0 + 0.4 * ((2 * class_id + region) as f64 + 1.0).sin());
        let tt = t as f64;
        // second harmonic gives each class a distinct path shape
        let h = 0.35 * (1.0 + (class_id % 3) as f64) / 3.0;
        let mu = [
            ax * ((w * tt + ph(0.618_034, 0.0)).sin() + h * (2.0 * w * tt + ph(0.377, 0.2)).sin()),
            ay * ((w * tt + ph(0.414_214, 0.3)).sin() - h * (2.0 * w * tt + ph(0.733, 0.1)).cos()),
        ];
        let l = [
            0.010 * (w * tt + ph(0.271, 0.5)).sin(),
            0.005 * (w * tt + ph(0.161, 0.7)).sin(),
            0.010 * (w * tt + ph(0.577, 0.9)).sin(),
        ];
        (mu, l)
    }

    /// Offsets of `mu` and of the factor entries from frame 0.
    pub fn offset(&self, class_id: usize, region: usize, t: usize) -> ([f64; 2], [f64; 3]) {
        let (m, l) = self.raw(class_id, region, t);
        let (m0, l0) = self.raw(class_id, region, 0);
        ([m[0] - m0[0], m[1] - m0[1]], [l[0] - l0[0], l[1] - l0[1], l[2] - l0[2]])
    }

    /// Template motion of `frames` frames starting from `init`.
    pub fn template(&self, class_id: usize, init: &[RegionMotionFrame], frames: usize, fps: f64) -> Result<MotionSequence> {
        if class_id >= self.classes {
            return Err(Error::Argument(format!("class {class_id} out of range (P = {})", self.classes)));
        }
        if init.len() != self.regions {
            return Err(Error::Shape(format!("init has {} regions, library has {}", init.len(), self.regions)));
        }
        let mut out = Vec::with_capacity(frames * self.regions);
        for t in 0..frames {
            for (j, f0) in init.iter().enumerate() {
                let (dm, dl) = self.offset(class_id, j, t);
                let l0 = f0.l.to_array();
                out.push(RegionMotionFrame::new(
                    [f0.mu[0] + dm[0], f0.mu[1] + dm[1]],
                    CholeskyFactor::new(l0[0] + dl[0], l0[1] + dl[1], l0[2] + dl[2]),
                ));
            }
        }
        MotionSequence::new(self.regions, fps, out)
    }

    /// Flattened offset track, used for distances between classes.
    pub fn offset_track(&self, class_id: usize, frames: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(frames * self.regions * 5);
        for t in 0..frames {
            for j in 0..self.regions {
                let (m, l) = self.offset(class_id, j, t);
                v.extend_from_slice(&m);
                v.extend_from_slice(&l);
            }
        }
        v
    }

    /// Nearest template by the offset track of `seq` (position-independent).
    pub fn classify(&self, seq: &MotionSequence) -> usize {
        let f0 = seq.frame(0).to_vec();
        let mut obs = Vec::with_capacity(seq.len() * seq.k() * 5);
        for t in 0..seq.len() {
            for (f, b) in seq.frame(t).iter().zip(&f0) {
                obs.extend_from_slice(&[f.mu[0] - b.mu[0], f.mu[1] - b.mu[1]]);
                let (a, c) = (f.l.to_array(), b.l.to_array());
                obs.extend_from_slice(&[a[0] - c[0], a[1] - c[1], a[2] - c[2]]);
            }
        }
        (0..self.classes)
            .map(|p| {
                let d: f64 = self.offset_track(p, seq.len()).iter().zip(&obs).map(|(a, b)| (a - b) * (a - b)).sum();
                (p, d)
            })
            .fold((0, f64::INFINITY), |best, (p, d)| if d < best.1 { (p, d) } else { best })
            .0
    }

    /// Tone frequency identifying each class.
    pub fn class_tone(&self, class_id: usize) -> f64 {
        220.0 * 2f64.powf(class_id as f64 / 2.0)
    }
}

/// Smooth random envelope in `[0, 1]`, sampled at arbitrary times.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    parts: Vec<(f64, f64, f64)>,
}

impl Envelope {
    pub fn random(rng: &mut impl Rng) -> Self {
        let parts = (0..3)
            .map(|_| (rng.random_range(0.5..1.0), rng.random_range(0.3..1.5), rng.random_range(0.0..2.0 * PI)))
            .collect();
        Self { parts }
    }

    pub fn at(&self, seconds: f64) -> f64 {
        let total: f64 = self.parts.iter().map(|p| p.0).sum();
        let s: f64 = self.parts.iter().map(|(a, f, ph)| a * (2.0 * PI * f * seconds + ph).sin()).sum();
        0.5 + 0.5 * s / total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub class_id: usize,
    pub seed: u64,
    pub motion: MotionSequence,
    pub audio: Waveform,
    /// Envelope value per video frame.
    pub envelope: Vec<f64>,
    /// Jitter displacement per frame and region (`T * K`).
    pub jitter: Vec<[f64; 2]>,
}

/// Unit direction along which region `k` jitters.
pub fn jitter_direction(k: usize) -> [f64; 2] {
    let a = PI / 4.0 + k as f64 * PI / 2.0;
    [a.cos(), a.sin()]
}

pub fn make_clip(cfg: &SynthConfig, class_id: usize, seed: u64, jitter_scale: f64) -> Result<SynthClip> {
    cfg.validate()?;
    let lib = PatternLibrary::from_config(cfg);
    if class_id >= cfg.classes {
        return Err(Error::Argument(format!("class {class_id} out of range (P = {})", cfg.classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ class_id as u64);
    let init: Vec<RegionMotionFrame> = (0..cfg.regions)
        .map(|_| {
            RegionMotionFrame::new(
                [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
                CholeskyFactor::new(rng.random_range(0.04..0.07), rng.random_range(-0.01..0.01), rng.random_range(0.04..0.07)),
            )
        })
        .collect();
    let env = Envelope::random(&mut rng);
    let template = lib.template(class_id, &init, cfg.frames, cfg.fps)?;
    let envelope: Vec<f64> = (0..cfg.frames).map(|t| env.at(t as f64 / cfg.fps)).collect();
    let mut frames = template.region_frames().to_vec();
    let mut jitter = Vec::with_capacity(frames.len());
    for t in 0..cfg.frames {
        for j in 0..cfg.regions {
            let d = jitter_direction(j);
            let amp = jitter_scale * envelope[t];
            let jv = [amp * d[0], amp * d[1]];
            let f = &mut frames[t * cfg.regions + j];
            f.mu[0] += jv[0];
            f.mu[1] += jv[1];
            jitter.push(jv);
        }
    }
    let motion = MotionSequence::new(cfg.regions, cfg.fps, frames)?;
    let invalid = motion.region_frames().iter().filter(|f| f.validate().is_err()).count();
    if invalid * 100 > motion.region_frames().len() {
        log::warn!("class {class_id} seed {seed}: {invalid} invalid frames before projection");
    }
    let n = (cfg.frames as f64 / cfg.fps * SAMPLE_RATE as f64).round() as usize;
    let tone = lib.class_tone(class_id);
    let samples = (0..n)
        .map(|i| {
            let s = i as f64 / SAMPLE_RATE as f64;
            let noise: f64 = rng.sample(StandardNormal);
            0.3 * (2.0 * PI * tone * s).sin() + 0.15 * env.at(s) * noise
        })
        .collect();
    let audio = Waveform::new(samples, SAMPLE_RATE)?;
    Ok(SynthClip { class_id, seed, motion, audio, envelope, jitter })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusClip {
    pub id: String,
    pub class_id: usize,
    pub seed: u64,
    pub split: Split,
    pub motion: MotionSequence,
    pub audio: Waveform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: SynthConfig,
    pub clips: Vec<CorpusClip>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn motions(&self, split: Split) -> Vec<MotionSequence> {
        self.split(split).map(|c| c.motion.clone()).collect()
    }
}

/// Clips held out per class: a tenth, at least one.
pub fn eval_per_class(clips_per_class: usize) -> usize {
    ((clips_per_class as f64 * 0.1).round() as usize).clamp(1, clips_per_class - 1)
}

pub fn make_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_eval = eval_per_class(cfg.clips_per_class);
    let mut clips = Vec::with_capacity(cfg.classes * cfg.clips_per_class);
    for p in 0..cfg.classes {
        let mut order: Vec<usize> = (0..cfg.clips_per_class).collect();
        order.shuffle(&mut rng);
        let seeds: Vec<u64> = (0..cfg.clips_per_class).map(|_| rng.random()).collect();
        for (i, &s) in seeds.iter().enumerate() {
            let clip = make_clip(cfg, p, s, cfg.jitter_scale)?;
            let split = if order[i] < n_eval { Split::Eval } else { Split::Train };
            clips.push(CorpusClip {
                id: format!("c{p}_{i:04}"),
                class_id: p,
                seed: s,
                split,
                motion: clip.motion,
                audio: clip.audio,
            });
        }
    }
    Ok(Corpus { config: cfg.clone(), clips })
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    class_id: usize,
    seed: u64,
    split: Split,
    motion: String,
    audio: String,
}

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    config: SynthConfig,
    corpus_seed: u64,
    clips: Vec<ManifestEntry>,
}

pub const CORPUS_MANIFEST: &str = "corpus.json";

/// Writes motion files, 16-bit WAVs and a JSON manifest into `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus, corpus_seed: u64) -> Result<()> {
    let clip_dir = dir.join("clips");
    std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let mut entries = Vec::new();
    for c in &corpus.clips {
        let motion = format!("clips/{}.motion", c.id);
        let audio = format!("clips/{}.wav", c.id);
        write_motion_file(&dir.join(&motion), &c.motion)?;
        write_wav(&dir.join(&audio), &c.audio)?;
        entries.push(ManifestEntry { id: c.id.clone(), class_id: c.class_id, seed: c.seed, split: c.split, motion, audio });
    }
    let manifest = CorpusManifest { config: corpus.config.clone(), corpus_seed, clips: entries };
    let path = dir.join(CORPUS_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path: PathBuf = dir.join(CORPUS_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for e in manifest.clips {
        clips.push(CorpusClip {
            motion: read_motion_file(&dir.join(&e.motion))?,
            audio: read_wav(&dir.join(&e.audio))?,
            id: e.id,
            class_id: e.class_id,
            seed: e.seed,
            split: e.split,
        });
    }
    Ok(Corpus { config: manifest.config, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { clips_per_class: 10, ..SynthConfig::default() }
    }

    #[test]
    fn zero_jitter_gives_template() {
        let cfg = small();
        let clip = make_clip(&cfg, 3, 17, 0.0).unwrap();
        let lib = PatternLibrary::from_config(&cfg);
        let tpl = lib.template(3, clip.motion.frame(0), cfg.frames, cfg.fps).unwrap();
        assert_eq!(clip.motion, tpl);
    }

    #[test]
    fn clips_are_reproducible_and_valid() {
        let cfg = small();
        let a = make_clip(&cfg, 5, 99, cfg.jitter_scale).unwrap();
        let b = make_clip(&cfg, 5, 99, cfg.jitter_scale).unwrap();
        assert_eq!(a, b);
        a.motion.validate().unwrap();
        assert_eq!(a.motion.len(), 96);
        assert_eq!(a.audio.video_frames(25.0), 96);
    }

    #[test]
    fn jitter_magnitude_tracks_envelope() {
        let cfg = small();
        let clip = make_clip(&cfg, 1, 4, 0.03).unwrap();
        let mag: Vec<f64> = clip.jitter.chunks(cfg.regions).map(|f| (f[0][0].powi(2) + f[0][1].powi(2)).sqrt()).collect();
        let r = pearson(&mag, &clip.envelope);
        assert!(r >= 0.9, "correlation {r}");
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn templates_are_well_separated() {
        let cfg = SynthConfig::default();
        let lib = PatternLibrary::from_config(&cfg);
        let tracks: Vec<Vec<f64>> = (0..cfg.classes).map(|p| lib.offset_track(p, cfg.frames)).collect();
        for i in 0..cfg.classes {
            for j in 0..i {
                let d: f64 = tracks[i].iter().zip(&tracks[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d > 10.0 * cfg.jitter_scale, "classes {i},{j} at distance {d}");
            }
        }
    }

    #[test]
    fn nearest_template_classifies_clean_clips() {
        let cfg = small();
        let lib = PatternLibrary::from_config(&cfg);
        for p in 0..cfg.classes {
            for s in 0..3 {
                let clip = make_clip(&cfg, p, s, 0.0).unwrap();
                assert_eq!(lib.classify(&clip.motion), p);
            }
        }
    }

    #[test]
    fn corpus_split_is_exact_disjoint_and_balanced() {
        let cfg = SynthConfig { clips_per_class: 10, classes: 3, ..SynthConfig::default() };
        let c = make_corpus(&cfg, 1).unwrap();
        assert_eq!(c.clips.len(), 30);
        assert_eq!(c.split(Split::Eval).count(), 3);
        assert_eq!(c.split(Split::Train).count(), 27);
        for p in 0..3 {
            assert_eq!(c.split(Split::Eval).filter(|x| x.class_id == p).count(), 1);
            assert_eq!(c.split(Split::Train).filter(|x| x.class_id == p).count(), 9);
        }
        let again = make_corpus(&cfg, 1).unwrap();
        let ids = |c: &Corpus| c.split(Split::Eval).map(|x| x.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&c), ids(&again));
        assert!(make_corpus(&SynthConfig { clips_per_class: 1, ..cfg }, 1).is_err());
    }

    #[test]
    fn corpus_persists() {
        let cfg = SynthConfig { clips_per_class: 2, classes: 2, ..SynthConfig::default() };
        let c = make_corpus(&cfg, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &c, 8).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.clips.len(), 4);
        for (a, b) in c.clips.iter().zip(&back.clips) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.split, b.split);
            assert_eq!(a.motion, b.motion);
        }
    }
}
