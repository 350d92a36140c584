//! Staged training, generation, evaluation and codebook inspection inside a
//! working directory.
//!
//! Layout under `work_dir`:
//! `corpus/` (clips and `corpus.json`), `checkpoints/{vq,gpt,refine,features}.ckpt`,
//! `runs.jsonl` (one manifest line per stage run) and `.angie.lock` while a
//! stage runs.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::audio::{
    builtin_onset_features, load_feature_file, mfcc, mfcc_windows, onset_envelope, read_mfcc_cache, read_wav, OnsetTrack,
    Waveform, BUILTIN_ONSET_DIM,
};
use crate::checkpoint::Checkpoint;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::gpt::{train_gpt, window_examples, GptExample, GptModel, SampleOptions};
use crate::metrics::{
    beat_consistency, diversity, fgd, train_feature_extractor, DiversityReport, FeatureExtractor, DIVERSITY_PAIRS,
    DIVERSITY_SEEDS,
};
use crate::motion::{read_motion_file, write_motion_file, MotionSequence, RegionMotionFrame};
use crate::refine::{residual_loss, train_refine, RefineExample, Refiner};
use crate::synth::{load_corpus, make_corpus, save_corpus, Corpus, Split, CORPUS_MANIFEST};
use crate::tensor::Tensor;
use crate::vq::{evaluate_vq, train_vq, CodeSequence, VqModel, DOWNSAMPLE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    MakeCorpus,
    Vq,
    Gpt,
    Refine,
    Features,
    Generate,
    Eval,
    InspectCodebook,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::MakeCorpus => "make-corpus",
            Stage::Vq => "vq",
            Stage::Gpt => "gpt",
            Stage::Refine => "refine",
            Stage::Features => "features",
            Stage::Generate => "generate",
            Stage::Eval => "eval",
            Stage::InspectCodebook => "inspect-codebook",
        }
    }

    /// Command that produces this stage's artifact.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Vq => "train-vq",
            Stage::Gpt => "train-gpt",
            Stage::Refine => "train-refine",
            Stage::Features => "eval",
            other => other.name(),
        }
    }
}

/// One line of `runs.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub stage: Stage,
    pub config_digest: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    pub wall_time_s: f64,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Exclusive lock on a working directory, released on drop.
#[derive(Debug)]
pub struct StageLock {
    path: PathBuf,
}

impl StageLock {
    pub fn acquire(dir: &Path, stage: Stage) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".angie.lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Locked(path.clone())
            } else {
                Error::io(&path, e)
            }
        })?;
        writeln!(f, "{} {}", stage.name(), std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub artifact: PathBuf,
    pub metrics: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct GenerateRequest {
    /// Initial frame, one entry per region.
    pub init: Vec<RegionMotionFrame>,
    pub audio: Waveform,
    /// Output frames; defaults to the longest multiple of 8 the audio covers.
    pub frames: Option<usize>,
    /// Precomputed onset features (required when the model's audio width is
    /// not the built-in one).
    pub onset_file: Option<PathBuf>,
    /// Precomputed MFCC windows (`T 28 12` cache format).
    pub mfcc_file: Option<PathBuf>,
    pub refine: bool,
}

#[derive(Clone, Debug)]
pub struct GenerateOutput {
    pub motion: MotionSequence,
    pub pattern: MotionSequence,
    pub codes: Vec<CodeSequence>,
    pub refined: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub fgd: f64,
    pub bc_mean: Option<f64>,
    pub bc_std: Option<f64>,
    pub bc_sequences: usize,
    pub diversity: DiversityReport,
    pub generated: usize,
    pub reference: usize,
    pub config_digest: String,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into());
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut s = String::new();
        s.push_str(&format!("metric=fgd value={:.6} std=n/a\n", self.fgd));
        s.push_str(&format!(
            "metric=beat_consistency value={} std={} sequences={}\n",
            opt(self.bc_mean),
            opt(self.bc_std),
            self.bc_sequences
        ));
        s.push_str(&format!(
            "metric=diversity value={:.6} std={:.6} pairs={DIVERSITY_PAIRS}\n",
            self.diversity.mean, self.diversity.std
        ));
        s.push_str(&format!("generated={} reference={}\n", self.generated, self.reference));
        s.push_str(&format!("config_digest={}\n", self.config_digest));
        s.push_str(&format!("seeds={}\n", seeds.join(",")));
        s
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub root: PathBuf,
    pub force: bool,
    digest: String,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let digest = config.digest()?;
        let root = PathBuf::from(&config.work_dir);
        Ok(Self { config, root, force, digest })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.name()))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("runs.jsonl")
    }

    pub fn lock(&self, stage: Stage) -> Result<StageLock> {
        StageLock::acquire(&self.root, stage)
    }

    fn check_overwrite(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(Error::Exists(path.to_path_buf()));
        }
        Ok(())
    }

    pub fn record(&self, run: &RunManifest) -> Result<()> {
        let path = self.manifest_path();
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(run)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read_manifest(&self) -> Result<Vec<RunManifest>> {
        let path = self.manifest_path();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
            .collect()
    }

    fn finish(
        &self,
        stage: Stage,
        start: Instant,
        inputs: &[&Path],
        outputs: &[&Path],
        metrics: serde_json::Value,
    ) -> Result<()> {
        let digests = |paths: &[&Path]| -> Result<BTreeMap<String, String>> {
            paths.iter().map(|p| Ok((p.display().to_string(), file_digest(p)?))).collect()
        };
        self.record(&RunManifest {
            stage,
            config_digest: self.digest.clone(),
            seed: self.config.seed,
            inputs: digests(inputs)?,
            outputs: digests(outputs)?,
            metrics,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    // ---- corpus ----

    pub fn make_corpus(&self) -> Result<StageReport> {
        let _lock = self.lock(Stage::MakeCorpus)?;
        let start = Instant::now();
        let dir = self.corpus_dir();
        let manifest = dir.join(CORPUS_MANIFEST);
        self.check_overwrite(&manifest)?;
        let corpus = make_corpus(&self.config.corpus, self.config.seed)?;
        save_corpus(&dir, &corpus, self.config.seed)?;
        let metrics = json!({
            "clips": corpus.clips.len(),
            "train": corpus.split(Split::Train).count(),
            "eval": corpus.split(Split::Eval).count(),
        });
        self.finish(Stage::MakeCorpus, start, &[], &[&manifest], metrics.clone())?;
        Ok(StageReport { stage: Stage::MakeCorpus, artifact: dir, metrics })
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let dir = self.corpus_dir();
        if !dir.join(CORPUS_MANIFEST).exists() {
            return Err(Error::Prerequisite(format!("no corpus in {}; run make-corpus first", dir.display())));
        }
        let corpus = load_corpus(&dir)?;
        if corpus.config.regions != self.config.vq.regions {
            return Err(Error::Prerequisite(format!(
                "corpus has {} regions but the config expects {}; rerun make-corpus --force",
                corpus.config.regions, self.config.vq.regions
            )));
        }
        Ok(corpus)
    }

    // ---- checkpoints ----

    fn save_checkpoint(&self, stage: Stage, section: serde_json::Value, extra: serde_json::Value, params: crate::params::ParamStore) -> Result<PathBuf> {
        let path = self.checkpoint_path(stage);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let meta = json!({ "section": section, "seed": self.config.seed, "extra": extra });
        Checkpoint::new(stage.name(), self.digest.clone(), meta, params).save(&path)?;
        Ok(path)
    }

    fn open_checkpoint(&self, stage: Stage, section: serde_json::Value) -> Result<Checkpoint> {
        let path = self.checkpoint_path(stage);
        if !path.exists() {
            return Err(Error::Prerequisite(format!(
                "missing {} checkpoint {}; run {} first",
                stage.name(),
                path.display(),
                stage.command()
            )));
        }
        let ck = Checkpoint::load(&path)?;
        ck.expect_kind(stage.name())?;
        if ck.meta["section"] != section {
            return Err(Error::Prerequisite(format!(
                "{} checkpoint was trained with different settings; rerun {} --force",
                stage.name(),
                stage.command()
            )));
        }
        Ok(ck)
    }

    /// Rejects a checkpoint whose recorded upstream artifact has changed.
    fn check_upstream(&self, ck: &Checkpoint, upstream: Stage) -> Result<()> {
        let recorded = ck.meta["extra"]["upstream"][upstream.name()].as_str().unwrap_or("");
        let current = file_digest(&self.checkpoint_path(upstream))?;
        if recorded != current {
            return Err(Error::Prerequisite(format!(
                "{} checkpoint is stale ({} was retrained); rerun {} --force",
                ck.kind,
                upstream.name(),
                Stage::from_kind(&ck.kind).command()
            )));
        }
        Ok(())
    }

    pub fn load_vq(&self) -> Result<VqModel> {
        let ck = self.open_checkpoint(Stage::Vq, serde_json::to_value(&self.config.vq)?)?;
        VqModel::from_store(self.config.vq.clone(), &ck.params)
    }

    pub fn load_gpt(&self) -> Result<GptModel> {
        let ck = self.open_checkpoint(Stage::Gpt, serde_json::to_value(&self.config.gpt)?)?;
        self.check_upstream(&ck, Stage::Vq)?;
        GptModel::from_store(self.config.gpt.clone(), &ck.params)
    }

    pub fn load_refiner(&self) -> Result<Refiner> {
        let ck = self.open_checkpoint(Stage::Refine, serde_json::to_value(&self.config.refine)?)?;
        self.check_upstream(&ck, Stage::Vq)?;
        Refiner::from_store(self.config.refine.clone(), &ck.params)
    }

    pub fn load_features(&self) -> Result<FeatureExtractor> {
        let ck = self.open_checkpoint(Stage::Features, serde_json::to_value(&self.config.features)?)?;
        FeatureExtractor::from_store(self.config.features.clone(), &ck.params)
    }

    fn upstream(&self, stages: &[Stage]) -> Result<serde_json::Value> {
        let mut m = serde_json::Map::new();
        for &s in stages {
            m.insert(s.name().into(), file_digest(&self.checkpoint_path(s))?.into());
        }
        Ok(json!({ "upstream": m }))
    }

    // ---- audio ----

    /// Per-frame onset features of one clip, from the waveform (built-in
    /// width) or from a feature file.
    pub fn onset_features(&self, audio: &Waveform, frames: usize, file: Option<&Path>) -> Result<OnsetTrack> {
        let dim = self.config.gpt.audio_dim;
        match file {
            Some(path) => {
                let t = load_feature_file(path, Some(dim))?;
                if t.len() < frames {
                    return Err(Error::Validation(format!("{} has {} feature rows, {frames} needed", path.display(), t.len())));
                }
                t.slice(0, frames)
            }
            None if dim == BUILTIN_ONSET_DIM => builtin_onset_features(audio, frames, self.config.corpus.fps),
            None => Err(Error::Prerequisite(format!(
                "the gpt expects {dim}-wide onset features; supply feature files (built-in features are {BUILTIN_ONSET_DIM} wide)"
            ))),
        }
    }

    fn clip_onset(&self, clip_id: &str, audio: &Waveform, frames: usize) -> Result<OnsetTrack> {
        let file = self.corpus_dir().join("clips").join(format!("{clip_id}.onset"));
        let file = (self.config.gpt.audio_dim != BUILTIN_ONSET_DIM).then_some(file);
        self.onset_features(audio, frames, file.as_deref())
    }

    fn mfcc_for(&self, audio: &Waveform, frames: usize, file: Option<&Path>) -> Result<Vec<Vec<f64>>> {
        let windows = match file {
            Some(p) => read_mfcc_cache(p)?,
            None => mfcc_windows(&mfcc(audio)?, frames, self.config.corpus.fps)?,
        };
        if windows.len() < frames {
            return Err(Error::Validation(format!("{} mfcc windows for {frames} frames", windows.len())));
        }
        Ok(windows[..frames].to_vec())
    }

    fn require_two_streams(&self) -> Result<()> {
        if self.config.vq.mode.streams().len() != 2 {
            return Err(Error::Validation(format!(
                "quantization mode {} has {} streams; the gpt needs exactly two",
                self.config.vq.mode,
                self.config.vq.mode.streams().len()
            )));
        }
        Ok(())
    }

    // ---- training stages ----

    pub fn train_vq(&self) -> Result<StageReport> {
        let _lock = self.lock(Stage::Vq)?;
        let start = Instant::now();
        let out_path = self.checkpoint_path(Stage::Vq);
        self.check_overwrite(&out_path)?;
        let corpus = self.load_corpus()?;
        let train = corpus.motions(Split::Train);
        let out = train_vq(&self.config.vq, &train, self.config.seed, |s| {
            if s.step % 100 == 0 {
                log::info!("vq step {} loss {:.5} recon {:.5} revived {}", s.step, s.loss, s.recon, s.revived);
            }
        })?;
        let path = self.save_checkpoint(Stage::Vq, serde_json::to_value(&self.config.vq)?, json!({}), out.model.to_store())?;
        let model = self.load_vq()?;
        let ev = evaluate_vq(&model, &corpus.motions(Split::Eval))?;
        let metrics = json!({
            "final_loss": out.history.last().map(|s| s.loss),
            "eval_mse": ev.mse,
            "eval_variance": ev.variance,
            "eval_mse_ratio": ev.mse / ev.variance,
            "eval_perplexity": ev.perplexity,
        });
        let manifest = self.corpus_dir().join(CORPUS_MANIFEST);
        self.finish(Stage::Vq, start, &[&manifest], &[&path], metrics.clone())?;
        Ok(StageReport { stage: Stage::Vq, artifact: path, metrics })
    }

    /// Windowed next-code examples of one corpus split.
    pub fn gpt_examples(&self, vq: &VqModel, corpus: &Corpus, split: Split) -> Result<Vec<GptExample>> {
        self.require_two_streams()?;
        let stride = (self.config.vq.window_stride / DOWNSAMPLE).max(1);
        let mut out = Vec::new();
        for clip in corpus.split(split) {
            let codes = vq.codes(&clip.motion)?;
            let audio = self.clip_onset(&clip.id, &clip.audio, clip.motion.len())?.pooled(DOWNSAMPLE);
            out.extend(window_examples(&codes[0].indices, &codes[1].indices, &audio, self.config.gpt.context, stride)?);
        }
        Ok(out)
    }

    pub fn train_gpt(&self) -> Result<StageReport> {
        let _lock = self.lock(Stage::Gpt)?;
        let start = Instant::now();
        let out_path = self.checkpoint_path(Stage::Gpt);
        self.check_overwrite(&out_path)?;
        self.require_two_streams()?;
        let vq = self.load_vq()?;
        let corpus = self.load_corpus()?;
        let train = self.gpt_examples(&vq, &corpus, Split::Train)?;
        let eval = self.gpt_examples(&vq, &corpus, Split::Eval)?;
        let out = train_gpt(&self.config.gpt, &train, self.config.seed, |s| {
            if s.step % 50 == 0 {
                log::info!("gpt step {} loss {:.5}", s.step, s.loss);
            }
        })?;
        let upstream = self.upstream(&[Stage::Vq])?;
        let path = self.save_checkpoint(Stage::Gpt, serde_json::to_value(&self.config.gpt)?, upstream, out.model.to_store())?;
        let model = self.load_gpt()?;
        let metrics = json!({
            "final_loss": out.history.last().map(|s| s.loss),
            "train_examples": train.len(),
            "eval_examples": eval.len(),
            "eval_accuracy": if eval.is_empty() { None } else { Some(model.accuracy(&eval)?) },
        });
        self.finish(Stage::Gpt, start, &[&self.checkpoint_path(Stage::Vq)], &[&path], metrics.clone())?;
        Ok(StageReport { stage: Stage::Gpt, artifact: path, metrics })
    }

    /// Ground truth, VQ reconstruction from the clip's own codes, and MFCC
    /// windows for every clip of a split.
    pub fn refine_examples(&self, vq: &VqModel, corpus: &Corpus, split: Split) -> Result<Vec<RefineExample>> {
        corpus
            .split(split)
            .map(|clip| {
                let codes = vq.codes(&clip.motion)?;
                let pattern = vq.reconstruct(&codes, clip.motion.frame(0), clip.motion.fps())?;
                let n = pattern.len().min(clip.motion.len());
                let gt = clip.motion.slice(0, n)?;
                let windows = self.mfcc_for(&clip.audio, n, None)?;
                RefineExample::new(gt, pattern.slice(0, n)?, &windows)
            })
            .collect()
    }

    pub fn train_refine(&self) -> Result<StageReport> {
        let _lock = self.lock(Stage::Refine)?;
        let start = Instant::now();
        let out_path = self.checkpoint_path(Stage::Refine);
        self.check_overwrite(&out_path)?;
        let vq = self.load_vq()?;
        // the gpt must exist: refinement is trained against the full stack
        self.load_gpt()?;
        let corpus = self.load_corpus()?;
        let train = self.refine_examples(&vq, &corpus, Split::Train)?;
        let eval = self.refine_examples(&vq, &corpus, Split::Eval)?;
        let out = train_refine(&self.config.refine, &train, self.config.seed, |s| {
            if s.step % 50 == 0 {
                log::info!("refine step {} loss {:.6}", s.step, s.loss);
            }
        })?;
        let upstream = self.upstream(&[Stage::Vq, Stage::Gpt])?;
        let path = self.save_checkpoint(Stage::Refine, serde_json::to_value(&self.config.refine)?, upstream, out.model.to_store())?;
        let model = self.load_refiner()?;
        let (base, refined) = refinement_errors(&model, &eval)?;
        let metrics = json!({
            "final_loss": out.history.last().map(|s| s.loss),
            "eval_pattern_error": base,
            "eval_refined_error": refined,
            "eval_ratio": if base > 0.0 { Some(refined / base) } else { None },
        });
        let inputs = [self.checkpoint_path(Stage::Vq), self.checkpoint_path(Stage::Gpt)];
        self.finish(Stage::Refine, start, &[&inputs[0], &inputs[1]], &[&path], metrics.clone())?;
        Ok(StageReport { stage: Stage::Refine, artifact: path, metrics })
    }

    /// Trains the evaluation feature extractor on the training split.
    pub fn train_features(&self) -> Result<StageReport> {
        let start = Instant::now();
        let out_path = self.checkpoint_path(Stage::Features);
        self.check_overwrite(&out_path)?;
        let corpus = self.load_corpus()?;
        let model = train_feature_extractor(&self.config.features, &corpus.motions(Split::Train), self.config.seed)?;
        let path = self.save_checkpoint(Stage::Features, serde_json::to_value(&self.config.features)?, json!({}), model.to_store())?;
        let manifest = self.corpus_dir().join(CORPUS_MANIFEST);
        self.finish(Stage::Features, start, &[&manifest], &[&path], json!({}))?;
        Ok(StageReport { stage: Stage::Features, artifact: path, metrics: json!({}) })
    }

    // ---- inference ----

    /// First code of each stream for a motionless clip at `init`.
    pub fn still_codes(&self, vq: &VqModel, init: &[RegionMotionFrame]) -> Result<Vec<usize>> {
        let fps = self.config.corpus.fps;
        let frames: Vec<RegionMotionFrame> = (0..DOWNSAMPLE).flat_map(|_| init.iter().copied()).collect();
        let still = MotionSequence::new(init.len(), fps, frames)?;
        Ok(vq.codes(&still)?.iter().map(|c| c.indices[0]).collect())
    }

    pub fn generate_with(
        &self,
        vq: &VqModel,
        gpt: &GptModel,
        refiner: Option<&Refiner>,
        req: &GenerateRequest,
    ) -> Result<GenerateOutput> {
        self.require_two_streams()?;
        let fps = self.config.corpus.fps;
        if req.init.len() != self.config.vq.regions {
            return Err(Error::Shape(format!("init frame has {} regions, model expects {}", req.init.len(), self.config.vq.regions)));
        }
        for f in &req.init {
            f.validate()?;
        }
        let avail = req.audio.video_frames(fps);
        let max = avail / DOWNSAMPLE * DOWNSAMPLE;
        let frames = req.frames.unwrap_or(max);
        if frames > avail {
            return Err(Error::Argument(format!("audio covers {avail} frames; at most {max} can be generated")));
        }
        if !frames.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Argument(format!("length {frames} is not a multiple of {DOWNSAMPLE} frames")));
        }
        if frames < 2 * DOWNSAMPLE {
            return Err(Error::SequenceTooShort { needed: 2 * DOWNSAMPLE, got: frames });
        }
        let n_codes = frames / DOWNSAMPLE;
        let tokens = self.onset_features(&req.audio, frames, req.onset_file.as_deref())?.pooled(DOWNSAMPLE);
        let seed = self.still_codes(vq, &req.init)?;
        let opts = SampleOptions {
            temperature: self.config.generate.temperature,
            top_k: (self.config.generate.top_k > 0).then_some(self.config.generate.top_k),
            seed: self.config.generate.sample_seed,
        };
        let (a, b) = gpt.generate(tokens.data(), &seed[..1], &seed[1..2], n_codes - 1, &opts)?;
        let streams = vq.streams();
        let codes = vec![CodeSequence::new(streams[0], a, vq.config.codebook_size)?, CodeSequence::new(streams[1], b, vq.config.codebook_size)?];
        let pattern = vq.reconstruct(&codes, &req.init, fps)?.slice(0, frames)?;
        let (motion, refined) = match (refiner, req.refine) {
            (Some(r), true) => (r.refine(&pattern, &self.mfcc_for(&req.audio, frames, req.mfcc_file.as_deref())?)?, true),
            _ => (pattern.clone(), false),
        };
        motion.validate()?;
        Ok(GenerateOutput { motion, pattern, codes, refined })
    }

    /// Loads the checkpoints, generates, and writes `out` (plus
    /// `out.codes`).
    pub fn generate(&self, req: &GenerateRequest, out: &Path) -> Result<GenerateOutput> {
        let _lock = self.lock(Stage::Generate)?;
        let start = Instant::now();
        self.check_overwrite(out)?;
        let vq = self.load_vq()?;
        let gpt = self.load_gpt()?;
        let refiner = if req.refine { Some(self.load_refiner()?) } else { None };
        let result = self.generate_with(&vq, &gpt, refiner.as_ref(), req)?;
        write_motion_file(out, &result.motion)?;
        let codes_path = codes_path(out);
        let text: String = result.codes.iter().map(|c| c.to_text() + "\n").collect();
        std::fs::write(&codes_path, text).map_err(|e| Error::io(&codes_path, e))?;
        let mut inputs = vec![self.checkpoint_path(Stage::Vq), self.checkpoint_path(Stage::Gpt)];
        if req.refine {
            inputs.push(self.checkpoint_path(Stage::Refine));
        }
        let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        let metrics = json!({ "frames": result.motion.len(), "refined": result.refined });
        self.finish(Stage::Generate, start, &refs, &[out, &codes_path], metrics)?;
        Ok(result)
    }

    // ---- evaluation ----

    pub fn eval(&self, generated: &Path, reference: &Path) -> Result<EvalReport> {
        let _lock = self.lock(Stage::Eval)?;
        let start = Instant::now();
        let gen = read_motion_dir(generated)?;
        let refs = read_motion_dir(reference)?;
        if !self.checkpoint_path(Stage::Features).exists() {
            self.train_features()?;
        }
        let fx = self.load_features()?;
        let gen_seqs: Vec<MotionSequence> = gen.iter().map(|(_, s)| s.clone()).collect();
        let ref_seqs: Vec<MotionSequence> = refs.iter().map(|(_, s)| s.clone()).collect();
        let fgd_value = fgd(&fx.features(&ref_seqs)?, &fx.features(&gen_seqs)?)?;
        let mut bcs = Vec::new();
        for (path, seq) in &gen {
            let stem = path.file_stem().unwrap_or_default();
            let wav = [generated, reference].iter().map(|d| d.join(stem).with_extension("wav")).find(|p| p.exists());
            let Some(wav) = wav else { continue };
            let env = onset_envelope(&read_wav(&wav)?)?;
            let dur = seq.len() as f64 / seq.fps();
            let peaks: Vec<f64> = env.peak_times().into_iter().filter(|&t| t < dur).collect();
            if !peaks.is_empty() {
                bcs.push(beat_consistency(&peaks, seq)?);
            }
        }
        let (bc_mean, bc_std) = mean_std(&bcs);
        let div = diversity(&fx.sequence_features(&gen_seqs)?, DIVERSITY_PAIRS, &DIVERSITY_SEEDS)?;
        let report = EvalReport {
            fgd: fgd_value,
            bc_mean,
            bc_std,
            bc_sequences: bcs.len(),
            diversity: div,
            generated: gen.len(),
            reference: refs.len(),
            config_digest: self.digest.clone(),
            seeds: DIVERSITY_SEEDS.to_vec(),
        };
        let feat = self.checkpoint_path(Stage::Features);
        self.finish(Stage::Eval, start, &[&feat], &[], serde_json::to_value(&report)?)?;
        Ok(report)
    }

    /// Decoded tracks of one codebook entry repeated `n_codes` times in
    /// every stream.
    pub fn codebook_tracks(&self, vq: &VqModel, entry: usize, n_codes: usize) -> Result<Vec<Tensor>> {
        if entry >= vq.config.codebook_size {
            return Err(Error::Argument(format!("entry {entry} out of range (M = {})", vq.config.codebook_size)));
        }
        if n_codes == 0 {
            return Err(Error::Argument("need at least one code".into()));
        }
        let codes = vq
            .streams()
            .iter()
            .map(|&s| CodeSequence::new(s, vec![entry; n_codes], vq.config.codebook_size))
            .collect::<Result<Vec<_>>>()?;
        vq.decode_codes(&codes)
    }

    pub fn inspect_codebook(&self, entry: usize, init: &[RegionMotionFrame], n_codes: usize) -> Result<MotionSequence> {
        if self.config.vq.mode.streams().len() != 2 {
            return Err(Error::Validation("codebook inspection needs a two-stream quantization mode".into()));
        }
        let vq = self.load_vq()?;
        let tracks = self.codebook_tracks(&vq, entry, n_codes)?;
        vq.assemble(&tracks, init, self.config.corpus.fps)
    }
}

impl Stage {
    fn from_kind(kind: &str) -> Stage {
        match kind {
            "vq" => Stage::Vq,
            "gpt" => Stage::Gpt,
            "refine" => Stage::Refine,
            _ => Stage::Features,
        }
    }
}

pub fn codes_path(motion_out: &Path) -> PathBuf {
    let mut s = motion_out.as_os_str().to_owned();
    s.push(".codes");
    PathBuf::from(s)
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (Some(m), Some(s))
}

/// Summed pattern-only and refined squared errors over clips.
pub fn refinement_errors(model: &Refiner, examples: &[RefineExample]) -> Result<(f64, f64)> {
    let (mut base, mut refined) = (0.0, 0.0);
    for e in examples {
        let windows: Vec<Vec<f64>> = e.mfcc.chunks(crate::audio::MFCC_CONTEXT * crate::audio::MFCC_DIM).map(<[f64]>::to_vec).collect();
        base += residual_loss(&e.gt, &e.pattern)?;
        refined += residual_loss(&e.gt, &model.refine(&e.pattern, &windows)?)?;
    }
    Ok((base, refined))
}

/// `*.motion` files of a directory (or a single file), sorted by name.
pub fn read_motion_dir(path: &Path) -> Result<Vec<(PathBuf, MotionSequence)>> {
    let files: Vec<PathBuf> = if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "motion"))
            .collect();
        v.sort();
        v
    };
    if files.is_empty() {
        return Err(Error::Validation(format!("no .motion files in {}", path.display())));
    }
    files.into_iter().map(|p| Ok((p.clone(), read_motion_file(&p)?))).collect()
}

/// Deterministic RNG for auxiliary draws tied to the config seed.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let salt = stage.name().bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}
