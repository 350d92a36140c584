use std::path::Path;

use angie::config::{PipelineConfig, Preset};
use angie::pipeline::{codes_path, GenerateRequest, Pipeline, Stage, StageLock};
use angie::synth::Split;
use angie::vq::QuantizationMode;
use angie::Error;

fn tiny(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::preset(Preset::Desk);
    c.work_dir = dir.display().to_string();
    c.seed = 11;
    c.corpus.classes = 2;
    c.corpus.clips_per_class = 5;
    c.vq.steps = 6;
    c.gpt.steps = 3;
    c.gpt.layers = 1;
    c.gpt.channels = 32;
    c.refine.steps = 2;
    c.features.steps = 2;
    c
}

fn request(p: &Pipeline, refine: bool, index: usize) -> (String, GenerateRequest) {
    let corpus = p.load_corpus().unwrap();
    let clip = corpus.split(Split::Eval).nth(index).unwrap();
    let req = GenerateRequest {
        init: clip.motion.frame(0).to_vec(),
        audio: clip.audio.clone(),
        frames: Some(96),
        onset_file: None,
        mfcc_file: None,
        refine,
    };
    (clip.id.clone(), req)
}

#[test]
fn stages_run_in_order_and_record_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(tmp.path()), false).unwrap();

    assert!(matches!(p.train_vq(), Err(Error::Prerequisite(_))));
    p.make_corpus().unwrap();
    assert!(matches!(p.make_corpus(), Err(Error::Exists(_))));
    assert!(matches!(p.train_gpt(), Err(Error::Prerequisite(m)) if m.contains("train-vq")));
    p.train_vq().unwrap();
    assert!(matches!(p.train_vq(), Err(Error::Exists(_))));
    assert!(matches!(p.train_refine(), Err(Error::Prerequisite(m)) if m.contains("train-gpt")));
    let gpt = p.train_gpt().unwrap();
    assert!(gpt.metrics["eval_accuracy"].as_f64().is_some());
    let refine = p.train_refine().unwrap();
    assert!(refine.metrics["eval_ratio"].as_f64().unwrap().is_finite());

    let gen_dir = tmp.path().join("gen");
    std::fs::create_dir_all(&gen_dir).unwrap();
    for index in 0..2 {
        let (id, req) = request(&p, true, index);
        let out = gen_dir.join(format!("{id}.motion"));
        let g = p.generate(&req, &out).unwrap();
        assert_eq!(g.motion.len(), 96);
        assert!(g.refined);
        assert!(codes_path(&out).exists());
        assert!(matches!(p.generate(&req, &out), Err(Error::Exists(_))));
    }

    let report = p.eval(&gen_dir, &p.corpus_dir().join("clips")).unwrap();
    assert!(report.fgd.is_finite() && report.fgd >= 0.0);
    assert_eq!(report.generated, 2);
    assert_eq!(report.bc_sequences, 2);
    assert!(report.to_text().contains(&format!("config_digest={}", p.digest())));

    let stages: Vec<Stage> = p.read_manifest().unwrap().iter().map(|r| r.stage).collect();
    assert_eq!(
        stages,
        [Stage::MakeCorpus, Stage::Vq, Stage::Gpt, Stage::Refine, Stage::Generate, Stage::Generate, Stage::Features, Stage::Eval]
    );
    assert!(!tmp.path().join(".angie.lock").exists());

    // retraining the vq makes downstream checkpoints stale
    let forced = Pipeline::new(tiny(tmp.path()), true).unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.vq.steps = 7;
    Pipeline::new(cfg.clone(), true).unwrap().train_vq().unwrap();
    assert!(matches!(forced.load_vq(), Err(Error::Prerequisite(m)) if m.contains("different settings")));
    assert!(matches!(Pipeline::new(cfg, false).unwrap().load_gpt(), Err(Error::Prerequisite(m)) if m.contains("stale")));
}

#[test]
fn generation_length_is_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(tmp.path()), false).unwrap();
    p.make_corpus().unwrap();
    p.train_vq().unwrap();
    p.train_gpt().unwrap();
    let vq = p.load_vq().unwrap();
    let gpt = p.load_gpt().unwrap();
    let (_, mut req) = request(&p, false, 0);
    req.frames = Some(44);
    assert!(matches!(p.generate_with(&vq, &gpt, None, &req), Err(Error::Argument(_))));
    req.frames = Some(800);
    assert!(matches!(p.generate_with(&vq, &gpt, None, &req), Err(Error::Argument(m)) if m.contains("at most 96")));
    req.frames = Some(8);
    assert!(matches!(p.generate_with(&vq, &gpt, None, &req), Err(Error::SequenceTooShort { .. })));
    req.frames = None;
    let out = p.generate_with(&vq, &gpt, None, &req).unwrap();
    assert_eq!(out.motion.len(), 96);
    assert!(!out.refined);
    assert_eq!(out.codes[0].indices.len(), 12);
    out.motion.validate().unwrap();

    let inspected = p.inspect_codebook(3, &req.init, 4).unwrap();
    assert_eq!(inspected.len(), 32);
    assert!(matches!(p.inspect_codebook(99, &req.init, 4), Err(Error::Argument(_))));
}

#[test]
fn naive_mode_cannot_feed_the_gpt() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.vq.mode = QuantizationMode::NaiveMuCA;
    let p = Pipeline::new(cfg, false).unwrap();
    p.make_corpus().unwrap();
    p.train_vq().unwrap();
    assert!(matches!(p.train_gpt(), Err(Error::Validation(_))));
}

#[test]
fn lock_is_exclusive() {
    let tmp = tempfile::tempdir().unwrap();
    let held = StageLock::acquire(tmp.path(), Stage::Vq).unwrap();
    let p = Pipeline::new(tiny(tmp.path()), false).unwrap();
    assert!(matches!(p.make_corpus(), Err(Error::Locked(_))));
    drop(held);
    p.make_corpus().unwrap();
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let tmp = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny(tmp.path()), false).unwrap();
        p.make_corpus().unwrap();
        p.train_vq().unwrap();
        p.train_gpt().unwrap();
        let read = |s| std::fs::read(p.checkpoint_path(s)).unwrap();
        (read(Stage::Vq), read(Stage::Gpt))
    };
    assert!(run() == run());
}
