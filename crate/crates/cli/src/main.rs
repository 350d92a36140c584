mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use angie::audio::read_wav;
use angie::config::{PipelineConfig, Preset};
use angie::motion::{read_motion_file, write_motion_file, RegionMotionFrame};
use angie::pipeline::{GenerateRequest, Pipeline};
use angie::vq::QuantizationMode;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "angie", version, about = "Audio-driven gesture motion: quantize, predict, refine, evaluate")]
struct Cli {
    /// Flat `key = value` config file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base preset (overrides a `preset` line in the config file).
    #[arg(long, global = true, value_parser = ["paper", "desk"])]
    preset: Option<String>,
    /// Quantization mode, e.g. rel-mu-rel-l or NAIVE_MU_C_A.
    #[arg(long, global = true)]
    quant_mode: Option<String>,
    /// Skip motion refinement (pattern-only output).
    #[arg(long, global = true)]
    no_refine: bool,
    /// Also write an animated GIF next to the motion output.
    #[arg(long, global = true)]
    render: bool,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    force: bool,
    /// Working directory (config key `work_dir`).
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic audio/motion corpus into the working directory.
    MakeCorpus,
    TrainVq,
    TrainGpt,
    TrainRefine,
    /// Generate motion for an audio clip.
    Generate {
        #[arg(long)]
        audio: PathBuf,
        /// Motion file whose first frame is the initial pose.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output length in frames (multiple of 8); defaults to the audio length.
        #[arg(long)]
        frames: Option<usize>,
        /// Precomputed onset feature file.
        #[arg(long)]
        onset: Option<PathBuf>,
        /// Precomputed MFCC window cache.
        #[arg(long)]
        mfcc: Option<PathBuf>,
    },
    /// FGD, beat consistency and diversity of generated against reference motion.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode one codebook entry repeated in every stream.
    InspectCodebook {
        #[arg(long)]
        entry: usize,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of repeated codes (8 frames each).
        #[arg(long, default_value_t = 12)]
        codes: usize,
    },
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let preset = cli.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path, preset)?,
        None => PipelineConfig::preset(preset.unwrap_or_default()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &cli.quant_mode {
        cfg.vq.mode = mode.parse::<QuantizationMode>()?;
    }
    if let Some(dir) = &cli.work_dir {
        cfg.work_dir = dir.display().to_string();
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| angie::Error::Argument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_frame(path: &Path) -> Result<Vec<RegionMotionFrame>> {
    let seq = read_motion_file(path)?;
    if seq.is_empty() {
        return Err(angie::Error::Validation(format!("{} has no frames", path.display())).into());
    }
    Ok(seq.frame(0).to_vec())
}

fn gif_path(out: &Path) -> PathBuf {
    out.with_extension("gif")
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.dump()?);
        return Ok(());
    }
    let p = Pipeline::new(cfg, cli.force)?;
    log::info!("config digest {}", p.digest());
    match &cli.command {
        Command::MakeCorpus => print_json(&p.make_corpus()?.metrics)?,
        Command::TrainVq => print_json(&p.train_vq()?.metrics)?,
        Command::TrainGpt => print_json(&p.train_gpt()?.metrics)?,
        Command::TrainRefine => print_json(&p.train_refine()?.metrics)?,
        Command::Generate { audio, init, out, frames, onset, mfcc } => {
            let req = GenerateRequest {
                init: init_frame(init)?,
                audio: read_wav(audio)?,
                frames: *frames,
                onset_file: onset.clone(),
                mfcc_file: mfcc.clone(),
                refine: !cli.no_refine,
            };
            let g = p.generate(&req, out)?;
            if cli.render {
                render::render_gif(&g.motion, &gif_path(out), 256)?;
            }
            println!("wrote {} ({} frames, refined: {})", out.display(), g.motion.len(), g.refined);
        }
        Command::Eval { generated, reference, out } => {
            let report = p.eval(generated, reference)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(path) = out {
                if path.exists() && !cli.force {
                    return Err(angie::Error::Exists(path.clone()).into());
                }
                std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::InspectCodebook { entry, init, out, codes } => {
            if out.exists() && !cli.force {
                return Err(angie::Error::Exists(out.clone()).into());
            }
            let _lock = p.lock(angie::pipeline::Stage::InspectCodebook)?;
            let seq = p.inspect_codebook(*entry, &init_frame(init)?, *codes)?;
            write_motion_file(out, &seq)?;
            if cli.render {
                render::render_gif(&seq, &gif_path(out), 256)?;
            }
            println!("wrote {} (entry {entry}, {} frames)", out.display(), seq.len());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<angie::Error>() {
        Some(angie::Error::Argument(_)) => EXIT_USAGE,
        Some(angie::Error::Numerical { .. }) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let code = |e: angie::Error| exit_code(&anyhow::Error::from(e));
        assert_eq!(code(angie::Error::Argument("x".into())), EXIT_USAGE);
        assert_eq!(code(angie::Error::Numerical { step: 3, msg: "nan".into() }), EXIT_NUMERICAL);
        assert_eq!(code(angie::Error::Validation("x".into())), EXIT_VALIDATION);
        assert_eq!(code(angie::Error::Prerequisite("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), EXIT_VALIDATION);
    }

    #[test]
    fn flags_layer_over_the_preset() {
        let cli = Cli::parse_from([
            "angie",
            "--preset",
            "desk",
            "--seed",
            "9",
            "--quant-mode",
            "NAIVE_MU_C_A",
            "--set",
            "vq.steps=5",
            "train-vq",
        ]);
        let cfg = build_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.vq.steps, cfg.vq.mode), (9, 5, QuantizationMode::NaiveMuCA));
        let bad = Cli::parse_from(["angie", "--set", "vq.steps", "train-vq"]);
        assert!(build_config(&bad).is_err());
    }

    #[test]
    fn ellipse_has_two_sigma_axes() {
        let f = RegionMotionFrame::new([1.0, 2.0], angie::motion::CholeskyFactor::new(3.0, 0.0, 1.0));
        let pts = render::ellipse_points(&f, 4);
        let want = [[7.0, 2.0], [1.0, 4.0], [-5.0, 2.0], [1.0, 0.0]];
        for (p, w) in pts.iter().zip(&want) {
            assert!((p[0] - w[0]).abs() < 1e-12 && (p[1] - w[1]).abs() < 1e-12, "{p:?} vs {w:?}");
        }
    }
}
