//! Pipeline configuration: presets, flat `key = value` files and digests.
//!
//! Every field of [`PipelineConfig`] has a dotted key (`vq.steps`,
//! `refine.encoder.channels`, ...). A file or command line sets keys on top
//! of a preset; values are parsed with the type of the preset's value, and
//! unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gpt::GptConfig;
use crate::metrics::FeatureConfig;
use crate::refine::RefineConfig;
use crate::synth::SynthConfig;
use crate::vq::{VqConfig, DOWNSAMPLE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    #[default]
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    /// 0 decodes greedily.
    pub temperature: f64,
    /// 0 keeps every entry.
    pub top_k: usize,
    pub sample_seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { temperature: 0.0, top_k: 0, sample_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub seed: u64,
    pub work_dir: String,
    pub corpus: SynthConfig,
    pub vq: VqConfig,
    pub gpt: GptConfig,
    pub refine: RefineConfig,
    pub features: FeatureConfig,
    pub generate: GenerateConfig,
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                preset: p,
                seed: 0,
                work_dir: "angie-work".into(),
                corpus: SynthConfig::default(),
                vq: VqConfig::desk(),
                gpt: GptConfig::desk(),
                refine: RefineConfig::desk(),
                features: FeatureConfig::desk(),
                generate: GenerateConfig::default(),
            },
            Preset::Paper => Self {
                preset: p,
                corpus: SynthConfig { regions: 20, ..SynthConfig::default() },
                vq: VqConfig::paper(),
                gpt: GptConfig::paper(),
                refine: RefineConfig::paper(),
                features: FeatureConfig::paper(),
                ..Self::preset(Preset::Desk)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.vq.validate()?;
        self.gpt.validate()?;
        self.refine.validate()?;
        self.features.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let k = self.vq.regions;
        if [self.corpus.regions, self.refine.regions, self.features.regions].iter().any(|&r| r != k) {
            return bad(format!(
                "region counts disagree: corpus {}, vq {k}, refine {}, features {}",
                self.corpus.regions, self.refine.regions, self.features.regions
            ));
        }
        if self.gpt.vocab != self.vq.codebook_size {
            return bad(format!("gpt.vocab {} must equal vq.codebook_size {}", self.gpt.vocab, self.vq.codebook_size));
        }
        if self.gpt.context * DOWNSAMPLE != self.vq.window {
            return bad(format!("gpt.context {} must be vq.window / {DOWNSAMPLE} = {}", self.gpt.context, self.vq.window / DOWNSAMPLE));
        }
        if self.gpt.audio_pool != DOWNSAMPLE {
            return bad(format!("gpt.audio_pool must be {DOWNSAMPLE}, one audio token per code"));
        }
        if self.vq.window > self.corpus.frames || self.features.window > self.corpus.frames {
            return bad(format!("corpus clips of {} frames are shorter than the model windows", self.corpus.frames));
        }
        if !(self.generate.temperature >= 0.0) {
            return bad("generate.temperature must be nonnegative".into());
        }
        Ok(())
    }

    /// Every key with its value rendered as config-file text, sorted.
    pub fn flatten(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        flatten_value("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    /// Effective configuration as `key = value` lines.
    pub fn dump(&self) -> Result<String> {
        Ok(self.flatten()?.iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
    }

    /// SHA-256 of the dump without `work_dir`, so moving a run does not
    /// change it.
    pub fn digest(&self) -> Result<String> {
        let mut keys = self.flatten()?;
        keys.remove("work_dir");
        let text: String = keys.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    /// Sets one dotted key, parsing `raw` with the type of the current value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let slot = key
            .split('.')
            .try_fold(&mut tree, |node, part| node.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if slot.is_object() {
            return Err(Error::Config(format!("{key:?} is a section, not a value")));
        }
        *slot = parse_like(slot, raw.trim()).map_err(|m| Error::Config(format!("{key}: {m}")))?;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Preset defaults overlaid with `key = value` text. A `preset` line
    /// picks the base unless `preset_override` is given.
    pub fn from_text(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let entries = parse_lines(text)?;
        let file_preset = entries.iter().find(|(_, k, _)| k == "preset").map(|(_, _, v)| v.parse()).transpose()?;
        let mut cfg = Self::preset(preset_override.or(file_preset).unwrap_or_default());
        for (line, key, value) in entries {
            if key == "preset" {
                continue;
            }
            cfg.set(&key, &value).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, preset_override).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Format { path: path.to_path_buf(), msg: format!("line {line}: {msg}") },
            other => other,
        })
    }
}

fn flatten_value(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_value(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), render(other));
        }
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn parse_like(current: &Value, raw: &str) -> std::result::Result<Value, String> {
    match current {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got {raw:?}")),
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            if n.is_u64() {
                raw.parse::<u64>().map(Value::from).map_err(|_| format!("expected a nonnegative integer, got {raw:?}"))
            } else {
                raw.parse::<i64>().map(Value::from).map_err(|_| format!("expected an integer, got {raw:?}"))
            }
        }
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| format!("expected a number, got {raw:?}"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| format!("{raw:?} is not finite"))
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::from(0u64));
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| parse_like(&proto, s.trim()))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Null | Value::Object(_) => Err("value cannot be set from text".into()),
    }
}

/// `(line, key, value)` entries; `#` starts a comment.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: line_no, msg: format!("expected `key = value`, got {content:?}") })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse { line: line_no, msg: "empty key".into() });
        }
        out.push((line_no, key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vq::QuantizationMode;

    #[test]
    fn presets_validate() {
        PipelineConfig::preset(Preset::Desk).validate().unwrap();
        PipelineConfig::preset(Preset::Paper).validate().unwrap();
        let p = PipelineConfig::preset(Preset::Paper);
        assert_eq!((p.vq.window, p.vq.window_stride, p.vq.codebook_size, p.vq.code_dim), (96, 32, 512, 512));
        assert_eq!((p.gpt.layers, p.gpt.channels, p.gpt.heads), (12, 768, 12));
        assert_eq!((p.vq.lr, p.vq.beta, p.vq.regions), (3e-5, 0.1, 20));
        let d = PipelineConfig::preset(Preset::Desk);
        assert_eq!((d.vq.regions, d.vq.codebook_size, d.vq.code_dim), (4, 32, 32));
        assert_eq!((d.gpt.layers, d.gpt.channels, d.gpt.heads), (4, 128, 4));
    }

    #[test]
    fn dump_roundtrips_through_text() {
        let mut cfg = PipelineConfig::preset(Preset::Desk);
        cfg.vq.mode = QuantizationMode::NaiveMuCA;
        cfg.refine.encoder.hidden = vec![7, 5];
        cfg.vq.lr = 1.25e-3;
        let text = cfg.dump().unwrap();
        assert!(text.contains("vq.mode = naive-mu-c-a\n"));
        assert!(text.contains("refine.encoder.hidden = 7,5\n"));
        let back = PipelineConfig::from_text(&text, None).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest().unwrap(), cfg.digest().unwrap());
    }

    #[test]
    fn overrides_are_typed() {
        let text = "# comment\npreset = desk\nvq.steps = 20   # trailing\nvq.mode = REL_MU_ABS_L\ngpt.dropout = 0.25\n";
        let cfg = PipelineConfig::from_text(text, None).unwrap();
        assert_eq!(cfg.vq.steps, 20);
        assert_eq!(cfg.vq.mode, QuantizationMode::RelMuAbsL);
        assert_eq!(cfg.gpt.dropout, 0.25);
        let err = |t: &str| PipelineConfig::from_text(t, None).unwrap_err();
        assert!(matches!(err("vq.steps = -3"), Error::Parse { line: 1, .. }));
        assert!(matches!(err("vq.nope = 1"), Error::Parse { .. }));
        assert!(matches!(err("\n\nvq.steps"), Error::Parse { line: 3, .. }));
        assert!(matches!(err("vq = 3"), Error::Parse { .. }));
        assert!(matches!(err("vq.mode = sideways"), Error::Parse { .. }));
    }

    #[test]
    fn preset_override_wins() {
        let cfg = PipelineConfig::from_text("preset = paper\nseed = 9", Some(Preset::Desk)).unwrap();
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.vq.regions, 4);
        assert_eq!(cfg.seed, 9);
        assert_eq!(PipelineConfig::from_text("preset = paper", None).unwrap().vq.regions, 20);
    }

    #[test]
    fn digest_tracks_values() {
        let a = PipelineConfig::preset(Preset::Desk);
        let mut b = a.clone();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.set("seed", "5").unwrap();
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 64);
    }

    #[test]
    fn cross_checks() {
        let mut c = PipelineConfig::preset(Preset::Desk);
        c.gpt.vocab = 16;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = PipelineConfig::preset(Preset::Desk);
        c.refine.regions = 3;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::preset(Preset::Desk);
        c.gpt.context = 6;
        assert!(c.validate().is_err());
    }
}
