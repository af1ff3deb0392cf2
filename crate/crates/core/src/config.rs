//! Flat `key = value` configuration with `[section]` headers.
//!
//! ```text
//! # comment
//! [main]
//! inference_steps = 5
//! conditioning_scale.outline = 0.5
//! ```
//!
//! Unknown sections and keys are rejected; anything left out keeps its
//! default. [`PipelineConfig::to_canonical_string`] prints every key in a
//! fixed order and parses back to the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, DEFAULT_POSITIVE_PROMPT};
use crate::models::{ControlKind, FastBlendConfig, InferenceMode};
use crate::pipeline::StageConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits text into entries. Keys before any header belong to section `""`.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                line: Some(line_no),
                key: None,
                message: format!("unterminated section header {line:?}"),
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            line: Some(line_no),
            key: None,
            message: format!("expected `key = value`, got {line:?}"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config {
                line: Some(line_no),
                key: None,
                message: "empty key".into(),
            });
        }
        entries.push(Entry {
            section: section.clone(),
            key: key.to_string(),
            value: value.trim().to_string(),
            line: line_no,
        });
    }
    Ok(entries)
}

fn bad_value(entry: &Entry, expected: &str) -> Error {
    Error::Config {
        line: Some(entry.line),
        key: Some(entry.key.clone()),
        message: format!(
            "[{}] {}: expected {expected}, got {:?}",
            entry.section, entry.key, entry.value
        ),
    }
}

fn parse_num<T: FromStr>(entry: &Entry, expected: &str) -> Result<T> {
    entry.value.parse().map_err(|_| bad_value(entry, expected))
}

fn parse_bool(entry: &Entry) -> Result<bool> {
    match entry.value.as_str() {
        "true" | "enabled" | "yes" | "on" => Ok(true),
        "false" | "disabled" | "no" | "off" => Ok(false),
        _ => Err(bad_value(entry, "a boolean")),
    }
}

/// Prompt and embedding settings shared by both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct IoConfig {
    pub positive_prompt: String,
    pub negative_embedding: Option<PathBuf>,
    pub clip_skip_final_attention: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            positive_prompt: DEFAULT_POSITIVE_PROMPT.into(),
            negative_embedding: None,
            clip_skip_final_attention: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub main: StageConfig,
    pub editing: StageConfig,
    pub fastblend: FastBlendConfig,
    pub io: IoConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            main: StageConfig::main_defaults(),
            editing: StageConfig::editing_defaults(),
            fastblend: FastBlendConfig::default(),
            io: IoConfig::default(),
        }
    }
}

fn apply_stage(stage: &mut StageConfig, entry: &Entry) -> Result<bool> {
    match entry.key.as_str() {
        "frame_height" => stage.height = parse_num(entry, "a positive integer")?,
        "frame_width" => stage.width = parse_num(entry, "a positive integer")?,
        "cfg_scale" => stage.cfg_scale = parse_num(entry, "a number")?,
        "denoising_strength" => stage.strength = parse_num(entry, "a number in [0, 1]")?,
        "inference_steps" => stage.inference_steps = parse_num(entry, "a positive integer")?,
        "window_size" => stage.window_size = parse_num(entry, "a positive integer")?,
        "window_stride" => stage.window_stride = parse_num(entry, "a positive integer")?,
        "temporal_mode" => {
            stage.temporal_mode = entry
                .value
                .parse()
                .map_err(|_| bad_value(entry, "motion-modules, cross-frame-attention or none"))?
        }
        "hot_capacity" => {
            let v: usize = parse_num(entry, "a non-negative integer")?;
            stage.hot_capacity = (v > 0).then_some(v);
        }
        key => {
            let Some(kind) = key.strip_prefix("conditioning_scale.") else {
                return Ok(false);
            };
            let kind: ControlKind = kind.parse().map_err(|_| unknown_key(entry))?;
            let scale: f64 = parse_num(entry, "a number in [0, 1]")?;
            match stage.controls.iter_mut().find(|(k, _)| *k == kind) {
                Some(slot) => slot.1 = scale,
                None => stage.controls.push((kind, scale)),
            }
        }
    }
    Ok(true)
}

fn apply_fastblend(fb: &mut FastBlendConfig, entry: &Entry) -> Result<bool> {
    match entry.key.as_str() {
        "inference_mode" => {
            fb.inference_mode = entry
                .value
                .parse::<InferenceMode>()
                .map_err(|_| bad_value(entry, "fast, balanced or accurate"))?
        }
        "sliding_window_size" => fb.sliding_window_size = parse_num(entry, "a positive integer")?,
        "batch_size" => fb.batch_size = parse_num(entry, "a positive integer")?,
        "tracking" => fb.tracking = parse_bool(entry)?,
        "patch_size" => fb.patch_size = parse_num(entry, "a positive integer")?,
        "iterations" => fb.iterations = parse_num(entry, "a positive integer")?,
        "guide_weight" => fb.guide_weight = parse_num(entry, "a number")?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn apply_io(io: &mut IoConfig, entry: &Entry) -> Result<bool> {
    match entry.key.as_str() {
        "positive_prompt" => io.positive_prompt = entry.value.clone(),
        "negative_embedding" => {
            io.negative_embedding = (!entry.value.is_empty()).then(|| PathBuf::from(&entry.value))
        }
        "clip_skip_final_attention" => io.clip_skip_final_attention = parse_bool(entry)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn unknown_key(entry: &Entry) -> Error {
    Error::Config {
        line: Some(entry.line),
        key: Some(entry.key.clone()),
        message: format!("unknown key `{}` in section [{}]", entry.key, entry.section),
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for entry in parse_entries(text)? {
            if let Some(prev) = seen.insert((entry.section.clone(), entry.key.clone()), entry.line)
            {
                return Err(Error::Config {
                    line: Some(entry.line),
                    key: Some(entry.key.clone()),
                    message: format!("`{}` already set on line {prev}", entry.key),
                });
            }
            let known = match entry.section.as_str() {
                "main" => apply_stage(&mut cfg.main, &entry)?,
                "editing" => apply_stage(&mut cfg.editing, &entry)?,
                "fastblend" => apply_fastblend(&mut cfg.fastblend, &entry)?,
                "io" => apply_io(&mut cfg.io, &entry)?,
                other => {
                    return Err(Error::Config {
                        line: Some(entry.line),
                        key: Some(entry.key.clone()),
                        message: format!("unknown section [{other}] for key `{}`", entry.key),
                    })
                }
            };
            if !known {
                return Err(unknown_key(&entry));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Model-independent checks; see [`StageConfig::validate`].
    pub fn validate(&self) -> Result<()> {
        for (name, stage) in [("main", &self.main), ("editing", &self.editing)] {
            stage.validate_static().map_err(|e| match e {
                Error::Config { line, key, message } => Error::Config {
                    line,
                    key,
                    message: format!("[{name}] {message}"),
                },
                other => other,
            })?;
        }
        let fb = &self.fastblend;
        for (key, v) in [
            ("sliding_window_size", fb.sliding_window_size),
            ("batch_size", fb.batch_size),
            ("patch_size", fb.patch_size),
            ("iterations", fb.iterations),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    line: None,
                    key: Some(key.into()),
                    message: format!("[fastblend] {key} must be positive"),
                });
            }
        }
        Ok(())
    }

    pub fn guidance(&self, stage: &StageConfig) -> GuidanceConfig {
        GuidanceConfig {
            scale: stage.cfg_scale,
            clip_skip_final_attention: self.io.clip_skip_final_attention,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.main.seed = seed;
        self.editing.seed = seed;
        self
    }

    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for (name, stage) in [("main", &self.main), ("editing", &self.editing)] {
            let _ = writeln!(out, "[{name}]");
            let _ = writeln!(out, "frame_height = {}", stage.height);
            let _ = writeln!(out, "frame_width = {}", stage.width);
            let _ = writeln!(out, "cfg_scale = {}", stage.cfg_scale);
            let _ = writeln!(out, "denoising_strength = {}", stage.strength);
            let _ = writeln!(out, "inference_steps = {}", stage.inference_steps);
            let _ = writeln!(out, "window_size = {}", stage.window_size);
            let _ = writeln!(out, "window_stride = {}", stage.window_stride);
            for kind in ControlKind::ALL {
                if let Some((_, s)) = stage.controls.iter().find(|(k, _)| *k == kind) {
                    let _ = writeln!(out, "conditioning_scale.{kind} = {s}");
                }
            }
            let _ = writeln!(out, "temporal_mode = {}", stage.temporal_mode);
            let _ = writeln!(out, "hot_capacity = {}", stage.hot_capacity.unwrap_or(0));
            out.push('\n');
        }
        let fb = &self.fastblend;
        let _ = writeln!(out, "[fastblend]");
        let _ = writeln!(out, "inference_mode = {}", fb.inference_mode.as_str());
        let _ = writeln!(out, "sliding_window_size = {}", fb.sliding_window_size);
        let _ = writeln!(out, "batch_size = {}", fb.batch_size);
        let _ = writeln!(
            out,
            "tracking = {}",
            if fb.tracking { "enabled" } else { "disabled" }
        );
        let _ = writeln!(out, "patch_size = {}", fb.patch_size);
        let _ = writeln!(out, "iterations = {}", fb.iterations);
        let _ = writeln!(out, "guide_weight = {}", fb.guide_weight);
        out.push('\n');
        let _ = writeln!(out, "[io]");
        let _ = writeln!(out, "positive_prompt = {}", self.io.positive_prompt);
        let _ = writeln!(
            out,
            "negative_embedding = {}",
            self.io
                .negative_embedding
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let _ = writeln!(
            out,
            "clip_skip_final_attention = {}",
            self.io.clip_skip_final_attention
        );
        out
    }
}
