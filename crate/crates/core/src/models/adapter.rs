//! Out-of-process model adapters.
//!
//! Every call runs `<program> [args...] <op> <workdir>`. The engine fills the
//! work directory with `TNSR` tensors, PNG frame folders and a `manifest.txt`
//! of `key = value` lines, and expects the adapter to leave its result next
//! to them:
//!
//! | op              | inputs                                   | output          |
//! |-----------------|------------------------------------------|-----------------|
//! | `denoise`       | `latents.tnsr`, `prompt.tnsr`, `control_<k>.tnsr` | `output.tnsr` |
//! | `encode_text`   | `text.txt`                               | `output.tnsr` (1, tokens, 1, D) |
//! | `encode_frames` | `frames/00001.png ...`                   | `output.tnsr`   |
//! | `decode_latents`| `latents.tnsr`                           | `out/00001.png ...` |
//! | `extract`       | `frames/00001.png ...`                   | `output.tnsr`   |
//! | `postprocess`   | `frames/00001.png ...`                   | `out/00001.png ...` |
//!
//! A non-zero exit status becomes [`Error::Plugin`] carrying the captured
//! stderr.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use super::{
    ControlExtractor, ControlKind, DenoiseRequest, Denoiser, EncoderOptions, FastBlendConfig,
    LatentCodec, ModelBundle, PostProcessor, TextEncoder, MAX_DENOISER_WINDOW,
};
use crate::config::{parse_entries, Entry};
use crate::error::{Error, Result};
use crate::guidance::{EmbeddingSource, PromptEmbedding};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor4};
use crate::video::{load_frames, save_frames, Fps, FrameVideo};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const OUTPUT_TENSOR: &str = "output.tnsr";
pub const OUTPUT_FRAMES: &str = "out";
pub const INPUT_FRAMES: &str = "frames";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl AdapterCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
        }
    }

    pub fn with_args(mut self, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.args = args.into_iter().map(Into::into).collect();
        self
    }

    fn label(&self) -> String {
        self.program.display().to_string()
    }

    fn plugin_error(&self, message: impl Into<String>) -> Error {
        Error::Plugin {
            plugin: self.label(),
            message: message.into(),
        }
    }

    /// Runs one operation in a fresh work directory prepared by `prepare`.
    fn call<T>(
        &self,
        op: &str,
        manifest: &[(String, String)],
        prepare: impl FnOnce(&Path) -> Result<()>,
        collect: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let dir = tempfile::Builder::new()
            .prefix("toonshade-adapter-")
            .tempdir()
            .map_err(|e| Error::io("creating adapter work directory", e))?;
        prepare(dir.path())?;
        let mut text = format!("op = {op}\n");
        for (k, v) in manifest {
            let _ = writeln!(text, "{k} = {v}");
        }
        std::fs::write(dir.path().join(MANIFEST_FILE), text)
            .map_err(|e| Error::io("writing adapter manifest", e))?;

        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(op)
            .arg(dir.path())
            .output()
            .map_err(|e| self.plugin_error(format!("failed to start: {e}")))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(self.plugin_error(format!(
                "`{op}` exited with {}: {}",
                output.status,
                stderr.trim()
            )));
        }
        collect(dir.path()).map_err(|e| match e {
            Error::Plugin { .. } => e,
            other => self.plugin_error(format!("`{op}` produced unusable output: {other}")),
        })
    }
}

fn kv(k: impl Into<String>, v: impl ToString) -> (String, String) {
    (k.into(), v.to_string())
}

pub struct SubprocessDenoiser {
    command: AdapterCommand,
    max_window: usize,
    reentrant: bool,
}

impl SubprocessDenoiser {
    pub fn new(command: AdapterCommand, max_window: usize) -> Self {
        Self {
            command,
            max_window,
            reentrant: false,
        }
    }

    pub fn reentrant(mut self, reentrant: bool) -> Self {
        self.reentrant = reentrant;
        self
    }
}

impl Denoiser for SubprocessDenoiser {
    fn name(&self) -> &str {
        "subprocess-denoiser"
    }

    fn max_window(&self) -> usize {
        self.max_window
    }

    fn is_reentrant(&self) -> bool {
        self.reentrant
    }

    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<Tensor4> {
        let mut manifest = vec![
            kv("window_start", request.window.l),
            kv("window_end", request.window.r),
            kv("timestep", request.timestep),
            kv("temporal_mode", request.temporal_mode),
            kv("prompt_source", request.prompt.source().as_str()),
            kv("latents", "latents.tnsr"),
            kv("prompt", "prompt.tnsr"),
            kv("control_count", request.controls.len()),
        ];
        for (k, c) in request.controls.iter().enumerate() {
            manifest.push(kv(format!("control.{k}.kind"), c.kind));
            manifest.push(kv(format!("control.{k}.scale"), c.conditioning_scale));
            manifest.push(kv(format!("control.{k}.file"), format!("control_{k}.tnsr")));
        }
        manifest.push(kv("output", OUTPUT_TENSOR));
        let shape = request.latents.shape();
        self.command.call(
            "denoise",
            &manifest,
            |dir| {
                write_tensor_file(request.latents, &dir.join("latents.tnsr"))?;
                write_tensor_file(&request.prompt.to_tensor(), &dir.join("prompt.tnsr"))?;
                for (k, c) in request.controls.iter().enumerate() {
                    write_tensor_file(&c.to_tensor(), &dir.join(format!("control_{k}.tnsr")))?;
                }
                Ok(())
            },
            |dir| {
                let out = read_tensor_file(&dir.join(OUTPUT_TENSOR))?;
                if out.shape() != shape {
                    return Err(self.command.plugin_error(format!(
                        "denoiser returned shape {:?}, expected {shape:?}",
                        out.shape()
                    )));
                }
                Ok(out)
            },
        )
    }
}

pub struct SubprocessTextEncoder {
    command: AdapterCommand,
    dim: usize,
}

impl SubprocessTextEncoder {
    pub fn new(command: AdapterCommand, embedding_dim: usize) -> Self {
        Self {
            command,
            dim: embedding_dim,
        }
    }
}

impl TextEncoder for SubprocessTextEncoder {
    fn name(&self) -> &str {
        "subprocess-text-encoder"
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str, options: &EncoderOptions) -> Result<PromptEmbedding> {
        let manifest = vec![
            kv("text", "text.txt"),
            kv(
                "clip_skip_final_attention",
                options.clip_skip_final_attention,
            ),
            kv("embedding_dim", self.dim),
            kv("output", OUTPUT_TENSOR),
        ];
        self.command.call(
            "encode_text",
            &manifest,
            |dir| {
                std::fs::write(dir.join("text.txt"), text)
                    .map_err(|e| Error::io("writing prompt", e))
            },
            |dir| {
                let t = read_tensor_file(&dir.join(OUTPUT_TENSOR))?;
                let e = PromptEmbedding::from_tensor(&t, EmbeddingSource::PositiveText)?;
                if e.dim() != self.dim {
                    return Err(self.command.plugin_error(format!(
                        "embedding dim {} does not match declared {}",
                        e.dim(),
                        self.dim
                    )));
                }
                Ok(e)
            },
        )
    }
}

pub struct SubprocessCodec {
    command: AdapterCommand,
}

impl SubprocessCodec {
    pub fn new(command: AdapterCommand) -> Self {
        Self { command }
    }
}

impl LatentCodec for SubprocessCodec {
    fn name(&self) -> &str {
        "subprocess-codec"
    }

    fn encode(&self, video: &FrameVideo) -> Result<Tensor4> {
        let shape = self.latent_shape(video.len(), video.height(), video.width())?;
        self.command.call(
            "encode_frames",
            &[kv("frames", INPUT_FRAMES), kv("output", OUTPUT_TENSOR)],
            |dir| save_frames(video, &dir.join(INPUT_FRAMES)),
            |dir| {
                let t = read_tensor_file(&dir.join(OUTPUT_TENSOR))?;
                if t.shape() != shape {
                    return Err(self.command.plugin_error(format!(
                        "encoder returned {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t)
            },
        )
    }

    fn decode(&self, latents: &Tensor4, fps: Fps) -> Result<FrameVideo> {
        self.command.call(
            "decode_latents",
            &[kv("latents", "latents.tnsr"), kv("output", OUTPUT_FRAMES)],
            |dir| write_tensor_file(latents, &dir.join("latents.tnsr")),
            |dir| {
                let v = load_frames(&dir.join(OUTPUT_FRAMES))?;
                FrameVideo::new(v.into_frames(), fps)
            },
        )
    }
}

pub struct SubprocessExtractor {
    command: AdapterCommand,
    kind: ControlKind,
}

impl SubprocessExtractor {
    pub fn new(command: AdapterCommand, kind: ControlKind) -> Self {
        Self { command, kind }
    }
}

impl ControlExtractor for SubprocessExtractor {
    fn name(&self) -> &str {
        "subprocess-extractor"
    }

    fn extract(&self, video: &FrameVideo) -> Result<Tensor4> {
        self.command.call(
            "extract",
            &[
                kv("kind", self.kind),
                kv("frames", INPUT_FRAMES),
                kv("output", OUTPUT_TENSOR),
            ],
            |dir| save_frames(video, &dir.join(INPUT_FRAMES)),
            |dir| {
                let t = read_tensor_file(&dir.join(OUTPUT_TENSOR))?;
                if t.frames() != video.len() {
                    return Err(self.command.plugin_error(format!(
                        "extractor returned {} frames for {}",
                        t.frames(),
                        video.len()
                    )));
                }
                Ok(t)
            },
        )
    }
}

pub struct SubprocessPostProcessor {
    command: AdapterCommand,
}

impl SubprocessPostProcessor {
    pub fn new(command: AdapterCommand) -> Self {
        Self { command }
    }
}

impl PostProcessor for SubprocessPostProcessor {
    fn name(&self) -> &str {
        "subprocess-postprocessor"
    }

    fn process(&self, video: &FrameVideo, config: &FastBlendConfig) -> Result<FrameVideo> {
        let manifest = vec![
            kv("frames", INPUT_FRAMES),
            kv("output", OUTPUT_FRAMES),
            kv("inference_mode", config.inference_mode.as_str()),
            kv("sliding_window_size", config.sliding_window_size),
            kv("batch_size", config.batch_size),
            kv(
                "tracking",
                if config.tracking {
                    "enabled"
                } else {
                    "disabled"
                },
            ),
            kv("patch_size", config.patch_size),
            kv("iterations", config.iterations),
            kv("guide_weight", config.guide_weight),
        ];
        self.command.call(
            "postprocess",
            &manifest,
            |dir| save_frames(video, &dir.join(INPUT_FRAMES)),
            |dir| {
                let out = load_frames(&dir.join(OUTPUT_FRAMES))?;
                if out.len() != video.len()
                    || (out.width(), out.height()) != (video.width(), video.height())
                {
                    return Err(self
                        .command
                        .plugin_error("post-processor changed frame count or size"));
                }
                FrameVideo::new(out.into_frames(), video.fps())
            },
        )
    }
}

/// Slot bindings read from a plugin manifest:
///
/// ```text
/// [denoiser]
/// command = /opt/models/unet-adapter
/// args = --device cuda
/// max_window = 32
///
/// [text_encoder]
/// command = /opt/models/clip-adapter
/// embedding_dim = 768
///
/// [extractor.outline]
/// command = /opt/models/lineart-adapter
/// ```
///
/// Sections: `denoiser`, `text_encoder`, `codec`, `extractor.<kind>`,
/// `postprocessor`. Slots left out keep their toy implementation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PluginManifest {
    pub denoiser: Option<(AdapterCommand, usize, bool)>,
    pub text_encoder: Option<(AdapterCommand, usize)>,
    pub codec: Option<AdapterCommand>,
    pub extractors: BTreeMap<ControlKind, AdapterCommand>,
    pub postprocessor: Option<AdapterCommand>,
}

fn manifest_error(entry: Option<&Entry>, message: String) -> Error {
    Error::Config {
        line: entry.map(|e| e.line),
        key: entry.map(|e| e.key.clone()),
        message,
    }
}

impl PluginManifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        for e in parse_entries(text)? {
            let allowed: &[&str] = match e.section.as_str() {
                "denoiser" => &["command", "args", "max_window", "reentrant"],
                "text_encoder" => &["command", "args", "embedding_dim"],
                "codec" | "postprocessor" => &["command", "args"],
                s if s
                    .strip_prefix("extractor.")
                    .is_some_and(|k| k.parse::<ControlKind>().is_ok()) =>
                {
                    &["command", "args"]
                }
                s => {
                    return Err(manifest_error(
                        Some(&e),
                        format!("unknown plugin section [{s}]"),
                    ));
                }
            };
            if !allowed.contains(&e.key.as_str()) {
                return Err(manifest_error(
                    Some(&e),
                    format!("unknown key `{}` in [{}]", e.key, e.section),
                ));
            }
            sections
                .entry(e.section.clone())
                .or_default()
                .insert(e.key.clone(), e);
        }

        let command = |section: &str, keys: &BTreeMap<String, Entry>| -> Result<AdapterCommand> {
            let cmd = keys
                .get("command")
                .ok_or_else(|| manifest_error(None, format!("[{section}] needs a `command`")))?;
            let program = PathBuf::from(&cmd.value);
            let program = if program.is_relative() && cmd.value.contains('/') {
                base_dir.join(program)
            } else {
                program
            };
            let args = keys
                .get("args")
                .map(|a| a.value.split_whitespace().map(String::from).collect())
                .unwrap_or_default();
            Ok(AdapterCommand { program, args })
        };
        let number = |keys: &BTreeMap<String, Entry>, key: &str, default: usize| -> Result<usize> {
            match keys.get(key) {
                None => Ok(default),
                Some(e) => e.value.parse().map_err(|_| {
                    manifest_error(Some(e), format!("`{key}` must be a positive integer"))
                }),
            }
        };

        let mut manifest = PluginManifest::default();
        for (section, keys) in &sections {
            let cmd = command(section, keys)?;
            match section.as_str() {
                "denoiser" => {
                    let max_window = number(keys, "max_window", MAX_DENOISER_WINDOW)?;
                    if max_window == 0 || max_window > MAX_DENOISER_WINDOW {
                        return Err(manifest_error(
                            keys.get("max_window"),
                            format!("max_window must be in 1..={MAX_DENOISER_WINDOW}"),
                        ));
                    }
                    let reentrant = keys.get("reentrant").is_some_and(|e| e.value == "true");
                    manifest.denoiser = Some((cmd, max_window, reentrant));
                }
                "text_encoder" => {
                    let dim = number(keys, "embedding_dim", 768)?;
                    manifest.text_encoder = Some((cmd, dim));
                }
                "codec" => manifest.codec = Some(cmd),
                "postprocessor" => manifest.postprocessor = Some(cmd),
                s => {
                    let kind = s["extractor.".len()..].parse()?;
                    manifest.extractors.insert(kind, cmd);
                }
            }
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading plugin manifest {}", path.display()), e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Toy bundle with every declared slot swapped for its adapter.
    pub fn bundle(&self) -> ModelBundle {
        let mut bundle = ModelBundle::toy();
        if let Some((cmd, max_window, reentrant)) = &self.denoiser {
            bundle.denoiser =
                Arc::new(SubprocessDenoiser::new(cmd.clone(), *max_window).reentrant(*reentrant));
        }
        if let Some((cmd, dim)) = &self.text_encoder {
            bundle.text_encoder = Arc::new(SubprocessTextEncoder::new(cmd.clone(), *dim));
        }
        if let Some(cmd) = &self.codec {
            bundle.codec = Arc::new(SubprocessCodec::new(cmd.clone()));
        }
        for (kind, cmd) in &self.extractors {
            bundle.extractors.insert(
                *kind,
                Arc::new(SubprocessExtractor::new(cmd.clone(), *kind)),
            );
        }
        if let Some(cmd) = &self.postprocessor {
            bundle.postprocessor = Arc::new(SubprocessPostProcessor::new(cmd.clone()));
        }
        bundle
    }
}
