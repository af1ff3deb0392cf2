//! Plugin contracts for the neural slots, plus deterministic toy
//! implementations and a subprocess adapter for external models.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::guidance::PromptEmbedding;
use crate::tensor::Tensor4;
use crate::video::{Fps, FrameVideo};
use crate::windows::Window;

pub mod adapter;
pub mod toy;

/// Temporal capacity of the motion modules.
pub const MAX_DENOISER_WINDOW: usize = 32;
pub const SPATIAL_FACTOR: usize = 8;
pub const LATENT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControlKind {
    Outline,
    Color,
    Depth,
    Softedge,
}

impl ControlKind {
    pub const ALL: [ControlKind; 4] = [
        ControlKind::Outline,
        ControlKind::Color,
        ControlKind::Depth,
        ControlKind::Softedge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControlKind::Outline => "outline",
            ControlKind::Color => "color",
            ControlKind::Depth => "depth",
            ControlKind::Softedge => "softedge",
        }
    }
}

impl std::fmt::Display for ControlKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown control kind {s:?}")))
    }
}

/// Conditioning frames for one control pathway, aligned 1:1 with latent
/// frames. Frames stay at pixel resolution with values in `[0, 1]`.
///
/// Restricting to a window shares the underlying buffer.
#[derive(Debug, Clone)]
pub struct ControlSignal {
    pub kind: ControlKind,
    pub conditioning_scale: f64,
    source: Arc<Tensor4>,
    start: usize,
    len: usize,
}

impl PartialEq for ControlSignal {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.conditioning_scale == other.conditioning_scale
            && self.frame_dims() == other.frame_dims()
            && self.len == other.len
            && (0..self.len).all(|i| self.frame(i) == other.frame(i))
    }
}

impl ControlSignal {
    pub fn new(kind: ControlKind, frames: Tensor4, conditioning_scale: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&conditioning_scale) {
            return Err(Error::Parameter(format!(
                "conditioning scale for {kind} must be in [0, 1], got {conditioning_scale}"
            )));
        }
        Ok(Self {
            kind,
            conditioning_scale,
            len: frames.frames(),
            source: Arc::new(frames),
            start: 0,
        })
    }

    /// The same signal restricted to a window's frames.
    pub fn window(&self, w: Window) -> Result<Self> {
        if w.l == 0 || w.r > self.len || w.l > w.r {
            return Err(Error::Shape(format!(
                "window {w} outside {} control of {} frames",
                self.kind, self.len
            )));
        }
        Ok(Self {
            kind: self.kind,
            conditioning_scale: self.conditioning_scale,
            source: Arc::clone(&self.source),
            start: self.start + w.l - 1,
            len: w.len(),
        })
    }

    pub fn frames(&self) -> usize {
        self.len
    }

    pub fn frame_dims(&self) -> [usize; 3] {
        self.source.frame_dims()
    }

    pub fn shape(&self) -> [usize; 4] {
        let [h, w, c] = self.frame_dims();
        [self.len, h, w, c]
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        assert!(i < self.len, "control frame {i} out of {}", self.len);
        self.source.frame(self.start + i)
    }

    pub fn get(&self, i: usize, y: usize, x: usize, k: usize) -> f32 {
        let [_, w, c] = self.frame_dims();
        self.frame(i)[(y * w + x) * c + k]
    }

    /// Copies the viewed frames out.
    pub fn to_tensor(&self) -> Tensor4 {
        if self.start == 0 && self.len == self.source.frames() {
            return (*self.source).clone();
        }
        self.source
            .slice_frames(self.start, self.start + self.len)
            .expect("view lies inside its source")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalMode {
    MotionModules,
    CrossFrameAttention,
    None,
}

impl TemporalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TemporalMode::MotionModules => "motion-modules",
            TemporalMode::CrossFrameAttention => "cross-frame-attention",
            TemporalMode::None => "none",
        }
    }
}

impl FromStr for TemporalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motion-modules" => Ok(TemporalMode::MotionModules),
            "cross-frame-attention" => Ok(TemporalMode::CrossFrameAttention),
            "none" => Ok(TemporalMode::None),
            other => Err(Error::Parameter(format!("unknown temporal mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TemporalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One window evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseRequest<'a> {
    pub window: Window,
    /// Latents of the window's frames, `(r - l + 1, h, w, c)`.
    pub latents: &'a Tensor4,
    pub timestep: usize,
    pub prompt: &'a PromptEmbedding,
    /// Control signals already restricted to the window.
    pub controls: &'a [ControlSignal],
    pub temporal_mode: TemporalMode,
}

/// Noise predictor over a window of latent frames.
///
/// Implementations must be pure and return a tensor with the shape of
/// `latents`. The engine never asks for more than `max_window` frames.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn max_window(&self) -> usize {
        MAX_DENOISER_WINDOW
    }

    /// Whether disjoint windows may be evaluated concurrently.
    fn is_reentrant(&self) -> bool {
        true
    }

    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<Tensor4>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderOptions {
    pub clip_skip_final_attention: bool,
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    fn encode(&self, text: &str, options: &EncoderOptions) -> Result<PromptEmbedding>;
}

/// Pixel ↔ latent mapping. Latents are `(N, H / factor, W / factor, channels)`.
pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;

    fn spatial_factor(&self) -> usize {
        SPATIAL_FACTOR
    }

    fn latent_channels(&self) -> usize {
        LATENT_CHANNELS
    }

    fn encode(&self, video: &FrameVideo) -> Result<Tensor4>;
    fn decode(&self, latents: &Tensor4, fps: Fps) -> Result<FrameVideo>;

    fn latent_shape(&self, frames: usize, height: u32, width: u32) -> Result<[usize; 4]> {
        let f = self.spatial_factor();
        let (h, w) = (height as usize, width as usize);
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Geometry(format!(
                "{width}x{height} is not divisible by the latent factor {f}"
            )));
        }
        Ok([frames, h / f, w / f, self.latent_channels()])
    }
}

/// Produces per-frame conditioning at pixel resolution, `(N, H, W, 3)` in `[0, 1]`.
pub trait ControlExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn extract(&self, video: &FrameVideo) -> Result<Tensor4>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    Fast,
    Balanced,
    Accurate,
}

impl InferenceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InferenceMode::Fast => "fast",
            InferenceMode::Balanced => "balanced",
            InferenceMode::Accurate => "accurate",
        }
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(InferenceMode::Fast),
            "balanced" => Ok(InferenceMode::Balanced),
            "accurate" => Ok(InferenceMode::Accurate),
            other => Err(Error::Parameter(format!(
                "unknown inference mode {other:?}"
            ))),
        }
    }
}

/// Settings forwarded to the deflicker post-processor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FastBlendConfig {
    pub inference_mode: InferenceMode,
    pub sliding_window_size: usize,
    pub batch_size: usize,
    pub tracking: bool,
    pub patch_size: usize,
    pub iterations: usize,
    pub guide_weight: f64,
}

impl Default for FastBlendConfig {
    fn default() -> Self {
        Self {
            inference_mode: InferenceMode::Accurate,
            sliding_window_size: 30,
            batch_size: 64,
            tracking: true,
            patch_size: 5,
            iterations: 5,
            guide_weight: 10.0,
        }
    }
}

/// Video-to-video post-process; output must match the input's frame count
/// and dimensions.
pub trait PostProcessor: Send + Sync {
    fn name(&self) -> &str;
    fn process(&self, video: &FrameVideo, config: &FastBlendConfig) -> Result<FrameVideo>;
}

/// Models bound to one pipeline stage.
#[derive(Clone)]
pub struct ModelBundle {
    pub denoiser: Arc<dyn Denoiser>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub codec: Arc<dyn LatentCodec>,
    pub extractors: BTreeMap<ControlKind, Arc<dyn ControlExtractor>>,
    pub postprocessor: Arc<dyn PostProcessor>,
}

impl ModelBundle {
    /// Toy bundle: guided toy denoiser, hashing text encoder, box codec, Sobel
    /// extractors and a 3-frame moving average in the post-process slot.
    pub fn toy() -> Self {
        Self {
            denoiser: Arc::new(toy::ToyToonDenoiser::default()),
            text_encoder: Arc::new(toy::ToyTextEncoder::default()),
            codec: Arc::new(toy::ToyCodec),
            extractors: toy::toy_extractors(),
            postprocessor: Arc::new(toy::MovingAveragePostProcessor::new(3)),
        }
    }

    pub fn with_denoiser(mut self, denoiser: Arc<dyn Denoiser>) -> Self {
        self.denoiser = denoiser;
        self
    }

    pub fn with_postprocessor(mut self, postprocessor: Arc<dyn PostProcessor>) -> Self {
        self.postprocessor = postprocessor;
        self
    }

    pub fn extractor(&self, kind: ControlKind) -> Result<&Arc<dyn ControlExtractor>> {
        self.extractors.get(&kind).ok_or_else(|| Error::Plugin {
            plugin: "bundle".into(),
            message: format!("no extractor registered for {kind}"),
        })
    }
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("denoiser", &self.denoiser.name())
            .field("text_encoder", &self.text_encoder.name())
            .field("codec", &self.codec.name())
            .field("extractors", &self.extractors.keys().collect::<Vec<_>>())
            .field("postprocessor", &self.postprocessor.name())
            .finish()
    }
}
