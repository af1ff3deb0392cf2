//! Deterministic stand-ins for every model slot. They carry no learned
//! weights; each one is small enough to reason about by hand, which is what
//! makes them useful as oracles for the engine around them.

use std::collections::BTreeMap;
use std::sync::Arc;

use image::RgbImage;
use sha2::{Digest, Sha256};

use super::{
    ControlExtractor, ControlKind, ControlSignal, DenoiseRequest, Denoiser, EncoderOptions,
    FastBlendConfig, LatentCodec, PostProcessor, TextEncoder, MAX_DENOISER_WINDOW, SPATIAL_FACTOR,
};
use crate::error::{Error, Result};
use crate::guidance::{EmbeddingSource, PromptEmbedding};
use crate::scheduler::NoiseSchedule;
use crate::tensor::Tensor4;
use crate::video::{Fps, FrameVideo};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn check_window(name: &str, max_window: usize, request: &DenoiseRequest<'_>) -> Result<()> {
    let frames = request.latents.frames();
    if frames > max_window {
        return Err(Error::Plugin {
            plugin: name.into(),
            message: format!("window of {frames} frames exceeds max_window {max_window}"),
        });
    }
    if frames != request.window.len() {
        return Err(Error::Plugin {
            plugin: name.into(),
            message: format!(
                "latent slice has {frames} frames but window {} spans {}",
                request.window,
                request.window.len()
            ),
        });
    }
    Ok(())
}

/// Nearest-neighbour resample of `(n, H, W, C)` onto `(n, h, w, c)`. Spatial
/// axes sample at pixel centres; channel `k` reads source channel
/// `min(k, C - 1)`.
pub fn resample_nearest(src: &Tensor4, target: [usize; 3]) -> Result<Tensor4> {
    resample_frames(src.shape(), |i| src.frame(i), target)
}

/// [`resample_nearest`] over a control view.
pub fn resample_control(src: &ControlSignal, target: [usize; 3]) -> Result<Tensor4> {
    resample_frames(src.shape(), |i| src.frame(i), target)
}

fn resample_frames<'a>(
    shape: [usize; 4],
    frame: impl Fn(usize) -> &'a [f32],
    target: [usize; 3],
) -> Result<Tensor4> {
    let [n, sh, sw, sc] = shape;
    let [h, w, c] = target;
    let rows: Vec<usize> = (0..h)
        .map(|y| (((2 * y + 1) * sh) / (2 * h)).min(sh - 1))
        .collect();
    let cols: Vec<usize> = (0..w)
        .map(|x| (((2 * x + 1) * sw) / (2 * w)).min(sw - 1))
        .collect();
    let mut data = Vec::with_capacity(n * h * w * c);
    for i in 0..n {
        let src = frame(i);
        for &sy in &rows {
            for &sx in &cols {
                let base = (sy * sw + sx) * sc;
                data.extend((0..c).map(|k| src[base + k.min(sc - 1)]));
            }
        }
    }
    Tensor4::from_vec([n, h, w, c], data)
}

/// Returns pre-recorded noise for whichever window is requested.
pub struct OracleDenoiser {
    noise: Tensor4,
    max_window: usize,
}

impl OracleDenoiser {
    pub fn new(true_noise: Tensor4) -> Self {
        Self {
            noise: true_noise,
            max_window: MAX_DENOISER_WINDOW,
        }
    }

    pub fn with_max_window(mut self, max_window: usize) -> Self {
        self.max_window = max_window;
        self
    }
}

impl Denoiser for OracleDenoiser {
    fn name(&self) -> &str {
        "toy-oracle"
    }

    fn max_window(&self) -> usize {
        self.max_window
    }

    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<Tensor4> {
        check_window(self.name(), self.max_window, request)?;
        let w = request.window;
        if w.l == 0 || w.r > self.noise.frames() {
            return Err(Error::Plugin {
                plugin: self.name().into(),
                message: format!(
                    "window {w} outside stored noise of {} frames",
                    self.noise.frames()
                ),
            });
        }
        if request.latents.frame_dims() != self.noise.frame_dims() {
            return Err(Error::Plugin {
                plugin: self.name().into(),
                message: "latent frame dims differ from stored noise".into(),
            });
        }
        let r = w.zero_based();
        self.noise.slice_frames(r.start, r.end)
    }
}

/// `a * latent + b`, frame by frame, regardless of window membership.
pub struct FrameLocalDenoiser {
    a: f32,
    b: f32,
    max_window: usize,
}

impl FrameLocalDenoiser {
    pub fn new(a: f32, b: f32) -> Self {
        Self {
            a,
            b,
            max_window: MAX_DENOISER_WINDOW,
        }
    }

    /// Raises the frame cap, e.g. to run a whole video as one window.
    pub fn with_max_window(mut self, max_window: usize) -> Self {
        self.max_window = max_window;
        self
    }
}

impl Denoiser for FrameLocalDenoiser {
    fn name(&self) -> &str {
        "toy-frame-local"
    }

    fn max_window(&self) -> usize {
        self.max_window
    }

    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<Tensor4> {
        check_window(self.name(), self.max_window, request)?;
        let (a, b) = (self.a, self.b);
        Ok(request.latents.map(|v| a * v + b))
    }
}

/// Echoes the conditioning: `sum(scale * control)` resampled onto the
/// latent grid.
#[derive(Default)]
pub struct ControlEchoDenoiser;

impl Denoiser for ControlEchoDenoiser {
    fn name(&self) -> &str {
        "toy-control-echo"
    }

    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<Tensor4> {
        check_window(self.name(), self.max_window(), request)?;
        let mut out = request.latents.map(|v| 0.0 * v);
        for control in request.controls {
            if control.frames() != out.frames() {
                return Err(Error::Plugin {
                    plugin: self.name().into(),
                    message: format!("{} control is not aligned with the window", control.kind),
                });
            }
            let resampled = resample_control(control, out.frame_dims())?;
            let s = control.conditioning_scale;
            out = out.zip_map(&resampled, "echo", |acc, v| {
                (acc as f64 + s * v as f64) as f32
            })?;
        }
        Ok(out)
    }
}

/// Predicts the noise that would carry the current latents to a flat-shaded
/// target built from the controls: colour-like controls (color, depth) give
/// the base, line-like controls (outline, softedge) darken it, the result is
/// posterized to four levels and nudged by the prompt.
#[derive(Default)]
pub struct ToyToonDenoiser {
    schedule: NoiseSchedule,
}

impl ToyToonDenoiser {
    fn target(&self, request: &DenoiseRequest<'_>) -> Result<Tensor4> {
        let [n, h, w, c] = request.latents.shape();
        let grid = [h, w, 3];
        let mut base = Tensor4::zeros([n, h, w, 3])?;
        let mut total = 0.0f64;
        let mut lines = Tensor4::full([n, h, w, 3], 1.0)?;
        for control in request.controls {
            let s = control.conditioning_scale;
            let r = resample_control(control, grid)?;
            match control.kind {
                ControlKind::Color | ControlKind::Depth => {
                    total += s;
                    base = base.zip_map(&r, "toon", |acc, v| (acc as f64 + s * v as f64) as f32)?;
                }
                ControlKind::Outline => {
                    lines = lines.zip_map(&r, "toon", |f, v| {
                        (f as f64 * (1.0 - s * (1.0 - v as f64))) as f32
                    })?;
                }
                ControlKind::Softedge => {
                    lines = lines
                        .zip_map(&r, "toon", |f, v| (f as f64 * (1.0 - s * v as f64)) as f32)?;
                }
            }
        }
        let base = if total > 0.0 {
            base.map(|v| (v as f64 / total) as f32)
        } else {
            base.map(|_| 0.5)
        };
        let tint = request
            .prompt
            .values()
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
            / request.prompt.values().len() as f64
            * 0.02;
        let rgb = base.zip_map(&lines, "toon", |b, l| {
            let v = ((b * l) as f64 * 4.0).round() / 4.0 + tint;
            v.clamp(0.0, 1.0) as f32
        })?;
        Tensor4::from_fn([n, h, w, c], |i, y, x, k| {
            let v = if k < 3 {
                rgb.get(i, y, x, k) as f64
            } else {
                (0..3).map(|j| LUMA[j] * rgb.get(i, y, x, j) as f64).sum()
            };
            (2.0 * v - 1.0) as f32
        })
    }
}

impl Denoiser for ToyToonDenoiser {
    fn name(&self) -> &str {
        "toy-toon"
    }

    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<Tensor4> {
        check_window(self.name(), self.max_window(), request)?;
        let ab = self.schedule.alpha_bar(Some(request.timestep))?;
        let (signal, sigma) = (ab.sqrt(), (1.0 - ab).sqrt());
        let target = self.target(request)?;
        request.latents.zip_map(&target, "toy-toon", |x, x0| {
            ((x as f64 - signal * x0 as f64) / sigma) as f32
        })
    }
}

/// Hashes each word into a fixed vector. The final "layer" is a `tanh`
/// squashing that clip-skip bypasses.
pub struct ToyTextEncoder {
    dim: usize,
}

impl Default for ToyTextEncoder {
    fn default() -> Self {
        Self { dim: 16 }
    }
}

impl ToyTextEncoder {
    pub const MAX_TOKENS: usize = 77;

    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn name(&self) -> &str {
        "toy-text"
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str, options: &EncoderOptions) -> Result<PromptEmbedding> {
        let mut words: Vec<&str> = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|w| !w.is_empty())
            .take(Self::MAX_TOKENS)
            .collect();
        if words.is_empty() {
            words.push("");
        }
        let mut values = Vec::with_capacity(words.len() * self.dim);
        for word in words {
            let mut block = 0u32;
            let mut bytes = Vec::new();
            while bytes.len() < self.dim * 2 {
                let mut h = Sha256::new();
                h.update(b"toy-text-encoder");
                h.update(block.to_le_bytes());
                h.update(word.as_bytes());
                bytes.extend_from_slice(&h.finalize());
                block += 1;
            }
            for pair in bytes.chunks_exact(2).take(self.dim) {
                let v = u16::from_le_bytes([pair[0], pair[1]]) as f64 / 65535.0 * 2.0 - 1.0;
                let v = if options.clip_skip_final_attention {
                    v
                } else {
                    (1.5 * v).tanh()
                };
                values.push(v as f32);
            }
        }
        PromptEmbedding::new(values, self.dim, EmbeddingSource::PositiveText)
    }
}

/// 8×8 box-average codec with channels `(R, G, B, luma)` mapped to `[-1, 1]`.
pub struct ToyCodec;

impl LatentCodec for ToyCodec {
    fn name(&self) -> &str {
        "toy-codec"
    }

    fn encode(&self, video: &FrameVideo) -> Result<Tensor4> {
        let shape = self.latent_shape(video.len(), video.height(), video.width())?;
        let f = SPATIAL_FACTOR;
        let mut out = Tensor4::zeros(shape)?;
        let [_, h, w, _] = shape;
        for (i, frame) in video.frames().iter().enumerate() {
            let dst = out.frame_mut(i);
            for by in 0..h {
                for bx in 0..w {
                    let mut sum = [0.0f64; 3];
                    for y in by * f..(by + 1) * f {
                        for x in bx * f..(bx + 1) * f {
                            let p = frame.get_pixel(x as u32, y as u32).0;
                            for k in 0..3 {
                                sum[k] += p[k] as f64;
                            }
                        }
                    }
                    let rgb = sum.map(|s| s / (f * f) as f64 / 255.0);
                    let luma: f64 = (0..3).map(|k| LUMA[k] * rgb[k]).sum();
                    let base = (by * w + bx) * 4;
                    for (k, v) in [rgb[0], rgb[1], rgb[2], luma].into_iter().enumerate() {
                        dst[base + k] = (2.0 * v - 1.0) as f32;
                    }
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, latents: &Tensor4, fps: Fps) -> Result<FrameVideo> {
        let [n, h, w, c] = latents.shape();
        if c < 3 {
            return Err(Error::Geometry(format!(
                "toy decode needs at least 3 channels, got {c}"
            )));
        }
        let f = SPATIAL_FACTOR;
        let frames = (0..n)
            .map(|i| {
                RgbImage::from_fn((w * f) as u32, (h * f) as u32, |x, y| {
                    let (by, bx) = (y as usize / f, x as usize / f);
                    let px = |k| {
                        let v = (latents.get(i, by, bx, k) as f64 + 1.0) / 2.0 * 255.0;
                        v.round().clamp(0.0, 255.0) as u8
                    };
                    image::Rgb([px(0), px(1), px(2)])
                })
            })
            .collect();
        FrameVideo::new(frames, fps)
    }
}

fn luma_planes(video: &FrameVideo) -> Vec<Vec<f64>> {
    video
        .frames()
        .iter()
        .map(|f| {
            f.pixels()
                .map(|p| (0..3).map(|k| LUMA[k] * p.0[k] as f64 / 255.0).sum())
                .collect()
        })
        .collect()
}

fn gray_tensor(video: &FrameVideo, planes: Vec<Vec<f64>>) -> Result<Tensor4> {
    let (h, w) = (video.height() as usize, video.width() as usize);
    let mut data = Vec::with_capacity(planes.len() * h * w * 3);
    for plane in planes {
        for v in plane {
            let v = v as f32;
            data.extend_from_slice(&[v, v, v]);
        }
    }
    Tensor4::from_vec([video.len(), h, w, 3], data)
}

/// Sobel gradient magnitude of luma, divided by 4 (a unit step) and clamped.
fn sobel_magnitude(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        plane[y * w + x]
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out.push(((gx * gx + gy * gy).sqrt() / 4.0).min(1.0));
        }
    }
    out
}

/// Outline (lineart convention: white background, dark lines) or softedge
/// (bright edges on black).
pub struct SobelExtractor {
    invert: bool,
}

impl SobelExtractor {
    pub fn outline() -> Self {
        Self { invert: true }
    }

    pub fn softedge() -> Self {
        Self { invert: false }
    }
}

impl ControlExtractor for SobelExtractor {
    fn name(&self) -> &str {
        if self.invert {
            "toy-outline"
        } else {
            "toy-softedge"
        }
    }

    fn extract(&self, video: &FrameVideo) -> Result<Tensor4> {
        let (w, h) = (video.width() as usize, video.height() as usize);
        let planes = luma_planes(video)
            .into_iter()
            .map(|p| {
                let m = sobel_magnitude(&p, w, h);
                if self.invert {
                    m.into_iter().map(|v| 1.0 - v).collect()
                } else {
                    m
                }
            })
            .collect();
        gray_tensor(video, planes)
    }
}

/// Luminance as a stand-in depth map.
pub struct LuminanceDepthExtractor;

impl ControlExtractor for LuminanceDepthExtractor {
    fn name(&self) -> &str {
        "toy-depth"
    }

    fn extract(&self, video: &FrameVideo) -> Result<Tensor4> {
        gray_tensor(video, luma_planes(video))
    }
}

/// 4×4 box blur (taps at offsets -2..=1, edge clamped) for the colour pathway.
pub struct BoxBlurExtractor;

impl ControlExtractor for BoxBlurExtractor {
    fn name(&self) -> &str {
        "toy-color"
    }

    fn extract(&self, video: &FrameVideo) -> Result<Tensor4> {
        let (w, h) = (video.width() as usize, video.height() as usize);
        let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
        let mut data = Vec::with_capacity(video.len() * h * w * 3);
        let mut rows = vec![0u32; w * 3];
        for frame in video.frames() {
            let src = frame.as_raw();
            // horizontal sums, then vertical sums of those
            let hsum: Vec<u32> = (0..h)
                .flat_map(|y| {
                    (0..w * 3).map(move |j| {
                        let (x, k) = (j / 3, j % 3);
                        (-2isize..=1)
                            .map(|dx| src[(y * w + clamp(x as isize + dx, w)) * 3 + k] as u32)
                            .sum::<u32>()
                    })
                })
                .collect();
            for y in 0..h {
                rows.iter_mut().for_each(|r| *r = 0);
                for dy in -2isize..=1 {
                    let yy = clamp(y as isize + dy, h);
                    for (r, v) in rows.iter_mut().zip(&hsum[yy * w * 3..(yy + 1) * w * 3]) {
                        *r += v;
                    }
                }
                data.extend(rows.iter().map(|&s| (s as f64 / (16.0 * 255.0)) as f32));
            }
        }
        Tensor4::from_vec([video.len(), h, w, 3], data)
    }
}

pub fn toy_extractors() -> BTreeMap<ControlKind, Arc<dyn ControlExtractor>> {
    let mut map: BTreeMap<ControlKind, Arc<dyn ControlExtractor>> = BTreeMap::new();
    map.insert(ControlKind::Outline, Arc::new(SobelExtractor::outline()));
    map.insert(ControlKind::Softedge, Arc::new(SobelExtractor::softedge()));
    map.insert(ControlKind::Depth, Arc::new(LuminanceDepthExtractor));
    map.insert(ControlKind::Color, Arc::new(BoxBlurExtractor));
    map
}

/// Centred per-pixel temporal mean over `window` frames, truncated at the
/// ends of the video.
pub struct MovingAveragePostProcessor {
    window: usize,
}

impl MovingAveragePostProcessor {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
        }
    }
}

impl PostProcessor for MovingAveragePostProcessor {
    fn name(&self) -> &str {
        "toy-moving-average"
    }

    fn process(&self, video: &FrameVideo, _config: &FastBlendConfig) -> Result<FrameVideo> {
        let n = video.len();
        let before = (self.window - 1) / 2;
        let after = self.window / 2;
        let frames = video.frames();
        let out = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(before);
                let hi = (i + after).min(n - 1);
                let count = (hi - lo + 1) as f64;
                let mut img = frames[i].clone();
                for (idx, px) in img.as_mut().iter_mut().enumerate() {
                    let sum: f64 = frames[lo..=hi].iter().map(|f| f.as_raw()[idx] as f64).sum();
                    *px = (sum / count).round() as u8;
                }
                img
            })
            .collect();
        FrameVideo::new(out, video.fps())
    }
}

pub struct IdentityPostProcessor;

impl PostProcessor for IdentityPostProcessor {
    fn name(&self) -> &str {
        "identity"
    }

    fn process(&self, video: &FrameVideo, _config: &FastBlendConfig) -> Result<FrameVideo> {
        Ok(video.clone())
    }
}
