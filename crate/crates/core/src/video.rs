//! 8-bit RGB frame sequences and numbered PNG directories.

use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Frame rate as a positive rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fps {
    pub num: u32,
    pub den: u32,
}

impl Default for Fps {
    fn default() -> Self {
        Self { num: 30, den: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameVideo {
    frames: Vec<RgbImage>,
    fps: Fps,
}

impl FrameVideo {
    pub fn new(frames: Vec<RgbImage>, fps: Fps) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Parameter("a video needs at least one frame".into()))?;
        let dims = first.dimensions();
        if dims.0 == 0 || dims.1 == 0 {
            return Err(Error::Geometry("frames must be non-empty".into()));
        }
        if let Some(pos) = frames.iter().position(|f| f.dimensions() != dims) {
            return Err(Error::DimensionMismatch {
                file: PathBuf::from(format!("frame #{}", pos + 1)),
                expected: dims,
                actual: frames[pos].dimensions(),
            });
        }
        if fps.num == 0 || fps.den == 0 {
            return Err(Error::Parameter("fps must be a positive rational".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<RgbImage> {
        self.frames
    }

    pub fn fps(&self) -> Fps {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.frames[0].width()
    }

    pub fn height(&self) -> u32 {
        self.frames[0].height()
    }

    /// Frames as `(N, H, W, 3)` with channel values scaled to `[0, 1]`.
    pub fn to_unit_tensor(&self) -> Tensor4 {
        let (w, h) = (self.width() as usize, self.height() as usize);
        let mut data = Vec::with_capacity(self.len() * w * h * 3);
        for f in &self.frames {
            data.extend(f.as_raw().iter().map(|&v| v as f32 / 255.0));
        }
        Tensor4::from_vec([self.len(), h, w, 3], data).expect("dims are consistent")
    }

    /// Inverse of [`to_unit_tensor`](Self::to_unit_tensor). Single-channel tensors
    /// are broadcast to gray; extra channels beyond three are ignored.
    pub fn from_unit_tensor(t: &Tensor4, fps: Fps) -> Result<Self> {
        let [n, h, w, c] = t.shape();
        let frames = (0..n)
            .map(|i| {
                let src = t.frame(i);
                RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let base = (y as usize * w + x as usize) * c;
                    let px = |k: usize| {
                        let v = src[base + k.min(c - 1)];
                        (v.clamp(0.0, 1.0) * 255.0).round() as u8
                    };
                    image::Rgb([px(0), px(1), px(2)])
                })
            })
            .collect();
        Self::new(frames, fps)
    }

    /// Bilinear resample of every frame to `width × height` (pixel-center aligned,
    /// edge clamped). Returns a clone when the size already matches.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry("target size must be positive".into()));
        }
        if (width, height) == (self.width(), self.height()) {
            return Ok(self.clone());
        }
        let frames = self
            .frames
            .iter()
            .map(|f| resize_frame(f, width, height))
            .collect();
        Self::new(frames, self.fps)
    }
}

fn resize_frame(src: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (sw, sh) = src.dimensions();
    let taps = |dst: u32, len: u32| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / dst as f64;
        (0..dst)
            .map(|d| {
                let p = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = p.floor() as usize;
                (i0, (i0 + 1).min(len as usize - 1), p - i0 as f64)
            })
            .collect()
    };
    let (xs, ys) = (taps(width, sw), taps(height, sh));
    let raw = src.as_raw();
    let row = sw as usize * 3;
    let mut out = Vec::with_capacity(width as usize * height as usize * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for k in 0..3 {
                let p = |xx: usize, yy: usize| raw[yy * row + xx * 3 + k] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::from_raw(width, height, out).expect("buffer matches dimensions")
}

/// Naming scheme for frame files: zero-padded, 1-based index plus extension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePattern {
    pub digits: usize,
    pub extension: String,
}

impl Default for FramePattern {
    fn default() -> Self {
        Self {
            digits: 5,
            extension: "png".into(),
        }
    }
}

impl FramePattern {
    pub fn file_name(&self, index: usize) -> String {
        format!("{index:0width$}.{}", self.extension, width = self.digits)
    }

    fn parse(&self, name: &str) -> Option<usize> {
        let stem = name.strip_suffix(&format!(".{}", self.extension))?;
        if stem.len() != self.digits || !stem.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        stem.parse().ok()
    }
}

pub fn load_frames(dir: &Path) -> Result<FrameVideo> {
    load_frames_with(dir, &FramePattern::default())
}

/// Loads `00001.png, 00002.png, ...` from `dir`. Files not matching the
/// pattern are ignored; the matching indices must run from 1 without gaps.
pub fn load_frames_with(dir: &Path, pattern: &FramePattern) -> Result<FrameVideo> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("reading directory {}", dir.display()), e))?;
    let mut indexed = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let name = entry.file_name();
        if let Some(idx) = name.to_str().and_then(|n| pattern.parse(n)) {
            if entry.path().is_file() {
                indexed.push((idx, entry.path()));
            }
        }
    }
    indexed.sort();
    if indexed.is_empty() {
        return Err(Error::Sequence {
            missing: format!("{} in {}", pattern.file_name(1), dir.display()),
        });
    }
    for (expected, (idx, _)) in (1..).zip(&indexed) {
        if *idx != expected {
            return Err(Error::Sequence {
                missing: pattern.file_name(expected),
            });
        }
    }

    let mut frames: Vec<RgbImage> = Vec::with_capacity(indexed.len());
    for (_, path) in &indexed {
        let img = image::open(path)?.to_rgb8();
        if let Some(first) = frames.first() {
            if img.dimensions() != first.dimensions() {
                return Err(Error::DimensionMismatch {
                    file: path.clone(),
                    expected: first.dimensions(),
                    actual: img.dimensions(),
                });
            }
        }
        frames.push(img);
    }
    FrameVideo::new(frames, Fps::default())
}

pub fn save_frames(video: &FrameVideo, dir: &Path) -> Result<()> {
    save_frames_with(video, dir, &FramePattern::default())
}

pub fn save_frames_with(video: &FrameVideo, dir: &Path, pattern: &FramePattern) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (i, frame) in video.frames().iter().enumerate() {
        frame.save(dir.join(pattern.file_name(i + 1)))?;
    }
    Ok(())
}
