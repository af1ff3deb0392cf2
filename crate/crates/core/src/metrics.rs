//! Flow-warped temporal consistency.
//!
//! Flow files hold the displacement from frame `i` to frame `i + 1`:
//! `"FLO1"`, `u32` LE height, `u32` LE width, then `height * width` pairs of
//! `f32` LE `(dx, dy)`. Pair `i` lives in `{i:05}.flo` (1-based).

use std::io::{Read, Write};
use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::video::FrameVideo;

pub const FLOW_MAGIC: &[u8; 4] = b"FLO1";
pub const FLOW_EXTENSION: &str = "flo";

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: u32,
    height: u32,
    /// Row-major `(dx, dy)` in pixels.
    vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn new(width: u32, height: u32, vectors: Vec<[f32; 2]>) -> Result<Self> {
        if vectors.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "{} flow vectors for a {width}x{height} grid",
                vectors.len()
            )));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format(
                "flow contains non-finite displacements".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            vectors,
        })
    }

    pub fn uniform(width: u32, height: u32, dx: f32, dy: f32) -> Result<Self> {
        Self::new(
            width,
            height,
            vec![[dx, dy]; width as usize * height as usize],
        )
    }

    pub fn zero(width: u32, height: u32) -> Self {
        Self::uniform(width, height, 0.0, 0.0).expect("uniform grid is consistent")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn at(&self, x: u32, y: u32) -> [f32; 2] {
        self.vectors[(y * self.width + x) as usize]
    }
}

pub fn flow_file_name(pair: usize) -> String {
    format!("{pair:05}.{FLOW_EXTENSION}")
}

pub fn write_flow<W: Write>(flow: &FlowField, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + flow.vectors.len() * 8);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&flow.height.to_le_bytes());
    buf.extend_from_slice(&flow.width.to_le_bytes());
    for [dx, dy] in &flow.vectors {
        buf.extend_from_slice(&dx.to_le_bytes());
        buf.extend_from_slice(&dy.to_le_bytes());
    }
    out.write_all(&buf)
        .map_err(|e| Error::io("writing flow", e))
}

pub fn read_flow<R: Read>(mut src: R) -> Result<FlowField> {
    let mut bytes = Vec::new();
    src.read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading flow", e))?;
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(Error::Format("not a FLO1 flow file".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (height, width) = (u32_at(4), u32_at(8));
    let expected = 12 + width as u64 * height as u64 * 8;
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let vectors = bytes[12..]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..].try_into().unwrap()),
            ]
        })
        .collect();
    FlowField::new(width, height, vectors)
}

pub fn write_flow_file(flow: &FlowField, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_flow(flow, std::io::BufWriter::new(f))
}

pub fn read_flow_file(path: &Path) -> Result<FlowField> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_flow(std::io::BufReader::new(f))
}

/// Loads `00001.flo ..` for `frames - 1` adjacent pairs.
pub fn load_flows(dir: &Path, frames: usize) -> Result<Vec<FlowField>> {
    (1..frames)
        .map(|i| {
            let path = dir.join(flow_file_name(i));
            if !path.is_file() {
                return Err(Error::MissingFlow {
                    pair: format!("{i} -> {} ({})", i + 1, path.display()),
                });
            }
            read_flow_file(&path)
        })
        .collect()
}

/// A frame in 0–255 units, row-major RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedFrame {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl WarpedFrame {
    pub fn from_image(img: &RgbImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn get(&self, x: u32, y: u32, c: usize) -> f64 {
        self.data[(y * self.width + x) as usize * 3 + c]
    }
}

/// Output pixel `(x, y)` is the source sampled bilinearly at
/// `(x + dx, y + dy)`, with coordinates clamped to the image.
pub fn warp(frame: &RgbImage, flow: &FlowField) -> Result<WarpedFrame> {
    let (w, h) = frame.dimensions();
    if (flow.width, flow.height) != (w, h) {
        return Err(Error::Shape(format!(
            "flow is {}x{}, frame is {w}x{h}",
            flow.width, flow.height
        )));
    }
    let src = frame.as_raw();
    let px = |x: usize, y: usize, c: usize| src[(y * w as usize + x) * 3 + c] as f64;
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let [dx, dy] = flow.at(x, y);
            let sx = (x as f64 + dx as f64).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + dy as f64).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let (x1, y1) = ((x0 + 1).min(w as usize - 1), (y0 + 1).min(h as usize - 1));
            for c in 0..3 {
                let v = if fx == 0.0 && fy == 0.0 {
                    px(x0, y0, c)
                } else {
                    let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                    let bottom = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                    top * (1.0 - fy) + bottom * fy
                };
                data.push(v);
            }
        }
    }
    Ok(WarpedFrame {
        width: w,
        height: h,
        data,
    })
}

/// Mean squared difference between each warped frame and its successor,
/// over all pairs, pixels and channels, in 0–255 units.
pub fn pixel_mse(video: &FrameVideo, flows: &[FlowField]) -> Result<f64> {
    pixel_mse_interior(video, flows, 0)
}

/// [`pixel_mse`] ignoring a `border`-pixel band around each frame.
pub fn pixel_mse_interior(video: &FrameVideo, flows: &[FlowField], border: u32) -> Result<f64> {
    let n = video.len();
    if n < 2 {
        return Err(Error::InsufficientFrames(n));
    }
    if flows.len() < n - 1 {
        let i = flows.len() + 1;
        return Err(Error::MissingFlow {
            pair: format!("{i} -> {}", i + 1),
        });
    }
    let (w, h) = (video.width(), video.height());
    if 2 * border >= w || 2 * border >= h {
        return Err(Error::Shape(format!(
            "border {border} leaves no interior in {w}x{h}"
        )));
    }
    let frames = video.frames();
    let mut total = 0.0f64;
    let mut count = 0u64;
    for (i, flow) in flows.iter().take(n - 1).enumerate() {
        let warped = warp(&frames[i], flow)?;
        let target = &frames[i + 1];
        for y in border..h - border {
            for x in border..w - border {
                let t = target.get_pixel(x, y).0;
                for (c, &tv) in t.iter().enumerate() {
                    let d = warped.get(x, y, c) - tv as f64;
                    total += d * d;
                }
                count += 3;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::Fps;
    use image::Rgb;
    use proptest::prelude::*;

    fn pattern(w: u32, h: u32, shift: i64) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let u = x as i64 + shift;
            Rgb([
                ((u * 37 + y as i64 * 11).rem_euclid(256)) as u8,
                ((u * u + 3 * y as i64).rem_euclid(256)) as u8,
                ((u * 5 + y as i64 * y as i64).rem_euclid(256)) as u8,
            ])
        })
    }

    fn video(frames: Vec<RgbImage>) -> FrameVideo {
        FrameVideo::new(frames, Fps::default()).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = pattern(9, 7, 0);
        let out = warp(&img, &FlowField::zero(9, 7)).unwrap();
        assert_eq!(out, WarpedFrame::from_image(&img));
    }

    #[test]
    fn translation_recovered_in_interior() {
        let a = pattern(12, 6, 0);
        // content moved left by one pixel
        let b = pattern(12, 6, 1);
        let out = warp(&a, &FlowField::uniform(12, 6, 1.0, 0.0).unwrap()).unwrap();
        for y in 0..6 {
            for x in 0..11 {
                for c in 0..3 {
                    assert_eq!(out.get(x, y, c), b.get_pixel(x, y).0[c] as f64);
                }
            }
        }
        let v = video(vec![a, b]);
        let flows = [FlowField::uniform(12, 6, 1.0, 0.0).unwrap()];
        assert!(pixel_mse_interior(&v, &flows, 1).unwrap() < 1e-6);
    }

    #[test]
    fn far_flow_clamps() {
        let img = pattern(5, 4, 0);
        let out = warp(&img, &FlowField::uniform(5, 4, 1e6, -1e6).unwrap()).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.get(x, y, 0), img.get_pixel(4, 0).0[0] as f64);
            }
        }
    }

    #[test]
    fn bilinear_midpoint() {
        let img = RgbImage::from_fn(2, 1, |x, _| Rgb([if x == 0 { 10 } else { 20 }; 3]));
        let out = warp(&img, &FlowField::uniform(2, 1, 0.5, 0.0).unwrap()).unwrap();
        assert_eq!(out.get(0, 0, 0), 15.0);
        assert_eq!(out.get(1, 0, 0), 20.0);
    }

    #[test]
    fn mse_examples() {
        let flat = RgbImage::from_pixel(6, 5, Rgb([40, 90, 200]));
        let v = video(vec![flat.clone(); 4]);
        assert_eq!(pixel_mse(&v, &vec![FlowField::zero(6, 5); 3]).unwrap(), 0.0);

        let brighter = RgbImage::from_pixel(6, 5, Rgb([50, 100, 210]));
        let v = video(vec![flat.clone(), brighter]);
        assert_eq!(pixel_mse(&v, &[FlowField::zero(6, 5)]).unwrap(), 100.0);

        let one = video(vec![flat.clone()]);
        assert!(matches!(
            pixel_mse(&one, &[]),
            Err(Error::InsufficientFrames(1))
        ));
        let v = video(vec![flat.clone(); 3]);
        assert!(matches!(
            pixel_mse(&v, &[FlowField::zero(6, 5)]),
            Err(Error::MissingFlow { .. })
        ));
        assert!(warp(&flat, &FlowField::zero(5, 5)).is_err());
    }

    #[test]
    fn flow_round_trip_and_layout() {
        let flow = FlowField::new(2, 1, vec![[1.5, -2.0], [0.0, 0.25]]).unwrap();
        let mut buf = Vec::new();
        write_flow(&flow, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FLO1");
        assert_eq!(&buf[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 12 + 16);
        assert_eq!(read_flow(buf.as_slice()).unwrap(), flow);
        assert!(read_flow(&buf[..20]).is_err());
        assert!(read_flow(&b"FLO2\0\0\0\0\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn missing_flow_file_named() {
        let dir = tempfile::tempdir().unwrap();
        write_flow_file(&FlowField::zero(2, 2), &dir.path().join("00001.flo")).unwrap();
        let err = load_flows(dir.path(), 3).unwrap_err();
        assert!(err.to_string().contains("2 -> 3"), "{err}");
        assert_eq!(load_flows(dir.path(), 2).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn mse_invariant_to_channel_permutation_and_padding(seed in 0i64..50, perm in 0usize..6) {
            let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let o = orders[perm];
            let frames = vec![pattern(7, 5, seed), pattern(7, 5, seed + 3), pattern(7, 5, seed * 2)];
            let permuted: Vec<RgbImage> = frames
                .iter()
                .map(|f| RgbImage::from_fn(7, 5, |x, y| {
                    let p = f.get_pixel(x, y).0;
                    Rgb([p[o[0]], p[o[1]], p[o[2]]])
                }))
                .collect();
            let flows = vec![FlowField::uniform(7, 5, 0.5, -0.25).unwrap(); 2];
            let a = pixel_mse(&video(frames.clone()), &flows).unwrap();
            let b = pixel_mse(&video(permuted), &flows).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));

            let mut padded = frames.clone();
            padded.push(frames[2].clone());
            let mut pflows = flows.clone();
            pflows.push(FlowField::zero(7, 5));
            let c = pixel_mse(&video(padded), &pflows).unwrap();
            prop_assert!((c - a * 2.0 / 3.0).abs() <= 1e-9 * a.max(1.0));
        }
    }
}
