//! Frame-major 4-d tensors and the `TNSR` exchange format.
//!
//! Layout is `(frames, height, width, channels)` with channels varying
//! fastest. The on-disk format is:
//!
//! ```text
//! "TNSR" | u32 rank (=4) | u32 N | u32 H | u32 W | u32 C | N*H*W*C f32
//! ```
//!
//! with every integer and float little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_RANK: u32 = 4;
const HEADER_LEN: u64 = 4 + 4 + 16;

#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl std::fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_dims(shape: [usize; 4]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::Shape(format!(
            "dimensions must be positive, got {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("element count overflows for {shape:?}")))
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f32) -> Result<Self> {
        let len = check_dims(shape)?;
        Ok(Self {
            shape,
            data: vec![value; len],
        })
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len = check_dims(shape)?;
        if data.len() != len {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from a per-element function of `(frame, y, x, channel)`.
    pub fn from_fn(
        shape: [usize; 4],
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let len = check_dims(shape)?;
        let [n, h, w, c] = shape;
        let mut data = Vec::with_capacity(len);
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..c {
                        data.push(f(i, y, x, k));
                    }
                }
            }
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    /// `(H, W, C)` of a single frame.
    pub fn frame_dims(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, y: usize, x: usize, k: usize) -> usize {
        ((i * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + k
    }

    #[inline]
    pub fn get(&self, i: usize, y: usize, x: usize, k: usize) -> f32 {
        self.data[self.index(i, y, x, k)]
    }

    /// Data of frame `i` (0-based).
    pub fn frame(&self, i: usize) -> &[f32] {
        let len = self.frame_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.frame_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Copies frames `start..end` (0-based, half-open) into a new tensor.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames() {
            return Err(Error::Shape(format!(
                "frame range {start}..{end} invalid for {} frames",
                self.frames()
            )));
        }
        let len = self.frame_len();
        Ok(Self {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * len..end * len].to_vec(),
        })
    }

    /// Concatenates frame slices that share `(H, W, C)`.
    pub fn stack_frames<'a>(
        frame_dims: [usize; 3],
        frames: impl IntoIterator<Item = &'a [f32]>,
    ) -> Result<Self> {
        let len = frame_dims.iter().product::<usize>();
        let mut data = Vec::new();
        let mut n = 0;
        for f in frames {
            if f.len() != len {
                return Err(Error::Shape(format!(
                    "frame of {} values does not match dims {frame_dims:?}",
                    f.len()
                )));
            }
            data.extend_from_slice(f);
            n += 1;
        }
        Self::from_vec([n, frame_dims[0], frame_dims[1], frame_dims[2]], data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must agree.
    pub fn zip_map(&self, other: &Self, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.ensure_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ensure_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner
            .write_all(bytes)
            .map_err(|source| Error::TensorWrite {
                offset: self.written,
                source,
            })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

/// Serializes `t` in the `TNSR` format.
pub fn write_tensor<W: Write>(t: &Tensor4, destination: W) -> Result<()> {
    let mut out = CountingWriter {
        inner: destination,
        written: 0,
    };
    out.put(TENSOR_MAGIC)?;
    out.put(&TENSOR_RANK.to_le_bytes())?;
    for &d in &t.shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
        out.put(&d.to_le_bytes())?;
    }
    const CHUNK: usize = 16 * 1024;
    let mut buf = Vec::with_capacity(CHUNK * 4);
    for chunk in t.data.chunks(CHUNK) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.put(&buf)?;
    }
    out.inner.flush().map_err(|source| Error::TensorWrite {
        offset: out.written,
        source,
    })
}

fn read_header_u32<R: Read>(source: &mut R, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    source
        .read_exact(&mut b)
        .map_err(|e| Error::Format(format!("header truncated reading {field}: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Parses a `TNSR` stream; exact inverse of [`write_tensor`].
pub fn read_tensor<R: Read>(mut source: R) -> Result<Tensor4> {
    let mut magic = [0u8; 4];
    source
        .read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("header truncated reading magic: {e}")))?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"TNSR\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let rank = read_header_u32(&mut source, "rank")?;
    if rank != TENSOR_RANK {
        return Err(Error::Format(format!("field rank: expected 4, got {rank}")));
    }
    let mut shape = [0usize; 4];
    for (slot, name) in shape.iter_mut().zip(["N", "H", "W", "C"]) {
        *slot = read_header_u32(&mut source, name)? as usize;
        if *slot == 0 {
            return Err(Error::Format(format!(
                "field {name}: dimension must be positive"
            )));
        }
    }
    let len = check_dims(shape).map_err(|e| Error::Format(e.to_string()))?;
    let expected = (len as u64)
        .checked_mul(4)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let mut bytes = Vec::new();
    source
        .by_ref()
        .take(expected)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading tensor payload", e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            expected: HEADER_LEN + expected,
            actual: HEADER_LEN + bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor4 { shape, data })
}

pub fn write_tensor_file(t: &Tensor4, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_tensor(t, std::io::BufWriter::new(f))
}

pub fn read_tensor_file(path: &std::path::Path) -> Result<Tensor4> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_tensor(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(t: &Tensor4) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensor(t, &mut buf).unwrap();
        buf
    }

    #[test]
    fn zero_scalar_is_28_bytes() {
        let buf = encode(&Tensor4::zeros([1, 1, 1, 1]).unwrap());
        assert_eq!(buf.len(), 28);
        assert_eq!(&buf[..4], b"TNSR");
        assert_eq!(&buf[24..], &[0, 0, 0, 0]);
    }

    #[test]
    fn one_encodes_as_ieee754() {
        let buf = encode(&Tensor4::full([1, 1, 1, 1], 1.0).unwrap());
        // sign 0, exponent 127, mantissa 0 -> 0x3F800000, little-endian
        let oracle = (127u32 << 23).to_le_bytes();
        assert_eq!(&buf[24..], &oracle);
        assert_eq!(&buf[24..], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn header_layout() {
        let buf = encode(&Tensor4::zeros([2, 3, 5, 7]).unwrap());
        let words: Vec<u32> = buf[4..24]
            .chunks(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![4, 2, 3, 5, 7]);
        assert_eq!(buf.len(), 24 + 2 * 3 * 5 * 7 * 4);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut buf = encode(&Tensor4::zeros([1, 1, 1, 1]).unwrap());
        buf[..4].copy_from_slice(b"XXXX");
        let err = read_tensor(&buf[..]).unwrap_err();
        assert!(
            matches!(err, Error::Format(ref m) if m.contains("magic")),
            "{err}"
        );
    }

    #[test]
    fn wrong_rank_names_field() {
        let mut buf = encode(&Tensor4::zeros([1, 1, 1, 1]).unwrap());
        buf[4..8].copy_from_slice(&3u32.to_le_bytes());
        let err = read_tensor(&buf[..]).unwrap_err();
        assert!(
            matches!(err, Error::Format(ref m) if m.contains("rank")),
            "{err}"
        );
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let buf = encode(&Tensor4::zeros([1, 2, 2, 1]).unwrap());
        let err = read_tensor(&buf[..buf.len() - 3]).unwrap_err();
        match err {
            Error::Length { expected, actual } => {
                assert_eq!(expected, 24 + 16);
                assert_eq!(actual, 24 + 13);
            }
            other => panic!("unexpected {other}"),
        }
    }

    struct FailAfter(usize);
    impl Write for FailAfter {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            if self.0 == 0 {
                return Err(std::io::Error::other("disk full"));
            }
            let n = buf.len().min(self.0);
            self.0 -= n;
            Ok(n)
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn write_failure_reports_offset() {
        let t = Tensor4::zeros([1, 1, 1, 4]).unwrap();
        let err = write_tensor(&t, FailAfter(8)).unwrap_err();
        assert!(matches!(err, Error::TensorWrite { offset: 8, .. }), "{err}");
    }

    #[test]
    fn random_small_round_trip() {
        let t = Tensor4::from_fn([2, 2, 2, 3], |i, y, x, k| {
            ((i * 31 + y * 7 + x * 3 + k) as f32).sin() * 1e3
        })
        .unwrap();
        let back = read_tensor(&encode(&t)[..]).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn large_round_trip() {
        let shape = [10, 100, 100, 100]; // 10^7 elements
        let t = Tensor4::from_fn(shape, |i, y, x, k| (i + y * x) as f32 - k as f32 * 0.25).unwrap();
        let back = read_tensor(&encode(&t)[..]).unwrap();
        assert!(back == t);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            n in 1usize..4, h in 1usize..6, w in 1usize..6, c in 1usize..5,
            seed in any::<u32>(),
        ) {
            let t = Tensor4::from_fn([n, h, w, c], |i, y, x, k| {
                let bits = seed
                    .wrapping_mul(2654435761)
                    .wrapping_add((((i * 7 + y) * 13 + x) * 17 + k) as u32 * 40503);
                let v = f32::from_bits(bits);
                if v.is_finite() { v } else { 0.0 }
            }).unwrap();
            let back = read_tensor(&encode(&t)[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
