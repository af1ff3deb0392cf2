//! Classifier-free guidance and prompt embeddings.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{EncoderOptions, TextEncoder};
use crate::tensor::{read_tensor_file, Tensor4};

/// Token count of the negative textual-inversion embedding.
pub const NEGATIVE_TOKENS: usize = 10;
pub const DEFAULT_CFG_SCALE: f64 = 7.0;
pub const DEFAULT_POSITIVE_PROMPT: &str = "best quality, perfect anime illustration";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    PositiveText,
    NegativeInversion,
    Zero,
}

impl EmbeddingSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmbeddingSource::PositiveText => "positive-text",
            EmbeddingSource::NegativeInversion => "negative-inversion",
            EmbeddingSource::Zero => "zero",
        }
    }
}

/// Token embeddings, row-major `tokens × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    values: Vec<f32>,
    dim: usize,
    source: EmbeddingSource,
}

impl PromptEmbedding {
    pub fn new(values: Vec<f32>, dim: usize, source: EmbeddingSource) -> Result<Self> {
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "embedding of {} values is not a positive multiple of dim {dim}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            dim,
            source,
        })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Result<Self> {
        Self::new(vec![0.0; tokens * dim], dim, EmbeddingSource::Zero)
    }

    pub fn tokens(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn token(&self, k: usize) -> &[f32] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Exchange layout `(1, tokens, 1, dim)`.
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec([1, self.tokens(), 1, self.dim], self.values.clone())
            .expect("embedding dims are consistent")
    }

    pub fn from_tensor(t: &Tensor4, source: EmbeddingSource) -> Result<Self> {
        let [n, tokens, w, dim] = t.shape();
        if n != 1 || w != 1 {
            return Err(Error::Format(format!(
                "embedding tensor must have shape (1, tokens, 1, dim), got {:?}",
                t.shape()
            )));
        }
        debug_assert!(tokens >= 1);
        Self::new(t.data().to_vec(), dim, source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub clip_skip_final_attention: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_CFG_SCALE,
            clip_skip_final_attention: true,
        }
    }
}

/// `g * e_pos + (1 - g) * e_neg`, evaluated in f64.
pub fn apply_cfg(e_pos: &Tensor4, e_neg: &Tensor4, g: f64) -> Result<Tensor4> {
    if !g.is_finite() {
        return Err(Error::Parameter(format!(
            "guidance scale must be finite, got {g}"
        )));
    }
    let h = 1.0 - g;
    e_pos.zip_map(e_neg, "apply_cfg", |p, n| {
        (g * p as f64 + h * n as f64) as f32
    })
}

/// Positive embedding from the encoder; negative from a 10-token inversion
/// file, or zeros when no file is given.
pub fn encode_prompts(
    encoder: &dyn TextEncoder,
    positive_text: &str,
    negative_embedding_file: Option<&Path>,
    config: &GuidanceConfig,
) -> Result<(PromptEmbedding, PromptEmbedding)> {
    let options = EncoderOptions {
        clip_skip_final_attention: config.clip_skip_final_attention,
    };
    let positive = encoder.encode(positive_text, &options)?;
    let negative = match negative_embedding_file {
        None => PromptEmbedding::zeros(NEGATIVE_TOKENS, encoder.embedding_dim())?,
        Some(path) => load_negative_embedding(path, encoder.embedding_dim())?,
    };
    Ok((positive, negative))
}

pub fn load_negative_embedding(path: &Path, dim: usize) -> Result<PromptEmbedding> {
    let t = read_tensor_file(path)?;
    let [n, tokens, w, d] = t.shape();
    if n != 1 || w != 1 {
        return Err(Error::Format(format!(
            "{}: negative embedding must have shape (1, 10, 1, D), got {:?}",
            path.display(),
            t.shape()
        )));
    }
    if tokens != NEGATIVE_TOKENS {
        return Err(Error::Format(format!(
            "{}: expected 10 tokens, got {tokens}",
            path.display()
        )));
    }
    if d != dim {
        return Err(Error::Format(format!(
            "{}: embedding dim {d} does not match text encoder dim {dim}",
            path.display()
        )));
    }
    PromptEmbedding::from_tensor(&t, EmbeddingSource::NegativeInversion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::toy::ToyTextEncoder;
    use crate::tensor::write_tensor_file;
    use proptest::prelude::*;

    fn scalar(v: f32) -> Tensor4 {
        Tensor4::full([1, 1, 1, 1], v).unwrap()
    }

    fn tensor(seed: u32) -> Tensor4 {
        Tensor4::from_fn([2, 3, 2, 4], |i, y, x, k| {
            (((i * 24 + y * 8 + x * 4 + k) as u32 ^ seed) % 97) as f32 / 13.0 - 3.0
        })
        .unwrap()
    }

    #[test]
    fn cfg_examples() {
        let (p, n) = (tensor(1), tensor(2));
        assert_eq!(apply_cfg(&p, &n, 1.0).unwrap(), p);
        assert_eq!(apply_cfg(&p, &n, 0.0).unwrap(), n);
        assert_eq!(
            apply_cfg(&scalar(1.0), &scalar(0.5), 7.0).unwrap().data()[0],
            4.0
        );
        assert!(apply_cfg(&p, &scalar(0.0), 7.0).is_err());
        assert!(apply_cfg(&p, &n, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn cfg_is_homogeneous(a in -4.0f32..4.0, g in -10.0f64..10.0, seed in any::<u32>()) {
            let (x, y) = (tensor(seed), tensor(seed.wrapping_add(1)));
            let lhs = apply_cfg(&x.map(|v| a * v), &y.map(|v| a * v), g).unwrap();
            let rhs = apply_cfg(&x, &y, g).unwrap().map(|v| a * v);
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-6 * (1.0 + r.abs()) * (1.0 + g.abs() as f32));
            }
        }

        #[test]
        fn cfg_of_equal_sides_is_identity(g in -20.0f64..20.0, seed in any::<u32>()) {
            let x = tensor(seed);
            let out = apply_cfg(&x, &x, g).unwrap();
            for (o, v) in out.data().iter().zip(x.data()) {
                prop_assert!((o - v).abs() <= 1e-6 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn absent_negative_is_ten_zero_tokens() {
        let enc = ToyTextEncoder::default();
        let (pos, neg) =
            encode_prompts(&enc, "best quality", None, &GuidanceConfig::default()).unwrap();
        assert_eq!(pos.source(), EmbeddingSource::PositiveText);
        assert_eq!(neg.tokens(), 10);
        assert_eq!(neg.dim(), enc.embedding_dim());
        assert!(neg.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic_and_clip_skip_forwarded() {
        let enc = ToyTextEncoder::default();
        let cfg = GuidanceConfig::default();
        let a = encode_prompts(&enc, "perfect anime illustration", None, &cfg)
            .unwrap()
            .0;
        let b = encode_prompts(&enc, "perfect anime illustration", None, &cfg)
            .unwrap()
            .0;
        assert_eq!(a, b);
        let no_skip = GuidanceConfig {
            clip_skip_final_attention: false,
            ..cfg
        };
        let c = encode_prompts(&enc, "perfect anime illustration", None, &no_skip)
            .unwrap()
            .0;
        assert_ne!(a, c);
    }

    #[test]
    fn negative_file_token_count_checked() {
        let dir = tempfile::tempdir().unwrap();
        let enc = ToyTextEncoder::default();
        let dim = enc.embedding_dim();
        let cfg = GuidanceConfig::default();

        let eight = dir.path().join("eight.tnsr");
        write_tensor_file(&Tensor4::full([1, 8, 1, dim], 0.5).unwrap(), &eight).unwrap();
        let err = encode_prompts(&enc, "x", Some(&eight), &cfg).unwrap_err();
        assert!(err.to_string().contains("expected 10 tokens"), "{err}");

        let ten = dir.path().join("ten.tnsr");
        write_tensor_file(&Tensor4::full([1, 10, 1, dim], 0.5).unwrap(), &ten).unwrap();
        let (_, neg) = encode_prompts(&enc, "x", Some(&ten), &cfg).unwrap();
        assert_eq!(neg.source(), EmbeddingSource::NegativeInversion);
        assert_eq!(neg.token(9), vec![0.5; dim].as_slice());

        let wrong_dim = dir.path().join("dim.tnsr");
        write_tensor_file(
            &Tensor4::full([1, 10, 1, dim + 1], 0.5).unwrap(),
            &wrong_dim,
        )
        .unwrap();
        assert!(encode_prompts(&enc, "x", Some(&wrong_dim), &cfg).is_err());
    }
}
