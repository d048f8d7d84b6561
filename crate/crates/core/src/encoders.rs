//! Visual and text encoders.
//!
//! Both encoders are trait objects looked up by registry key, so an adapter
//! for an external pre-trained backbone can replace the desk-scale defaults as
//! long as it honors the same shape contracts. Weight loading for such
//! adapters is left to the adapter.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DESK_CONV: &str = "desk-conv";
pub const HASH_MLP: &str = "hash-mlp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub visual_arch: String,
    pub text_arch: String,
    /// Feature channels `C`, shared by visual features and text embeddings.
    pub channels: usize,
    /// Image pixels per feature cell; a power of two for the desk encoder.
    pub stride: usize,
    /// Width of the first convolution stage; later stages double it.
    pub base_width: usize,
    /// Prompt token width `D_tok`.
    pub token_dim: usize,
    /// Maximum prompt length accepted by the text encoder.
    pub context_limit: usize,
    /// Tokens produced by the tokenizer for one part label.
    pub n_text: usize,
    pub text_hidden: usize,
    /// Seed of the fixed text-encoder weights.
    pub text_seed: u64,
    /// Longest label text, in characters, before truncation.
    pub text_char_limit: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            visual_arch: DESK_CONV.into(),
            text_arch: HASH_MLP.into(),
            channels: 64,
            stride: 8,
            base_width: 16,
            token_dim: 32,
            context_limit: 16,
            n_text: 4,
            text_hidden: 64,
            text_seed: 0x7e47,
            text_char_limit: 32,
        }
    }
}

/// Dense visual features `[C, H, W]` and the stride that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

pub trait VisualEncoder: Send + Sync {
    fn key(&self) -> &str;
    fn channels(&self) -> usize;
    fn stride(&self) -> usize;
    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore);
    /// Encodes a `[3, h, w]` image whose sides are multiples of the stride.
    fn forward(&self, tape: &mut Tape, params: &ParamStore, image: &Tensor) -> Result<Var>;
}

pub trait TextEncoder: Send + Sync {
    fn key(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn token_dim(&self) -> usize;
    fn context_limit(&self) -> usize;
    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore);
    /// Maps `[len, token_dim]` prompt tokens to a `[output_dim]` embedding.
    fn forward(&self, tape: &mut Tape, params: &ParamStore, tokens: Var, trainable: bool)
        -> Result<Var>;
}

/// Strided convolution stack with a linear 1×1 alignment head.
///
/// `log2(stride)` stages of 3×3 stride-2 convolutions with ReLU, one 3×3
/// context convolution at the final resolution, then a 1×1 projection to
/// `channels` without activation.
pub struct DeskConvEncoder {
    channels: usize,
    stride: usize,
    widths: Vec<usize>,
}

impl DeskConvEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        if !config.stride.is_power_of_two() || config.stride < 2 {
            return Err(Error::Config(format!(
                "desk encoder stride must be a power of two ≥ 2, got {}",
                config.stride
            )));
        }
        if config.channels == 0 || config.base_width == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        let stages = config.stride.trailing_zeros() as usize;
        let widths = (0..stages).map(|i| config.base_width << i).collect();
        Ok(Self {
            channels: config.channels,
            stride: config.stride,
            widths,
        })
    }
}

const PIXEL_MEAN: f64 = 0.5;
const PIXEL_SCALE: f64 = 4.0;

impl VisualEncoder for DeskConvEncoder {
    fn key(&self) -> &str {
        DESK_CONV
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore) {
        let mut cin = 3;
        for (i, &w) in self.widths.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.insert(format!("encoder.conv{i}.w"), Tensor::randn(rng, &[w, cin, 3, 3], std));
            params.insert(format!("encoder.conv{i}.b"), Tensor::zeros(&[w]));
            cin = w;
        }
        let std = (2.0 / (cin * 9) as f64).sqrt();
        params.insert("encoder.context.w", Tensor::randn(rng, &[cin, cin, 3, 3], std));
        params.insert("encoder.context.b", Tensor::zeros(&[cin]));
        let std = 1.0 / ((cin * self.channels) as f64).sqrt();
        params.insert(
            "encoder.head.w",
            Tensor::randn(rng, &[self.channels, cin, 1, 1], std),
        );
        params.insert("encoder.head.b", Tensor::zeros(&[self.channels]));
    }

    fn forward(&self, tape: &mut Tape, params: &ParamStore, image: &Tensor) -> Result<Var> {
        let normalized: Vec<f64> = image
            .data()
            .iter()
            .map(|v| (v - PIXEL_MEAN) * PIXEL_SCALE)
            .collect();
        let mut x = tape.constant(Tensor::from_vec(image.shape(), normalized)?);
        for i in 0..self.widths.len() {
            let w = params.leaf(tape, &format!("encoder.conv{i}.w"), true)?;
            let b = params.leaf(tape, &format!("encoder.conv{i}.b"), true)?;
            x = tape.conv2d(x, w, b, 2, 1)?;
            x = tape.relu(x);
        }
        let w = params.leaf(tape, "encoder.context.w", true)?;
        let b = params.leaf(tape, "encoder.context.b", true)?;
        x = tape.conv2d(x, w, b, 1, 1)?;
        x = tape.relu(x);
        let w = params.leaf(tape, "encoder.head.w", true)?;
        let b = params.leaf(tape, "encoder.head.b", true)?;
        tape.conv2d(x, w, b, 1, 0)
    }
}

/// Frozen stand-in for a pre-trained text encoder: mean-pool the prompt
/// tokens, then a fixed two-layer tanh network to `R^C`.
pub struct HashMlpTextEncoder {
    token_dim: usize,
    hidden: usize,
    output_dim: usize,
    context_limit: usize,
}

impl HashMlpTextEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        if config.token_dim == 0 || config.text_hidden == 0 || config.context_limit == 0 {
            return Err(Error::Config("text encoder dimensions must be positive".into()));
        }
        Ok(Self {
            token_dim: config.token_dim,
            hidden: config.text_hidden,
            output_dim: config.channels,
            context_limit: config.context_limit,
        })
    }
}

impl TextEncoder for HashMlpTextEncoder {
    fn key(&self) -> &str {
        HASH_MLP
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn init_params(&self, rng: &mut ChaCha8Rng, params: &mut ParamStore) {
        let (d, h, c) = (self.token_dim, self.hidden, self.output_dim);
        params.insert("text.w1", Tensor::randn(rng, &[d, h], 2.0 / (d as f64).sqrt()));
        params.insert("text.b1", Tensor::randn(rng, &[h], 0.1));
        params.insert("text.w2", Tensor::randn(rng, &[h, c], 1.0 / (h as f64).sqrt()));
        params.insert("text.b2", Tensor::zeros(&[c]));
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        tokens: Var,
        trainable: bool,
    ) -> Result<Var> {
        let pooled = tape.mean_rows(tokens)?;
        let w1 = params.leaf(tape, "text.w1", trainable)?;
        let b1 = params.leaf(tape, "text.b1", trainable)?;
        let w2 = params.leaf(tape, "text.w2", trainable)?;
        let b2 = params.leaf(tape, "text.b2", trainable)?;
        let h = tape.linear(pooled, w1, b1)?;
        let h = tape.tanh(h);
        let out = tape.linear(h, w2, b2)?;
        tape.reshape(out, &[self.output_dim])
    }
}

pub type VisualFactory = fn(&EncoderConfig) -> Result<Arc<dyn VisualEncoder>>;
pub type TextFactory = fn(&EncoderConfig) -> Result<Arc<dyn TextEncoder>>;

/// Encoder constructors by architecture key.
#[derive(Clone)]
pub struct EncoderRegistry {
    visual: BTreeMap<String, VisualFactory>,
    text: BTreeMap<String, TextFactory>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut r = Self {
            visual: BTreeMap::new(),
            text: BTreeMap::new(),
        };
        r.register_visual(DESK_CONV, |c| Ok(Arc::new(DeskConvEncoder::new(c)?)));
        r.register_text(HASH_MLP, |c| Ok(Arc::new(HashMlpTextEncoder::new(c)?)));
        r
    }
}

impl EncoderRegistry {
    pub fn register_visual(&mut self, key: &str, factory: VisualFactory) {
        self.visual.insert(key.to_string(), factory);
    }

    pub fn register_text(&mut self, key: &str, factory: TextFactory) {
        self.text.insert(key.to_string(), factory);
    }

    pub fn build(&self, config: &EncoderConfig, text_frozen: bool) -> Result<EncoderBundle> {
        let visual = self.visual.get(&config.visual_arch).ok_or_else(|| {
            Error::Config(format!("unknown visual encoder {:?}", config.visual_arch))
        })?(config)?;
        let text = self
            .text
            .get(&config.text_arch)
            .ok_or_else(|| Error::Config(format!("unknown text encoder {:?}", config.text_arch)))?(
            config,
        )?;
        if visual.channels() != text.output_dim() {
            return Err(Error::Config(format!(
                "visual channels {} differ from text embedding width {}",
                visual.channels(),
                text.output_dim()
            )));
        }
        Ok(EncoderBundle {
            visual,
            text,
            text_frozen,
        })
    }
}

/// One visual encoder serving both support and query images, plus the text
/// encoder. With `text_frozen` the text parameters enter every tape as
/// constants and are never updated.
#[derive(Clone)]
pub struct EncoderBundle {
    pub visual: Arc<dyn VisualEncoder>,
    pub text: Arc<dyn TextEncoder>,
    pub text_frozen: bool,
}

impl EncoderBundle {
    /// Initializes visual weights from `rng` and text weights from `text_seed`.
    pub fn init_params(&self, rng: &mut ChaCha8Rng, text_seed: u64, params: &mut ParamStore) {
        self.visual.init_params(rng, params);
        let mut text_rng = ChaCha8Rng::seed_from_u64(text_seed);
        self.text.init_params(&mut text_rng, params);
    }
}

/// Zero-pads a `[c, h, w]` image on the right and bottom to stride multiples.
pub fn pad_to_stride(image: &Tensor, stride: usize) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &image.data()[(ch * h + y) * w..][..w];
            out[(ch * ph + y) * pw..][..w].copy_from_slice(src);
        }
    }
    Tensor::from_vec(&[c, ph, pw], out).expect("padded size")
}

/// Records the visual encoding of `image` on `tape`.
pub fn encode_image_on(
    bundle: &EncoderBundle,
    tape: &mut Tape,
    params: &ParamStore,
    image: &Tensor,
) -> Result<Var> {
    if image.shape().len() != 3 {
        return Err(Error::Argument(format!(
            "images must be [c, h, w], got {:?}",
            image.shape()
        )));
    }
    if !image.all_finite() {
        return Err(Error::Argument("image contains non-finite values".into()));
    }
    let padded = pad_to_stride(image, bundle.visual.stride());
    bundle.visual.forward(tape, params, &padded)
}

/// Evaluation-mode encoding of one image.
pub fn encode_image(
    bundle: &EncoderBundle,
    params: &ParamStore,
    image: &Tensor,
) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let v = encode_image_on(bundle, &mut tape, params, image)?;
    Ok(FeatureMap {
        data: tape.value(v).clone(),
        stride: bundle.visual.stride(),
    })
}

/// Records the text encoding of a prompt on `tape`. Prompts longer than the
/// encoder's context are rejected, never truncated.
pub fn encode_text_on(
    bundle: &EncoderBundle,
    tape: &mut Tape,
    params: &ParamStore,
    prompt: Var,
) -> Result<Var> {
    let shape = tape.shape(prompt).to_vec();
    if shape.len() != 2 || shape[1] != bundle.text.token_dim() {
        return Err(Error::Argument(format!(
            "prompt must be [len, {}], got {shape:?}",
            bundle.text.token_dim()
        )));
    }
    if shape[0] > bundle.text.context_limit() {
        return Err(Error::Argument(format!(
            "prompt of {} tokens exceeds the text context limit of {}",
            shape[0],
            bundle.text.context_limit()
        )));
    }
    bundle
        .text
        .forward(tape, params, prompt, !bundle.text_frozen)
}

/// Evaluation-mode text embedding of a token sequence.
pub fn encode_text(
    bundle: &EncoderBundle,
    params: &ParamStore,
    prompt: &TokenSequence,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(prompt.tokens.clone());
    let out = encode_text_on(bundle, &mut tape, params, v)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockLabel {
    Specific,
    Shared,
    Text,
}

/// Prompt tokens `[len, token_dim]` with the block each token belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub labels: Vec<BlockLabel>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Deterministic stand-in for a pre-trained tokenizer and token embedding:
/// every label maps to `n_text` vectors derived from a 64-bit FNV-1a hash of
/// its UTF-8 bytes.
///
/// Entry `(t, d)` is `u·2 − 1` where `u ∈ [0, 1)` is the top 53 bits of
/// `splitmix64(hash + (t·token_dim + d + 1)·0x9E3779B97F4A7C15)` (wrapping
/// arithmetic) divided by 2^53.
#[derive(Clone, Debug, PartialEq)]
pub struct HashTokenizer {
    pub n_text: usize,
    pub token_dim: usize,
    pub char_limit: usize,
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl HashTokenizer {
    pub fn from_config(config: &EncoderConfig) -> Self {
        Self {
            n_text: config.n_text,
            token_dim: config.token_dim,
            char_limit: config.text_char_limit,
        }
    }

    pub fn tokenize(&self, name: &str) -> Result<TokenSequence> {
        if name.is_empty() {
            return Err(Error::Argument("cannot tokenize an empty label".into()));
        }
        let text: String = if name.chars().count() > self.char_limit {
            log::warn!(
                "label {name:?} truncated to {} characters for tokenization",
                self.char_limit
            );
            name.chars().take(self.char_limit).collect()
        } else {
            name.to_string()
        };
        let h = fnv1a64(text.as_bytes());
        let mut data = Vec::with_capacity(self.n_text * self.token_dim);
        for t in 0..self.n_text {
            for d in 0..self.token_dim {
                let i = (t * self.token_dim + d + 1) as u64;
                let bits = splitmix64(h.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
                let u = (bits >> 11) as f64 / (1u64 << 53) as f64;
                data.push(u * 2.0 - 1.0);
            }
        }
        Ok(TokenSequence {
            tokens: Tensor::from_vec(&[self.n_text, self.token_dim], data)?,
            labels: vec![BlockLabel::Text; self.n_text],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn bundle() -> (EncoderBundle, ParamStore) {
        let config = EncoderConfig {
            channels: 8,
            base_width: 4,
            ..EncoderConfig::default()
        };
        let bundle = EncoderRegistry::default().build(&config, true).unwrap();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        bundle.init_params(&mut rng, config.text_seed, &mut params);
        (bundle, params)
    }

    #[test]
    fn feature_map_shape_follows_stride() {
        let (b, p) = bundle();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::randn(&mut rng, &[3, 64, 64], 0.2);
        let f = encode_image(&b, &p, &img).unwrap();
        assert_eq!(f.data.shape(), &[8, 8, 8]);
        assert_eq!(f.stride, 8);
    }

    #[test]
    fn odd_images_are_padded() {
        let (b, p) = bundle();
        let img = Tensor::zeros(&[3, 13, 17]);
        let f = encode_image(&b, &p, &img).unwrap();
        assert_eq!(f.data.shape(), &[8, 2, 3]);
        let padded = pad_to_stride(&Tensor::vector(vec![1.0; 3]).reshaped(&[1, 1, 3]).unwrap(), 2);
        assert_eq!(padded.shape(), &[1, 2, 4]);
        assert_eq!(padded.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_images_are_rejected() {
        let (b, p) = bundle();
        let mut img = Tensor::zeros(&[3, 8, 8]);
        img.data_mut()[5] = f64::NAN;
        assert!(matches!(encode_image(&b, &p, &img), Err(Error::Argument(_))));
    }

    #[test]
    fn prompts_over_the_context_limit_are_rejected() {
        let (b, p) = bundle();
        let long = TokenSequence {
            tokens: Tensor::zeros(&[17, 32]),
            labels: vec![BlockLabel::Text; 17],
        };
        assert!(matches!(encode_text(&b, &p, &long), Err(Error::Argument(_))));
        let ok = TokenSequence {
            tokens: Tensor::zeros(&[16, 32]),
            labels: vec![BlockLabel::Text; 16],
        };
        assert_eq!(encode_text(&b, &p, &ok).unwrap().shape(), &[8]);
    }

    #[test]
    fn tokenizer_truncates_long_labels() {
        let tok = HashTokenizer {
            n_text: 2,
            token_dim: 3,
            char_limit: 4,
        };
        assert_eq!(
            tok.tokenize("wheelbarrow").unwrap(),
            tok.tokenize("whee").unwrap()
        );
        assert!(tok.tokenize("").is_err());
    }

    #[test]
    fn unknown_architectures_are_config_errors() {
        let config = EncoderConfig {
            visual_arch: "vit-l16".into(),
            ..EncoderConfig::default()
        };
        assert!(matches!(
            EncoderRegistry::default().build(&config, true),
            Err(Error::Config(_))
        ));
    }
}
