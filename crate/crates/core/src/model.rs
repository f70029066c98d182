//! Text featurisation and the two-layer MLP heads that produce unit-norm
//! audio and text embeddings.
//!
//! Text is featurised with hashed character n-grams (FNV-1a, 64-bit), which
//! keeps unseen species names informative without any vocabulary state.
//! Both heads are `affine -> ReLU -> affine -> L2-normalise`; the audio head
//! additionally standardises its input with fixed (non-trained) statistics.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextFeatConfig {
    pub ngram_sizes: Vec<usize>,
    pub dim: usize,
}

impl Default for TextFeatConfig {
    fn default() -> Self {
        TextFeatConfig {
            ngram_sizes: vec![2, 3, 4],
            dim: 2048,
        }
    }
}

/// Sparse vector with sorted, unique indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn from_dense(values: &[f64]) -> Self {
        SparseVector {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        let mut acc = 0.0;
        while let (Some(&&(i, x)), Some(&&(j, y))) = (a.peek(), b.peek()) {
            match i.cmp(&j) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    acc += x * y;
                    a.next();
                    b.next();
                }
            }
        }
        acc
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Lowercases and collapses runs of whitespace to one space.
pub fn normalize_prompt(prompt: &str) -> String {
    prompt
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// L2-normalised hashed character n-gram counts.
pub fn text_features(prompt: &str, cfg: &TextFeatConfig) -> Result<SparseVector> {
    if cfg.dim == 0 {
        return Err(Error::Invalid("text feature dimension must be >= 1".into()));
    }
    let text = normalize_prompt(prompt);
    if text.is_empty() {
        return Err(Error::Invalid("empty prompt".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut counts = std::collections::BTreeMap::new();
    let mut buf = String::new();
    for &n in &cfg.ngram_sizes {
        if n == 0 || n > chars.len() {
            continue;
        }
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window);
            let slot = (fnv1a64(buf.as_bytes()) % cfg.dim as u64) as usize;
            *counts.entry(slot).or_insert(0.0) += 1.0;
        }
    }
    let norm = counts.values().map(|c: &f64| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Invalid(format!(
            "prompt `{prompt}` is shorter than every n-gram size"
        )));
    }
    Ok(SparseVector {
        dim: cfg.dim,
        entries: counts.into_iter().map(|(i, c)| (i, c / norm)).collect(),
    })
}

/// Dense affine map; `weight` is row-major `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Xavier/Glorot uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weight[r * self.in_dim..(r + 1) * self.in_dim]
    }

    fn apply_dense(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|r| self.bias[r] + self.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    fn apply_sparse(&self, x: &SparseVector) -> Vec<f64> {
        (0..self.out_dim)
            .map(|r| {
                let row = self.row(r);
                self.bias[r] + x.entries.iter().map(|&(i, v)| row[i] * v).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

/// Input to an MLP head.
#[derive(Clone, Copy, Debug)]
pub enum HeadInput<'a> {
    Dense(&'a [f64]),
    Sparse(&'a SparseVector),
}

impl HeadInput<'_> {
    fn len(&self) -> usize {
        match self {
            HeadInput::Dense(x) => x.len(),
            HeadInput::Sparse(x) => x.dim,
        }
    }
}

/// Forward activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
    pub norm: f64,
    pub embedding: Vec<f64>,
}

impl Mlp {
    pub fn forward(&self, input: HeadInput<'_>, what: &'static str) -> Result<HeadTrace> {
        if input.len() != self.hidden.in_dim {
            return Err(Error::Dimension {
                what,
                expected: self.hidden.in_dim,
                actual: input.len(),
            });
        }
        let pre_activation = match input {
            HeadInput::Dense(x) => self.hidden.apply_dense(x),
            HeadInput::Sparse(x) => self.hidden.apply_sparse(x),
        };
        let hidden: Vec<f64> = pre_activation.iter().map(|&p| p.max(0.0)).collect();
        let output = self.output.apply_dense(&hidden);
        let norm = output.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NonFinite(format!("{what} embedding norm ({norm})")));
        }
        let embedding = output.iter().map(|v| v / norm).collect();
        Ok(HeadTrace {
            pre_activation,
            hidden,
            output,
            norm,
            embedding,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub audio_in: usize,
    pub text_in: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            audio_in: 128,
            text_in: 2048,
            hidden: 256,
            embed: 64,
        }
    }
}

/// ln(1 / 0.07)
pub fn default_gamma() -> f64 {
    (1.0f64 / 0.07).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub audio: Mlp,
    pub text: Mlp,
    /// Log-scale temperature; similarities are multiplied by `exp(gamma)`.
    pub gamma: f64,
    pub gamma_trainable: bool,
}

/// Names of the optimisable tensors, in [`EncoderParams::tensors`] order.
pub const TENSOR_NAMES: [&str; 9] = [
    "audio.hidden.weight",
    "audio.hidden.bias",
    "audio.output.weight",
    "audio.output.bias",
    "text.hidden.weight",
    "text.hidden.bias",
    "text.output.weight",
    "text.output.bias",
    "gamma",
];

/// Index of `gamma` in [`TENSOR_NAMES`].
pub const GAMMA_TENSOR: usize = 8;

impl EncoderParams {
    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            &self.audio.hidden.weight,
            &self.audio.hidden.bias,
            &self.audio.output.weight,
            &self.audio.output.bias,
            &self.text.hidden.weight,
            &self.text.hidden.bias,
            &self.text.output.weight,
            &self.text.output.bias,
            std::slice::from_ref(&self.gamma),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        [
            &mut self.audio.hidden.weight,
            &mut self.audio.hidden.bias,
            &mut self.audio.output.weight,
            &mut self.audio.output.bias,
            &mut self.text.hidden.weight,
            &mut self.text.hidden.bias,
            &mut self.text.output.weight,
            &mut self.text.output.bias,
            std::slice::from_mut(&mut self.gamma),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let shapes = [
            (self.audio.hidden.in_dim, d.audio_in),
            (self.audio.hidden.out_dim, d.hidden),
            (self.audio.output.in_dim, d.hidden),
            (self.audio.output.out_dim, d.embed),
            (self.text.hidden.in_dim, d.text_in),
            (self.text.hidden.out_dim, d.hidden),
            (self.text.output.in_dim, d.hidden),
            (self.text.output.out_dim, d.embed),
        ];
        for (actual, expected) in shapes {
            if actual != expected {
                return Err(Error::Dimension {
                    what: "encoder parameters",
                    expected,
                    actual,
                });
            }
        }
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite((*name).to_string()));
            }
        }
        Ok(())
    }

    pub fn audio_trace(&self, features: &[f64]) -> Result<HeadTrace> {
        if features.len() != self.dims.audio_in {
            return Err(Error::Dimension {
                what: "audio features",
                expected: self.dims.audio_in,
                actual: features.len(),
            });
        }
        self.audio.forward(HeadInput::Dense(features), "audio features")
    }

    pub fn text_trace(&self, features: &SparseVector) -> Result<HeadTrace> {
        self.text.forward(HeadInput::Sparse(features), "text features")
    }
}

/// Audio embedding (unit L2 norm).
pub fn encode_audio(params: &EncoderParams, features: &[f64]) -> Result<Vec<f64>> {
    Ok(params.audio_trace(features)?.embedding)
}

/// Text embedding (unit L2 norm).
pub fn encode_text(params: &EncoderParams, features: &SparseVector) -> Result<Vec<f64>> {
    Ok(params.text_trace(features)?.embedding)
}

pub fn init_params<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Result<EncoderParams> {
    if dims.audio_in == 0 || dims.text_in == 0 || dims.hidden == 0 || dims.embed == 0 {
        return Err(Error::Invalid(format!("all encoder dims must be >= 1: {dims:?}")));
    }
    let audio = Mlp {
        hidden: Linear::xavier(dims.audio_in, dims.hidden, rng),
        output: Linear::xavier(dims.hidden, dims.embed, rng),
    };
    let text = Mlp {
        hidden: Linear::xavier(dims.text_in, dims.hidden, rng),
        output: Linear::xavier(dims.hidden, dims.embed, rng),
    };
    Ok(EncoderParams {
        dims,
        audio,
        text,
        gamma: default_gamma(),
        gamma_trainable: false,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TXCL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, four u32 dims, u32 flags, f64 gamma,
/// then the eight weight tensors in
/// [`TENSOR_NAMES`] order, all little-endian and row-major.
pub fn write_checkpoint<W: Write>(params: &EncoderParams, mut out: W) -> Result<()> {
    params.validate()?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let d = params.dims;
    for v in [d.audio_in, d.text_in, d.hidden, d.embed] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&(params.gamma_trainable as u32).to_le_bytes())?;
    out.write_all(&params.gamma.to_le_bytes())?;
    for t in params.tensors().into_iter().take(8) {
        for v in t {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(params: &EncoderParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<EncoderParams> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Invalid("not a checkpoint (bad magic)".into()));
    }
    let read_u32 = |input: &mut R| -> Result<u32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!("unsupported checkpoint version {version}")));
    }
    let mut dims_raw = [0usize; 4];
    for d in dims_raw.iter_mut() {
        *d = read_u32(&mut input)? as usize;
    }
    let dims = EncoderDims {
        audio_in: dims_raw[0],
        text_in: dims_raw[1],
        hidden: dims_raw[2],
        embed: dims_raw[3],
    };
    let flags = read_u32(&mut input)?;
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        input.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let gamma = read_f64s(1)?[0];
    let mut linear = |in_dim: usize, out_dim: usize| -> Result<Linear> {
        Ok(Linear {
            in_dim,
            out_dim,
            weight: read_f64s(in_dim * out_dim)?,
            bias: read_f64s(out_dim)?,
        })
    };
    let audio = Mlp {
        hidden: linear(dims.audio_in, dims.hidden)?,
        output: linear(dims.hidden, dims.embed)?,
    };
    let text = Mlp {
        hidden: linear(dims.text_in, dims.hidden)?,
        output: linear(dims.hidden, dims.embed)?,
    };
    let params = EncoderParams {
        dims,
        audio,
        text,
        gamma,
        gamma_trainable: flags & 1 == 1,
    };
    params.validate()?;
    Ok(params)
}

/// Human-readable description written next to a binary checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub format_version: u32,
    pub dims: EncoderDims,
    pub gamma: f64,
    pub gamma_trainable: bool,
    pub seed: u64,
    pub config_hash: String,
}

impl CheckpointSidecar {
    pub fn describe(params: &EncoderParams, seed: u64, config_hash: String) -> Self {
        CheckpointSidecar {
            format_version: CHECKPOINT_VERSION,
            dims: params.dims,
            gamma: params.gamma,
            gamma_trainable: params.gamma_trainable,
            seed,
            config_hash,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> EncoderDims {
        EncoderDims {
            audio_in: 3,
            text_in: 5,
            hidden: 4,
            embed: 2,
        }
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Independent reference: dense FNV-1a n-gram counts over the lowercased,
    /// whitespace-collapsed prompt.
    fn reference_features(prompt: &str, dim: usize) -> Vec<f64> {
        let text = prompt.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let chars: Vec<char> = text.chars().collect();
        let mut v = vec![0.0; dim];
        for n in 2..=4 {
            for i in 0..chars.len().saturating_sub(n - 1) {
                let gram: String = chars[i..i + n].iter().collect();
                let mut h: u64 = 14695981039346656037;
                for b in gram.bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(1099511628211);
                }
                v[(h % dim as u64) as usize] += 1.0;
            }
        }
        let n = norm(&v);
        v.iter().map(|x| x / n).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn text_features_match_reference() {
        let cfg = TextFeatConfig::default();
        for prompt in ["Magumma parva", "  Aves   Passeriformes, Fringillidae ", "\u{2018}Anianiau"] {
            let got = text_features(prompt, &cfg).unwrap().to_dense();
            let want = reference_features(prompt, 2048);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-15);
            }
            assert!((norm(&got) - 1.0).abs() < 1e-12);
        }
        let a = text_features("Magumma parva", &cfg).unwrap();
        assert_eq!(a, text_features("magumma   PARVA", &cfg).unwrap());
    }

    #[test]
    fn congeneric_names_are_closer() {
        let r = |p| reference_features(p, 2048);
        let near = cosine(&r("Magumma parva"), &r("Magumma flava"));
        let far = cosine(&r("Magumma parva"), &r("Corvus corax"));
        assert!(near > far, "{near} vs {far}");
        let cfg = TextFeatConfig::default();
        let f = |p| text_features(p, &cfg).unwrap();
        assert!((f("Magumma parva").dot(&f("Magumma flava")) - near).abs() < 1e-12);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let cfg = TextFeatConfig::default();
        assert!(text_features("", &cfg).is_err());
        assert!(text_features(" \t\n", &cfg).is_err());
        assert!(text_features("x", &cfg).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = init_params(EncoderDims::default(), &mut rng).unwrap();
        let audio: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
        assert!((norm(&encode_audio(&params, &audio).unwrap()) - 1.0).abs() < 1e-12);
        let text = text_features("Aves Passeriformes", &TextFeatConfig::default()).unwrap();
        assert!((norm(&encode_text(&params, &text).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = init_params(small_dims(), &mut rng).unwrap();
        assert!(matches!(
            encode_audio(&params, &[1.0; 4]),
            Err(Error::Dimension { expected: 3, actual: 4, .. })
        ));
        let wrong = SparseVector::from_dense(&[1.0; 6]);
        assert!(matches!(encode_text(&params, &wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_hidden_weights_give_bias_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = init_params(small_dims(), &mut rng).unwrap();
        for mlp in [&mut params.audio, &mut params.text] {
            mlp.hidden.weight.iter_mut().for_each(|w| *w = 0.0);
            mlp.hidden.bias.iter_mut().for_each(|b| *b = 0.0);
            mlp.output.bias = vec![3.0, -4.0];
        }
        for x in [[0.5, -1.0, 2.0], [10.0, 0.0, -3.0]] {
            let e = encode_audio(&params, &x).unwrap();
            assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] + 0.8).abs() < 1e-15);
        }
        let t = encode_text(&params, &SparseVector::from_dense(&[0.0, 1.0, 0.0, 2.0, 0.0])).unwrap();
        assert!((t[0] - 0.6).abs() < 1e-15 && (t[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_hand_computation() {
        // audio: 3 -> 4 -> 2 with fixed weights
        let params = EncoderParams {
            dims: small_dims(),
            audio: Mlp {
                hidden: Linear {
                    in_dim: 3,
                    out_dim: 4,
                    weight: vec![1., 0., 0., 0., 1., 0., 0., 0., 1., -1., -1., -1.],
                    bias: vec![0.0, 0.0, 0.5, 0.0],
                },
                output: Linear {
                    in_dim: 4,
                    out_dim: 2,
                    weight: vec![1., 1., 0., 0., 0., 0., 1., 1.],
                    bias: vec![0.0, 1.0],
                },
            },
            text: Mlp {
                hidden: Linear {
                    in_dim: 5,
                    out_dim: 4,
                    weight: (0..20).map(|i| (i % 3) as f64 - 1.0).collect(),
                    bias: vec![0.1; 4],
                },
                output: Linear {
                    in_dim: 4,
                    out_dim: 2,
                    weight: vec![1., -1., 1., -1., 0.5, 0.5, 0.5, 0.5],
                    bias: vec![0.0, 0.0],
                },
            },
            gamma: 0.0,
            gamma_trainable: false,
        };
        // pre = [1, 2, -2.5, 0] -> relu = [1, 2, 0, 0]
        // out = [3, 0 + 1] = [3, 1] -> /sqrt(10)
        let e = encode_audio(&params, &[1.0, 2.0, -3.0]).unwrap();
        let s = 10f64.sqrt();
        assert!((e[0] - 3.0 / s).abs() < 1e-15 && (e[1] - 1.0 / s).abs() < 1e-15);

        // text rows: weight[r*5 + c] = ((r*5+c) % 3) - 1
        let x = [1.0, 0.0, 2.0, 0.0, 0.0];
        let mut hidden = [0.0; 4];
        for (r, h) in hidden.iter_mut().enumerate() {
            let mut acc = 0.1;
            for (c, xc) in x.iter().enumerate() {
                acc += (((r * 5 + c) % 3) as f64 - 1.0) * xc;
            }
            *h = f64::max(acc, 0.0);
        }
        let out = [
            hidden[0] - hidden[1] + hidden[2] - hidden[3],
            0.5 * hidden.iter().sum::<f64>(),
        ];
        let n = norm(&out);
        let t = encode_text(&params, &SparseVector::from_dense(&x)).unwrap();
        assert!((t[0] - out[0] / n).abs() < 1e-15 && (t[1] - out[1] / n).abs() < 1e-15);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let dims = EncoderDims::default();
        let a = init_params(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_params(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!((a.gamma - 2.6593).abs() < 1e-4);
        for lin in [&a.audio.hidden, &a.audio.output, &a.text.hidden, &a.text.output] {
            let bound = (6.0 / (lin.in_dim + lin.out_dim) as f64).sqrt();
            assert!(lin.weight.iter().all(|w| w.abs() <= bound));
            let mean = lin.weight.iter().sum::<f64>() / lin.weight.len() as f64;
            // uniform(-b, b) has sd b / sqrt(3); allow 4 standard errors
            let se = bound / 3f64.sqrt() / (lin.weight.len() as f64).sqrt();
            assert!(mean.abs() < 4.0 * se, "mean {mean}");
            assert!(lin.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn forward_is_bitwise_pure() {
        let params = init_params(EncoderDims::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x: Vec<f64> = (0..128).map(|i| i as f64 / 7.0).collect();
        let a = encode_audio(&params, &x).unwrap();
        let b = encode_audio(&params, &x).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let mut params =
            init_params(EncoderDims::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        params.gamma_trainable = true;
        params.text.output.bias[5] = 1.25;
        let bytes = checkpoint_bytes(&params).unwrap();
        assert_eq!(&bytes[..4], b"TXCL");
        assert_eq!(read_checkpoint(bytes.as_slice()).unwrap(), params);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&bytes[..100]).is_err());
    }
}
