//! Trainable image encoder, per-client classifier head, learnable prompt
//! tokens and the frozen text-encoder surrogate that turns tokens into
//! identity prototypes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Tensor};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 64, embed_dim: 32, token_dim: 16 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed_dim == 0 || self.token_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Architecture {
    pub fn num_params(&self) -> usize {
        self.hidden * self.input_dim + self.hidden + self.embed_dim * self.hidden + self.embed_dim
    }
}

/// Two-layer perceptron `flatten -> tanh(W1 x + b1) -> W2 h + b2`.
///
/// All parameters live in one flat buffer laid out as `W1, b1, W2, b2`
/// (row-major), which is the unit of aggregation and checkpointing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    arch: Architecture,
    values: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub hidden: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl EncoderParams {
    /// Gaussian init scaled by fan-in; zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = stream(seed, "encoder-init", &[]);
        let mut values = vec![0.0; arch.num_params()];
        let s1 = 1.0 / (arch.input_dim as f64).sqrt();
        let s2 = 1.0 / (arch.hidden as f64).sqrt();
        let n1 = arch.hidden * arch.input_dim;
        for v in &mut values[..n1] {
            *v = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        let o2 = n1 + arch.hidden;
        for v in &mut values[o2..o2 + arch.embed_dim * arch.hidden] {
            *v = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        Self { arch, values }
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self { arch, values: vec![0.0; arch.num_params()] }
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.num_params() {
            return Err(Error::ShapeMismatch { expected: vec![arch.num_params()], actual: vec![values.len()] });
        }
        Ok(Self { arch, values })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let a = self.arch;
        let (w1, rest) = self.values.split_at(a.hidden * a.input_dim);
        let (b1, rest) = rest.split_at(a.hidden);
        let (w2, b2) = rest.split_at(a.embed_dim * a.hidden);
        (w1, b1, w2, b2)
    }

    /// Forward pass returning the cache needed by [`Self::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<EncoderCache> {
        let a = self.arch;
        if x.len() != a.input_dim {
            return Err(Error::ShapeMismatch { expected: vec![a.input_dim], actual: vec![x.len()] });
        }
        let (w1, b1, w2, b2) = self.split();
        let hidden: Vec<f64> = w1
            .chunks_exact(a.input_dim)
            .zip(b1)
            .map(|(row, b)| (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b).tanh())
            .collect();
        let embedding = w2
            .chunks_exact(a.hidden)
            .zip(b2)
            .map(|(row, b)| row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b)
            .collect();
        Ok(EncoderCache { hidden, embedding })
    }

    /// Accumulates `d loss / d params` into `grad` (same layout as `values`).
    pub fn backward(&self, x: &[f64], cache: &EncoderCache, d_embedding: &[f64], grad: &mut [f64]) {
        let a = self.arch;
        let (_, _, w2, _) = self.split();
        let n1 = a.hidden * a.input_dim;
        let (gw1, rest) = grad.split_at_mut(n1);
        let (gb1, rest) = rest.split_at_mut(a.hidden);
        let (gw2, gb2) = rest.split_at_mut(a.embed_dim * a.hidden);
        let mut d_hidden = vec![0.0; a.hidden];
        for (e, &dv) in d_embedding.iter().enumerate() {
            if dv == 0.0 {
                continue;
            }
            gb2[e] += dv;
            let row = &w2[e * a.hidden..(e + 1) * a.hidden];
            let grow = &mut gw2[e * a.hidden..(e + 1) * a.hidden];
            for j in 0..a.hidden {
                grow[j] += dv * cache.hidden[j];
                d_hidden[j] += dv * row[j];
            }
        }
        for j in 0..a.hidden {
            let h = cache.hidden[j];
            let da = d_hidden[j] * (1.0 - h * h);
            if da == 0.0 {
                continue;
            }
            gb1[j] += da;
            for (g, &xi) in gw1[j * a.input_dim..(j + 1) * a.input_dim].iter_mut().zip(x) {
                *g += da * xi;
            }
        }
    }

    /// Cheap content fingerprint used to audit broadcast consistency.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.values)
    }
}

pub(crate) fn fingerprint(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

/// `encode_image`: embedding of a `[C, H, W]` image.
pub fn encode_image(params: &EncoderParams, x: &Tensor) -> Result<Tensor> {
    Tensor::vector(params.forward(x.data())?.embedding)
}

/// Linear identity classifier over a client's label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    classes: usize,
    embed_dim: usize,
    values: Vec<f64>,
}

impl ClassifierHead {
    pub fn init(classes: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "head-init", &[]);
        let s = 1.0 / (embed_dim as f64).sqrt();
        let mut values = vec![0.0; classes * embed_dim + classes];
        for v in &mut values[..classes * embed_dim] {
            *v = s * rng.sample::<f64, _>(StandardNormal);
        }
        Self { classes, embed_dim, values }
    }

    pub fn from_values(classes: usize, embed_dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != classes * embed_dim + classes {
            return Err(Error::ShapeMismatch {
                expected: vec![classes * embed_dim + classes],
                actual: vec![values.len()],
            });
        }
        Ok(Self { classes, embed_dim, values })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn logits(&self, v: &[f64]) -> Vec<f64> {
        let (w, b) = self.values.split_at(self.classes * self.embed_dim);
        w.chunks_exact(self.embed_dim)
            .zip(b)
            .map(|(row, bias)| row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>() + bias)
            .collect()
    }

    /// Accumulates parameter gradients and returns `d loss / d v`.
    pub fn backward(&self, v: &[f64], d_logits: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n = self.classes * self.embed_dim;
        let (w, _) = self.values.split_at(n);
        let (gw, gb) = grad.split_at_mut(n);
        let mut dv = vec![0.0; self.embed_dim];
        for (k, &dl) in d_logits.iter().enumerate() {
            gb[k] += dl;
            let row = &w[k * self.embed_dim..(k + 1) * self.embed_dim];
            let grow = &mut gw[k * self.embed_dim..(k + 1) * self.embed_dim];
            for j in 0..self.embed_dim {
                grow[j] += dl * v[j];
                dv[j] += dl * row[j];
            }
        }
        dv
    }
}

/// `L` learnable token vectors per identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTokens {
    length: usize,
    token_dim: usize,
    identities: Vec<usize>,
    values: Vec<f64>,
}

impl PromptTokens {
    /// Seeded Gaussian tokens of standard deviation `scale`.
    pub fn init(identities: &[usize], length: usize, token_dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if length == 0 {
            return Err(Error::InvalidArgument("token length must be at least 1".into()));
        }
        let mut ids = identities.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut rng = stream(seed, "tokens", &[]);
        let values =
            (0..ids.len() * length * token_dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(Self { length, token_dim, identities: ids, values })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn identities(&self) -> &[usize] {
        &self.identities
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row of identity `y` in the token buffer.
    pub fn position(&self, y: usize) -> Result<usize> {
        self.identities.binary_search(&y).map_err(|_| Error::UnknownIdentity(y))
    }

    fn block(&self) -> usize {
        self.length * self.token_dim
    }

    pub fn tokens_of(&self, y: usize) -> Result<&[f64]> {
        let p = self.position(y)?;
        Ok(&self.values[p * self.block()..(p + 1) * self.block()])
    }
}

/// Frozen stand-in for the text tower: `normalize(P (template + mean tokens))`.
///
/// No mutable access is exposed; parameters are fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderSurrogate {
    token_dim: usize,
    embed_dim: usize,
    template: Vec<f64>,
    projection: Vec<f64>,
}

impl TextEncoderSurrogate {
    pub fn new(token_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "text-surrogate", &[]);
        let s = 1.0 / (token_dim as f64).sqrt();
        let template = (0..token_dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
        let projection = (0..embed_dim * token_dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { token_dim, embed_dim, template, projection }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn pre_norm(&self, tokens: &[f64], length: usize) -> Vec<f64> {
        let mut u = self.template.clone();
        for tok in tokens.chunks_exact(self.token_dim) {
            for (ui, t) in u.iter_mut().zip(tok) {
                *ui += t / length as f64;
            }
        }
        self.projection.chunks_exact(self.token_dim).map(|row| row.iter().zip(&u).map(|(p, x)| p * x).sum()).collect()
    }

    /// Unit-norm prototype for one identity's token block.
    pub fn forward(&self, tokens: &[f64], length: usize) -> Result<Vec<f64>> {
        let w = self.pre_norm(tokens, length);
        let n = l2_norm(&w);
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(w.iter().map(|x| x / n).collect())
    }

    /// Pulls `d loss / d prototype` back to `d loss / d tokens` (one block).
    pub fn backward(&self, tokens: &[f64], length: usize, d_proto: &[f64]) -> Result<Vec<f64>> {
        let w = self.pre_norm(tokens, length);
        let n = l2_norm(&w);
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let t: Vec<f64> = w.iter().map(|x| x / n).collect();
        let tg: f64 = t.iter().zip(d_proto).map(|(a, b)| a * b).sum();
        let d_w: Vec<f64> = d_proto.iter().zip(&t).map(|(g, ti)| (g - tg * ti) / n).collect();
        let mut d_u = vec![0.0; self.token_dim];
        for (row, dw) in self.projection.chunks_exact(self.token_dim).zip(&d_w) {
            for (du, p) in d_u.iter_mut().zip(row) {
                *du += dw * p;
            }
        }
        let mut out = Vec::with_capacity(tokens.len());
        for _ in 0..length {
            out.extend(d_u.iter().map(|g| g / length as f64));
        }
        Ok(out)
    }
}

/// `encode_prompt`: prototype embedding of identity `y` from current tokens.
pub fn encode_prompt(surrogate: &TextEncoderSurrogate, tokens: &PromptTokens, y: usize) -> Result<Tensor> {
    Tensor::vector(surrogate.forward(tokens.tokens_of(y)?, tokens.length())?)
}

/// A frozen, unit-norm identity anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPrototype {
    pub identity: usize,
    pub vector: Vec<f64>,
}

/// Snapshots prototypes for `identities` from the current tokens.
pub fn cache_prototypes(
    surrogate: &TextEncoderSurrogate,
    tokens: &PromptTokens,
    identities: &[usize],
) -> Result<Vec<TextPrototype>> {
    identities
        .iter()
        .map(|&y| Ok(TextPrototype { identity: y, vector: encode_prompt(surrogate, tokens, y)?.into_data() }))
        .collect()
}

/// A client's anchor set `T_k`, sorted by identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    prototypes: Vec<TextPrototype>,
}

impl PrototypeSet {
    pub fn new(mut prototypes: Vec<TextPrototype>) -> Self {
        prototypes.sort_by_key(|p| p.identity);
        Self { prototypes }
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TextPrototype> {
        self.prototypes.iter()
    }

    pub fn position(&self, y: usize) -> Result<usize> {
        self.prototypes.binary_search_by_key(&y, |p| p.identity).map_err(|_| Error::UnknownIdentity(y))
    }

    pub fn get(&self, y: usize) -> Result<&TextPrototype> {
        Ok(&self.prototypes[self.position(y)?])
    }

    pub fn as_slice(&self) -> &[TextPrototype] {
        &self.prototypes
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FRCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Versioned parameter blob.
///
/// Layout (little-endian): magic `FRCKPT\0\0`, `u32` version, `u64` seed,
/// `u32` array count, then per array `u32` name length, UTF-8 name, `u32`
/// rank, `u64` dims, `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(seed: u64, encoder: &EncoderParams, heads: &[(usize, &ClassifierHead)]) -> Self {
        let a = encoder.arch();
        let (w1, b1, w2, b2) = encoder.split();
        let mut arrays = vec![
            NamedArray { name: "encoder.w1".into(), shape: vec![a.hidden, a.input_dim], values: w1.to_vec() },
            NamedArray { name: "encoder.b1".into(), shape: vec![a.hidden], values: b1.to_vec() },
            NamedArray { name: "encoder.w2".into(), shape: vec![a.embed_dim, a.hidden], values: w2.to_vec() },
            NamedArray { name: "encoder.b2".into(), shape: vec![a.embed_dim], values: b2.to_vec() },
        ];
        for (k, head) in heads {
            arrays.push(NamedArray {
                name: format!("head.{k}"),
                shape: vec![head.classes(), head.embed_dim() + 1],
                values: head.values().to_vec(),
            });
        }
        Self { seed, arrays }
    }

    /// Reassembles the encoder from the `encoder.*` arrays.
    pub fn encoder(&self) -> Result<EncoderParams> {
        let find = |n: &str| {
            self.arrays.iter().find(|a| a.name == n).ok_or_else(|| Error::Format(format!("missing array {n}")))
        };
        let w1 = find("encoder.w1")?;
        let w2 = find("encoder.w2")?;
        let arch = Architecture { input_dim: w1.shape[1], hidden: w1.shape[0], embed_dim: w2.shape[0] };
        let mut values = w1.values.clone();
        values.extend(&find("encoder.b1")?.values);
        values.extend(&w2.values);
        values.extend(&find("encoder.b2")?.values);
        EncoderParams::from_values(arch, values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC).u32(CHECKPOINT_VERSION).u64(self.seed).u32(self.arrays.len() as u32);
        for a in &self.arrays {
            w.u32(a.name.len() as u32).bytes(a.name.as_bytes()).u32(a.shape.len() as u32);
            for &d in &a.shape {
                w.u64(d as u64);
            }
            w.f64s(&a.values);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().product();
            arrays.push(NamedArray { name, shape, values: r.f64s(count)? });
        }
        r.expect_end()?;
        Ok(Self { seed, arrays })
    }
}
