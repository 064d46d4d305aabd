//! Phase I: learning per-identity prompt tokens against frozen encoders and
//! caching the resulting prototypes as fixed anchors.
//!
//! The objective is `mean_i L_i2t + mean_y L_t2i + lambda_c3 * L_c3` where the
//! two contrastive terms align image embeddings with identity prototypes in
//! both directions and `L_c3` penalizes differences in a sample's similarity
//! to its own prototype across cameras.

use std::path::Path;

use log::warn;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::encoders::{
    cache_prototypes, EncoderParams, PromptTokens, PrototypeSet, TextEncoderSurrogate, TextPrototype,
};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, cosine_similarity_grad, log_softmax, softmax_cross_entropy_grad};
use crate::rng::{derive_seed, SimRng};
use crate::sampling::PkSampler;
use crate::synthdata::ClientData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsaConfig {
    /// Run the anchoring phase and the alignment term downstream.
    pub enabled: bool,
    /// Tokens per identity (`L`).
    pub tokens: usize,
    pub lambda_c3: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_identities: usize,
    pub batch_instances: usize,
    /// Use the batch's distinct identities as the image-to-text partition
    /// function instead of one column per sample.
    pub dedup_identities: bool,
    pub init_scale: f64,
}

impl Default for CsaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tokens: 4,
            lambda_c3: 0.1,
            temperature: 0.07,
            epochs: 200,
            lr: 0.01,
            batch_identities: 4,
            batch_instances: 4,
            dedup_identities: true,
            init_scale: 0.02,
        }
    }
}

impl CsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens < 1 {
            return Err(Error::Config("csa.tokens must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("csa.temperature must be positive".into()));
        }
        if !(self.lambda_c3 >= 0.0) || !(self.lr > 0.0) || !(self.init_scale >= 0.0) {
            return Err(Error::Config("csa.lambda_c3, lr and init_scale must be non-negative".into()));
        }
        if self.batch_identities < 1 || self.batch_instances < 1 {
            return Err(Error::Config("csa batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Positive sets `P(y)` of a batch, plus its camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchIndex {
    /// Distinct identities, sorted; column order of similarity matrices.
    pub identities: Vec<usize>,
    /// Batch positions of each identity.
    pub positives: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
}

impl BatchIndex {
    pub fn new(labels: &[usize], cameras: &[usize]) -> Result<Self> {
        if labels.len() != cameras.len() {
            return Err(Error::ShapeMismatch { expected: vec![labels.len()], actual: vec![cameras.len()] });
        }
        let mut identities = labels.to_vec();
        identities.sort_unstable();
        identities.dedup();
        let mut positives = vec![Vec::new(); identities.len()];
        for (i, y) in labels.iter().enumerate() {
            positives[identities.binary_search(y).unwrap()].push(i);
        }
        Ok(Self { identities, positives, labels: labels.to_vec(), cameras: cameras.to_vec() })
    }

    pub fn column_of(&self, y: usize) -> Result<usize> {
        self.identities.binary_search(&y).map_err(|_| Error::UnknownIdentity(y))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// Image-to-text loss with its gradient w.r.t. the similarity matrix.
pub fn loss_i2t_grad(similarities: &[Vec<f64>], targets: &[usize], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    check_tau(tau)?;
    if similarities.is_empty() || similarities.len() != targets.len() {
        return Err(Error::InvalidArgument("one target per similarity row required".into()));
    }
    let b = similarities.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(similarities.len());
    for (row, &t) in similarities.iter().zip(targets) {
        let logits: Vec<f64> = row.iter().map(|s| s / tau).collect();
        let (l, g) = softmax_cross_entropy_grad(&logits, t)?;
        total += l;
        grad.push(g.into_iter().map(|x| x / (tau * b)).collect());
    }
    Ok((total / b, grad))
}

/// Mean over samples of the softmax cross-entropy of `similarities[i] / tau`
/// against column `targets[i]`.
pub fn loss_i2t(similarities: &[Vec<f64>], targets: &[usize], tau: f64) -> Result<f64> {
    loss_i2t_grad(similarities, targets, tau).map(|(l, _)| l)
}

/// Text-to-image loss summed over batch identities, with its gradient.
///
/// Column `c` of `similarities` holds `s(v_a, t_y)` for identity
/// `index.identities[c]` over all batch samples `a`.
pub fn loss_t2i_grad(similarities: &[Vec<f64>], index: &BatchIndex, tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    check_tau(tau)?;
    let b = similarities.len();
    let mut grad = vec![vec![0.0; index.identities.len()]; b];
    let mut total = 0.0;
    for (c, pos) in index.positives.iter().enumerate() {
        if pos.is_empty() {
            return Err(Error::InvalidArgument(format!("identity {} has no positives", index.identities[c])));
        }
        let logits: Vec<f64> = similarities.iter().map(|row| row[c] / tau).collect();
        let logp = log_softmax(&logits);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let np = pos.len() as f64;
        for &p in pos {
            total -= logp[p] / np;
            for a in 0..b {
                grad[a][c] += probs[a] / (tau * np);
            }
            grad[p][c] -= 1.0 / (tau * np);
        }
    }
    Ok((total, grad))
}

pub fn loss_t2i(similarities: &[Vec<f64>], index: &BatchIndex, tau: f64) -> Result<f64> {
    loss_t2i_grad(similarities, index, tau).map(|(l, _)| l)
}

/// Cross-camera consistency over unordered same-identity pairs with
/// different cameras, with gradient w.r.t. each sample's own similarity.
pub fn loss_c3_grad(own_similarity: &[f64], index: &BatchIndex) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = vec![0.0; own_similarity.len()];
    for pos in &index.positives {
        for (x, &i) in pos.iter().enumerate() {
            for &j in &pos[x + 1..] {
                if index.cameras[i] != index.cameras[j] {
                    let d = own_similarity[i] - own_similarity[j];
                    total += d * d;
                    grad[i] += 2.0 * d;
                    grad[j] -= 2.0 * d;
                }
            }
        }
    }
    (total, grad)
}

pub fn loss_c3(own_similarity: &[f64], index: &BatchIndex) -> f64 {
    loss_c3_grad(own_similarity, index).0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CsaLoss {
    pub i2t: f64,
    pub t2i: f64,
    pub c3: f64,
    pub total: f64,
}

/// Full anchoring objective on one batch and its gradient over the whole
/// token buffer (zero for identities absent from the batch).
pub fn csa_objective(
    embeddings: &[&[f64]],
    labels: &[usize],
    cameras: &[usize],
    tokens: &PromptTokens,
    surrogate: &TextEncoderSurrogate,
    cfg: &CsaConfig,
) -> Result<(CsaLoss, Vec<f64>)> {
    let index = BatchIndex::new(labels, cameras)?;
    let tau = cfg.temperature;
    let protos: Vec<Vec<f64>> = index
        .identities
        .iter()
        .map(|&y| surrogate.forward(tokens.tokens_of(y)?, tokens.length()))
        .collect::<Result<_>>()?;
    // s[i][c] and d s[i][c] / d t_c
    let mut sims = vec![vec![0.0; protos.len()]; embeddings.len()];
    let mut dsdt = vec![vec![Vec::new(); protos.len()]; embeddings.len()];
    for (i, v) in embeddings.iter().enumerate() {
        for (c, t) in protos.iter().enumerate() {
            let (s, g) = cosine_similarity_grad(t, v)?;
            sims[i][c] = s;
            dsdt[i][c] = g;
        }
    }
    let cols: Vec<usize> = labels.iter().map(|&y| index.column_of(y)).collect::<Result<_>>()?;
    let mut d_sims = vec![vec![0.0; protos.len()]; embeddings.len()];

    let i2t = if cfg.dedup_identities {
        let (l, g) = loss_i2t_grad(&sims, &cols, tau)?;
        for (dr, gr) in d_sims.iter_mut().zip(&g) {
            for (d, x) in dr.iter_mut().zip(gr) {
                *d += x;
            }
        }
        l
    } else {
        // One partition-function column per batch sample `a`, holding t_{y_a}.
        let wide: Vec<Vec<f64>> = sims.iter().map(|row| cols.iter().map(|&c| row[c]).collect()).collect();
        let targets: Vec<usize> = (0..embeddings.len()).collect();
        let (l, g) = loss_i2t_grad(&wide, &targets, tau)?;
        for (i, gr) in g.iter().enumerate() {
            for (a, x) in gr.iter().enumerate() {
                d_sims[i][cols[a]] += x;
            }
        }
        l
    };

    let n_ids = index.identities.len() as f64;
    let (t2i_sum, g) = loss_t2i_grad(&sims, &index, tau)?;
    for (dr, gr) in d_sims.iter_mut().zip(&g) {
        for (d, x) in dr.iter_mut().zip(gr) {
            *d += x / n_ids;
        }
    }
    let t2i = t2i_sum / n_ids;

    let own: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| sims[i][c]).collect();
    let (c3, g) = loss_c3_grad(&own, &index);
    for (i, gi) in g.iter().enumerate() {
        d_sims[i][cols[i]] += cfg.lambda_c3 * gi;
    }

    let mut grad = vec![0.0; tokens.values().len()];
    let block = tokens.length() * tokens.token_dim();
    for (c, &y) in index.identities.iter().enumerate() {
        let mut d_t = vec![0.0; surrogate.embed_dim()];
        for i in 0..embeddings.len() {
            let ds = d_sims[i][c];
            if ds != 0.0 {
                for (d, g) in d_t.iter_mut().zip(&dsdt[i][c]) {
                    *d += ds * g;
                }
            }
        }
        let d_tok = surrogate.backward(tokens.tokens_of(y)?, tokens.length(), &d_t)?;
        let p = tokens.position(y)?;
        grad[p * block..(p + 1) * block].copy_from_slice(&d_tok);
    }
    let total = i2t + t2i + cfg.lambda_c3 * c3;
    Ok((CsaLoss { i2t, t2i, c3, total }, grad))
}

/// Gradient descent on tokens over `epochs` PK epochs; returns per-epoch mean
/// losses. Embeddings are fixed inputs.
#[allow(clippy::too_many_arguments)]
pub fn train_tokens(
    tokens: &mut PromptTokens,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    cameras: &[usize],
    surrogate: &TextEncoderSurrogate,
    cfg: &CsaConfig,
    epochs: usize,
    rng: &mut SimRng,
) -> Result<Vec<CsaLoss>> {
    let sampler = PkSampler::new(labels, cfg.batch_identities, cfg.batch_instances);
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut acc = CsaLoss::default();
        let batches = sampler.epoch(rng);
        for batch in &batches {
            let emb: Vec<&[f64]> = batch.iter().map(|&i| embeddings[i].as_slice()).collect();
            let lab: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let cam: Vec<usize> = batch.iter().map(|&i| cameras[i]).collect();
            let (loss, grad) = csa_objective(&emb, &lab, &cam, tokens, surrogate, cfg)?;
            for (t, g) in tokens.values_mut().iter_mut().zip(&grad) {
                *t -= cfg.lr * g;
            }
            acc.i2t += loss.i2t;
            acc.t2i += loss.t2i;
            acc.c3 += loss.c3;
            acc.total += loss.total;
        }
        let n = batches.len() as f64;
        trace.push(CsaLoss { i2t: acc.i2t / n, t2i: acc.t2i / n, c3: acc.c3 / n, total: acc.total / n });
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct CsaOutcome {
    pub tokens: PromptTokens,
    pub prototypes: PrototypeSet,
    pub loss_trace: Vec<CsaLoss>,
}

/// Phase I for one client: tokens are optimized against the frozen `encoder`
/// and `surrogate`, then snapshotted into prototypes.
pub fn run_csa_phase(
    client: &ClientData,
    encoder: &EncoderParams,
    surrogate: &TextEncoderSurrogate,
    cfg: &CsaConfig,
    seed: u64,
) -> Result<CsaOutcome> {
    cfg.validate()?;
    let (embeddings, labels, cameras) = embed_client(client, encoder)?;
    if client.cameras().len() < 2 {
        warn!("client {} has fewer than 2 cameras; cross-camera term is inert", client.client);
    }
    let identities = client.identities();
    let mut tokens = PromptTokens::init(
        &identities,
        cfg.tokens,
        surrogate.token_dim(),
        cfg.init_scale,
        derive_seed(seed, "csa-tokens", &[client.client as u64]),
    )?;
    let mut rng = SimRng::seed_from_u64(derive_seed(seed, "csa-batches", &[client.client as u64]));
    let loss_trace = train_tokens(&mut tokens, &embeddings, &labels, &cameras, surrogate, cfg, cfg.epochs, &mut rng)?;
    let prototypes = PrototypeSet::new(cache_prototypes(surrogate, &tokens, &identities)?);
    Ok(CsaOutcome { tokens, prototypes, loss_trace })
}

/// Embeddings, identity labels and camera labels of a client's samples.
type Embedded = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>);

pub(crate) fn embed_client(client: &ClientData, encoder: &EncoderParams) -> Result<Embedded> {
    let embeddings = client
        .samples
        .iter()
        .map(|s| encoder.forward(s.image.data()).map(|c| c.embedding))
        .collect::<Result<Vec<_>>>()?;
    let labels = client.samples.iter().map(|s| s.identity).collect();
    let cameras = client.samples.iter().map(|s| s.camera).collect();
    Ok((embeddings, labels, cameras))
}

/// Seed-comparable measure of camera leakage into anchors: for each identity,
/// the variance across cameras of the per-camera mean of `s(v_i, t_y)`,
/// averaged over identities.
pub fn cross_camera_similarity_variance(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    cameras: &[usize],
    prototypes: &PrototypeSet,
) -> Result<f64> {
    use std::collections::BTreeMap;
    let mut per: BTreeMap<usize, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for ((v, &y), &c) in embeddings.iter().zip(labels).zip(cameras) {
        let s = cosine_similarity(v, &prototypes.get(y)?.vector)?;
        let e = per.entry(y).or_default().entry(c).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    let mut total = 0.0;
    for cams in per.values() {
        let means: Vec<f64> = cams.values().map(|(s, n)| s / *n as f64).collect();
        let m = means.iter().sum::<f64>() / means.len() as f64;
        total += means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / means.len() as f64;
    }
    Ok(total / per.len().max(1) as f64)
}

const PROTOTYPE_VERSION: u32 = 1;

/// Prototype file: `u32` version, `u32` dim, `u32` count, then per record a
/// `u32` identity and `dim` little-endian `f64`s.
pub fn prototypes_to_bytes(set: &PrototypeSet) -> Vec<u8> {
    let dim = set.iter().next().map_or(0, |p| p.vector.len());
    let mut w = Writer::new();
    w.u32(PROTOTYPE_VERSION).u32(dim as u32).u32(set.len() as u32);
    for p in set.iter() {
        w.u32(p.identity as u32).f64s(&p.vector);
    }
    w.finish()
}

pub fn prototypes_from_bytes(bytes: &[u8]) -> Result<PrototypeSet> {
    let mut r = Reader::new(bytes);
    let version = r.u32()?;
    if version != PROTOTYPE_VERSION {
        return Err(Error::Format(format!("unsupported prototype version {version}")));
    }
    let dim = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let identity = r.u32()? as usize;
        out.push(TextPrototype { identity, vector: r.f64s(dim)? });
    }
    r.expect_end()?;
    Ok(PrototypeSet::new(out))
}

pub fn write_prototypes(set: &PrototypeSet, path: &Path) -> Result<()> {
    std::fs::write(path, prototypes_to_bytes(set))?;
    Ok(())
}

pub fn read_prototypes(path: &Path) -> Result<PrototypeSet> {
    prototypes_from_bytes(&std::fs::read(path)?)
}
