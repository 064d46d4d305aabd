//! Seeded multi-client, multi-camera synthetic re-identification benchmark.
//!
//! An identity is a latent vector rendered to a `[C, H, W]` image by a fixed
//! linear map shared across all domains. Each camera applies a per-channel
//! affine style (`gain * base + bias`) and additive Gaussian noise, so the
//! domain gap lives exactly in per-channel first and second moments.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, stream, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Tensor,
    pub identity: usize,
    pub camera: usize,
    /// Owning client; the domain index for held-out evaluation domains.
    pub client: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraStyle {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: usize,
    pub client: usize,
    /// First global identity label; identities are `offset..offset+n`.
    pub identity_offset: usize,
    pub num_identities: usize,
    pub num_cameras: usize,
    pub samples_per_identity_per_camera: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub identity_dim: usize,
    pub camera_styles: Vec<CameraStyle>,
    pub noise_sigma: f64,
    /// Strength of the channel-constant part of the render map: how much of an
    /// identity's appearance is its per-channel mean color.
    pub color_scale: f64,
    /// Seed of the latent-to-image map; shared by every domain of a federation.
    pub render_seed: u64,
}

impl DomainSpec {
    fn validate(&self) -> Result<()> {
        if self.num_cameras < 2 {
            return Err(Error::InvalidArgument(format!("domain {} needs at least 2 cameras", self.domain)));
        }
        if self.camera_styles.len() != self.num_cameras {
            return Err(Error::InvalidArgument("one style per camera required".into()));
        }
        for s in &self.camera_styles {
            if s.gain.len() != self.channels || s.bias.len() != self.channels {
                return Err(Error::InvalidArgument("style channel count mismatch".into()));
            }
            if s.gain.iter().any(|&g| !(g > 0.0)) {
                return Err(Error::InvalidArgument("camera gains must be positive".into()));
            }
        }
        if !(self.color_scale >= 0.0) || self.noise_sigma < 0.0 || self.channels * self.height * self.width == 0 {
            return Err(Error::InvalidArgument("bad image geometry or noise".into()));
        }
        Ok(())
    }
}

/// Row-major `pixels x latent` map: an i.i.d. `N(0, 1/latent)` pattern plus a
/// per-channel row shared by every pixel of that channel, scaled by `color`.
fn render_map(channels: usize, plane: usize, latent: usize, color: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, "render", &[]);
    let scale = 1.0 / (latent as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect() };
    let pattern = draw(channels * plane * latent);
    let tint = draw(channels * latent);
    let mut out = pattern;
    for (i, row) in out.chunks_exact_mut(latent).enumerate() {
        let c = i / plane;
        for (v, t) in row.iter_mut().zip(&tint[c * latent..(c + 1) * latent]) {
            *v += color * t;
        }
    }
    out
}

/// Renders every identity of a domain under every camera.
///
/// Samples are ordered identity-major, then camera, then repetition.
pub fn generate_domain(spec: &DomainSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let plane = spec.height * spec.width;
    let pixels = spec.channels * plane;
    let render = render_map(spec.channels, plane, spec.identity_dim, spec.color_scale, spec.render_seed);
    let mut rng = SimRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.num_identities * spec.num_cameras * spec.samples_per_identity_per_camera);
    for i in 0..spec.num_identities {
        let z: Vec<f64> = (0..spec.identity_dim).map(|_| rng.sample(StandardNormal)).collect();
        let base: Vec<f64> =
            render.chunks_exact(spec.identity_dim).map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum()).collect();
        for (camera, style) in spec.camera_styles.iter().enumerate() {
            for _ in 0..spec.samples_per_identity_per_camera {
                let mut data = Vec::with_capacity(pixels);
                for c in 0..spec.channels {
                    for p in 0..plane {
                        let mut v = style.gain[c] * base[c * plane + p] + style.bias[c];
                        if spec.noise_sigma > 0.0 {
                            v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                        }
                        data.push(v);
                    }
                }
                out.push(Sample {
                    image: Tensor::new(vec![spec.channels, spec.height, spec.width], data)?,
                    identity: spec.identity_offset + i,
                    camera,
                    client: spec.client,
                    domain: spec.domain,
                });
            }
        }
    }
    Ok(out)
}

/// Which domains train and which are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Sources train, one held-out domain is the target.
    #[serde(alias = "I")]
    LeaveOneOut,
    /// Like `LeaveOneOut` with `dropped_sources` fewer clients.
    #[serde(alias = "II")]
    ReducedSources,
    /// Every source is also evaluated on its own disjoint test identities.
    #[serde(alias = "III")]
    SourceTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_sources: usize,
    pub identities_per_source: usize,
    pub target_identities: usize,
    pub cameras_per_domain: usize,
    pub samples_per_identity_per_camera: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    /// Weight of per-channel identity color in the render map.
    pub identity_color_scale: f64,
    pub source_gain_range: [f64; 2],
    pub source_bias_range: [f64; 2],
    /// Place target styles outside the per-channel range spanned by sources.
    pub target_style_outside_bank: bool,
    pub target_gain_range: [f64; 2],
    /// Target biases are `±U(range)` with a random sign per channel.
    pub target_bias_magnitude_range: [f64; 2],
    /// Sources removed under the reduced-sources protocol.
    pub dropped_sources: usize,
    /// Held-out identities per source under the source-test protocol.
    pub test_identities_per_source: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_sources: 3,
            identities_per_source: 20,
            target_identities: 20,
            cameras_per_domain: 4,
            samples_per_identity_per_camera: 8,
            channels: 4,
            height: 8,
            width: 8,
            latent_dim: 16,
            noise_sigma: 1.0,
            identity_color_scale: 1.0,
            source_gain_range: [0.6, 1.4],
            source_bias_range: [-0.8, 0.8],
            target_style_outside_bank: true,
            target_gain_range: [1.6, 2.2],
            target_bias_magnitude_range: [1.5, 2.5],
            dropped_sources: 1,
            test_identities_per_source: 10,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data.{m}")));
        if self.num_sources < 2 {
            return bad("num_sources must be at least 2");
        }
        if self.cameras_per_domain < 2 {
            return Err(Error::TargetNotEvaluable("held-out domain needs at least 2 cameras".into()));
        }
        if self.identities_per_source < 2 || self.target_identities < 2 {
            return bad("identities_per_source and target_identities must be at least 2");
        }
        if self.samples_per_identity_per_camera == 0 {
            return bad("samples_per_identity_per_camera must be positive");
        }
        if self.channels * self.height * self.width == 0 || self.latent_dim == 0 {
            return bad("image and latent dimensions must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.identity_color_scale >= 0.0) {
            return bad("noise_sigma and identity_color_scale must be non-negative");
        }
        for (name, r) in [
            ("source_gain_range", self.source_gain_range),
            ("source_bias_range", self.source_bias_range),
            ("target_gain_range", self.target_gain_range),
            ("target_bias_magnitude_range", self.target_bias_magnitude_range),
        ] {
            if !(r[0] <= r[1]) {
                return bad(&format!("{name} must be ordered"));
            }
        }
        if self.source_gain_range[0] <= 0.0 || self.target_gain_range[0] <= 0.0 {
            return bad("gains must be positive");
        }
        Ok(())
    }
}

/// One federation participant's private training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub client: usize,
    pub domain: usize,
    pub samples: Vec<Sample>,
}

impl ClientData {
    /// Sorted distinct identity labels.
    pub fn identities(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.samples.iter().map(|s| s.identity).collect();
        set.into_iter().collect()
    }

    /// Sorted distinct camera labels.
    pub fn cameras(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.samples.iter().map(|s| s.camera).collect();
        set.into_iter().collect()
    }
}

/// An open-set retrieval split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub name: String,
    pub domain: usize,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationDataset {
    pub clients: Vec<ClientData>,
    pub evaluations: Vec<EvalSplit>,
    /// Camera styles per domain, indexed by domain id.
    pub styles: Vec<Vec<CameraStyle>>,
}

impl FederationDataset {
    pub fn num_source_samples(&self) -> usize {
        self.clients.iter().map(|c| c.samples.len()).sum()
    }

    /// SHA-256 over the canonical binary encoding of every split.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clients {
            h.update(encode_samples(&c.samples));
        }
        for e in &self.evaluations {
            h.update(e.name.as_bytes());
            h.update(encode_samples(&e.query));
            h.update(encode_samples(&e.gallery));
        }
        format!("{:x}", h.finalize())
    }
}

fn draw_style(rng: &mut SimRng, channels: usize, gain: [f64; 2], bias: [f64; 2]) -> CameraStyle {
    CameraStyle {
        gain: (0..channels).map(|_| rng.random_range(gain[0]..=gain[1])).collect(),
        bias: (0..channels).map(|_| rng.random_range(bias[0]..=bias[1])).collect(),
    }
}

fn draw_outside_style(rng: &mut SimRng, channels: usize, cfg: &DataConfig) -> CameraStyle {
    let [g0, g1] = cfg.target_gain_range;
    let [b0, b1] = cfg.target_bias_magnitude_range;
    CameraStyle {
        gain: (0..channels).map(|_| rng.random_range(g0..=g1)).collect(),
        bias: (0..channels)
            .map(|_| {
                let m = rng.random_range(b0..=b1);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    }
}

/// Splits a domain's samples so each identity's queries come from one camera
/// (`identity index mod cameras`) and its gallery from the remaining cameras.
fn query_gallery_split(
    name: String,
    domain: usize,
    samples: Vec<Sample>,
    identity_offset: usize,
    num_cameras: usize,
) -> EvalSplit {
    let (query, gallery) = samples.into_iter().partition(|s| s.camera == (s.identity - identity_offset) % num_cameras);
    EvalSplit { name, domain, query, gallery }
}

/// Builds the full federation for a protocol. Deterministic in `(cfg, seed)`.
pub fn generate_federation(cfg: &DataConfig, protocol: Protocol, seed: u64) -> Result<FederationDataset> {
    cfg.validate()?;
    let render_seed = derive_seed(seed, "render", &[]);
    let n_clients = match protocol {
        Protocol::ReducedSources => {
            if cfg.num_sources.saturating_sub(cfg.dropped_sources) < 1 {
                return Err(Error::Config("data.dropped_sources leaves no clients".into()));
            }
            cfg.num_sources - cfg.dropped_sources
        }
        _ => cfg.num_sources,
    };
    let target_domain = cfg.num_sources;

    let mut style_rng = stream(seed, "styles", &[]);
    let mut styles: Vec<Vec<CameraStyle>> = (0..cfg.num_sources)
        .map(|_| {
            (0..cfg.cameras_per_domain)
                .map(|_| draw_style(&mut style_rng, cfg.channels, cfg.source_gain_range, cfg.source_bias_range))
                .collect()
        })
        .collect();
    let target_styles = (0..cfg.cameras_per_domain)
        .map(|_| {
            if cfg.target_style_outside_bank {
                draw_outside_style(&mut style_rng, cfg.channels, cfg)
            } else {
                draw_style(&mut style_rng, cfg.channels, cfg.source_gain_range, cfg.source_bias_range)
            }
        })
        .collect();
    styles.push(target_styles);

    let spec_for = |domain: usize, client: usize, offset: usize, n: usize| DomainSpec {
        domain,
        client,
        identity_offset: offset,
        num_identities: n,
        num_cameras: cfg.cameras_per_domain,
        samples_per_identity_per_camera: cfg.samples_per_identity_per_camera,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
        identity_dim: cfg.latent_dim,
        camera_styles: styles[domain].clone(),
        noise_sigma: cfg.noise_sigma,
        color_scale: cfg.identity_color_scale,
        render_seed,
    };

    let mut clients = Vec::with_capacity(n_clients);
    for k in 0..n_clients {
        let spec = spec_for(k, k, k * cfg.identities_per_source, cfg.identities_per_source);
        let samples = generate_domain(&spec, derive_seed(seed, "domain", &[k as u64]))?;
        clients.push(ClientData { client: k, domain: k, samples });
    }

    let mut next_identity = cfg.num_sources * cfg.identities_per_source;
    let mut evaluations = Vec::new();
    match protocol {
        Protocol::LeaveOneOut | Protocol::ReducedSources => {
            let spec = spec_for(target_domain, target_domain, next_identity, cfg.target_identities);
            let samples = generate_domain(&spec, derive_seed(seed, "domain", &[target_domain as u64]))?;
            evaluations.push(query_gallery_split(
                "target".into(),
                target_domain,
                samples,
                next_identity,
                cfg.cameras_per_domain,
            ));
        }
        Protocol::SourceTest => {
            if cfg.test_identities_per_source < 1 {
                return Err(Error::Config("data.test_identities_per_source must be positive".into()));
            }
            for k in 0..n_clients {
                let spec = spec_for(k, k, next_identity, cfg.test_identities_per_source);
                let samples = generate_domain(&spec, derive_seed(seed, "test", &[k as u64]))?;
                evaluations.push(query_gallery_split(
                    format!("source{k}"),
                    k,
                    samples,
                    next_identity,
                    cfg.cameras_per_domain,
                ));
                next_identity += cfg.test_identities_per_source;
            }
        }
    }
    for e in &evaluations {
        if e.query.is_empty() || e.gallery.is_empty() {
            warn!("evaluation split {} is empty", e.name);
            return Err(Error::TargetNotEvaluable(e.name.clone()));
        }
    }
    Ok(FederationDataset { clients, evaluations, styles })
}

fn encode_samples(samples: &[Sample]) -> Vec<u8> {
    let mut w = Writer::new();
    for s in samples {
        w.f64s(s.image.data());
    }
    w.finish()
}

const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SplitManifest {
    name: String,
    role: String,
    client: Option<usize>,
    domain: usize,
    file: String,
    count: usize,
    identities: Vec<usize>,
    cameras: Vec<usize>,
    clients: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportManifest {
    version: u32,
    shape: [usize; 3],
    dtype: String,
    byte_order: String,
    splits: Vec<SplitManifest>,
    styles: Vec<Vec<CameraStyle>>,
}

/// Writes the federation as flat little-endian `f64` tensors plus
/// `manifest.json` describing shapes, labels and splits.
pub fn export_federation(ds: &FederationDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let shape = ds
        .clients
        .first()
        .and_then(|c| c.samples.first())
        .map(|s| s.image.dims3())
        .transpose()?
        .ok_or_else(|| Error::InvalidArgument("empty federation".into()))?;
    let mut splits = Vec::new();
    let mut put = |name: String, role: &str, client: Option<usize>, domain: usize, samples: &[Sample]| -> Result<()> {
        let file = format!("{name}.bin");
        std::fs::write(dir.join(&file), encode_samples(samples))?;
        splits.push(SplitManifest {
            name,
            role: role.into(),
            client,
            domain,
            file,
            count: samples.len(),
            identities: samples.iter().map(|s| s.identity).collect(),
            cameras: samples.iter().map(|s| s.camera).collect(),
            clients: samples.iter().map(|s| s.client).collect(),
        });
        Ok(())
    };
    for c in &ds.clients {
        put(format!("client{}", c.client), "train", Some(c.client), c.domain, &c.samples)?;
    }
    for e in &ds.evaluations {
        put(format!("{}_query", e.name), "query", None, e.domain, &e.query)?;
        put(format!("{}_gallery", e.name), "gallery", None, e.domain, &e.gallery)?;
    }
    let manifest = ExportManifest {
        version: EXPORT_VERSION,
        shape: [shape.0, shape.1, shape.2],
        dtype: "f64".into(),
        byte_order: "little".into(),
        splits,
        styles: ds.styles.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a directory written by [`export_federation`].
pub fn import_federation(dir: &Path) -> Result<FederationDataset> {
    let manifest: ExportManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != EXPORT_VERSION {
        return Err(Error::Format(format!("unsupported export version {}", manifest.version)));
    }
    let [c, h, w] = manifest.shape;
    let per = c * h * w;
    let load = |m: &SplitManifest| -> Result<Vec<Sample>> {
        let bytes = std::fs::read(dir.join(&m.file))?;
        let mut r = Reader::new(&bytes);
        let mut out = Vec::with_capacity(m.count);
        for i in 0..m.count {
            out.push(Sample {
                image: Tensor::new(vec![c, h, w], r.f64s(per)?)?,
                identity: m.identities[i],
                camera: m.cameras[i],
                client: m.clients[i],
                domain: m.domain,
            });
        }
        r.expect_end()?;
        Ok(out)
    };
    let mut clients = Vec::new();
    let mut evaluations: Vec<EvalSplit> = Vec::new();
    for m in &manifest.splits {
        match m.role.as_str() {
            "train" => clients.push(ClientData {
                client: m.client.ok_or_else(|| Error::Format("train split without client".into()))?,
                domain: m.domain,
                samples: load(m)?,
            }),
            "query" => evaluations.push(EvalSplit {
                name: m.name.trim_end_matches("_query").to_string(),
                domain: m.domain,
                query: load(m)?,
                gallery: Vec::new(),
            }),
            "gallery" => {
                let name = m.name.trim_end_matches("_gallery");
                let split = evaluations
                    .iter_mut()
                    .find(|e| e.name == name)
                    .ok_or_else(|| Error::Format(format!("gallery {name} before its query")))?;
                split.gallery = load(m)?;
            }
            other => return Err(Error::Format(format!("unknown split role {other}"))),
        }
    }
    Ok(FederationDataset { clients, evaluations, styles: manifest.styles })
}
