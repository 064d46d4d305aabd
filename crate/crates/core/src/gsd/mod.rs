//! Camera-style templates, the shared style bank, template-based
//! re-normalization, and the metadata-degradation tools (label corruption and
//! k-means pseudo-grouping) used when camera ids are unreliable.

mod kmeans;

use std::collections::BTreeSet;

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, KMeansResult};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{channel_stats, pooled_channel_stats, ChannelStats, Tensor};

/// Where stylization templates are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    /// Any template in the bank.
    Global,
    /// Only the drawing client's own templates.
    Local,
    /// Statistics drawn uniformly from configured ranges.
    RandomStat,
}

/// Which labels group images into templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataSetting {
    Clean,
    /// A fraction of camera labels re-drawn to a different camera.
    Corrupt,
    /// Camera labels discarded and replaced by k-means pseudo-groups.
    PseudoGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GsdConfig {
    /// Train on a stylized view alongside each original.
    pub enabled: bool,
    pub scope: ScopeKind,
    pub epsilon: f64,
    pub metadata: MetadataSetting,
    pub corruption_fraction: f64,
    /// Pseudo-groups per client; `0` uses the client's camera count.
    pub pseudo_groups: usize,
    /// Rebuild the bank from fresh uploads at every round.
    pub refresh_each_round: bool,
    pub random_mean_range: [f64; 2],
    pub random_var_range: [f64; 2],
    /// Random-stat draws perturb the image's own statistics (mean offset,
    /// variance multiplier) instead of replacing them.
    pub random_relative: bool,
}

impl Default for GsdConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scope: ScopeKind::Global,
            epsilon: 1e-5,
            metadata: MetadataSetting::Clean,
            corruption_fraction: 0.3,
            pseudo_groups: 0,
            refresh_each_round: false,
            random_mean_range: [-0.5, 0.5],
            random_var_range: [0.5, 1.5],
            random_relative: true,
        }
    }
}

impl GsdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("gsd.epsilon must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return Err(Error::Config("gsd.corruption_fraction must lie in [0, 1]".into()));
        }
        let [m0, m1] = self.random_mean_range;
        let [v0, v1] = self.random_var_range;
        if !(m0 <= m1) || !(0.0 <= v0 && v0 <= v1) {
            return Err(Error::Config("gsd random ranges must be ordered, variances non-negative".into()));
        }
        Ok(())
    }
}

/// Channel statistics of one camera (or pseudo-group) of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTemplate {
    pub stats: ChannelStats,
    pub origin_client: usize,
    pub origin_group: usize,
}

/// Group id carried by templates synthesized from random statistics.
pub const RANDOM_GROUP: usize = usize::MAX;

/// One template per declared group, pooled over all pixels of its images.
/// Declared groups with no member images are skipped with a warning.
pub fn extract_templates<T: AsRef<Tensor>>(
    client: usize,
    images: &[T],
    labels: &[usize],
    groups: &[usize],
) -> Result<Vec<StyleTemplate>> {
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch { expected: vec![images.len()], actual: vec![labels.len()] });
    }
    let declared: BTreeSet<usize> = groups.iter().copied().collect();
    let mut out = Vec::with_capacity(declared.len());
    for g in declared {
        let members: Vec<&Tensor> =
            images.iter().zip(labels).filter(|(_, &l)| l == g).map(|(x, _)| x.as_ref()).collect();
        if members.is_empty() {
            warn!("client {client}: style group {g} is empty, skipped");
            continue;
        }
        out.push(StyleTemplate { stats: pooled_channel_stats(&members)?, origin_client: client, origin_group: g });
    }
    Ok(out)
}

/// Union of all uploaded templates, ordered by `(client, group)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleBank {
    templates: Vec<StyleTemplate>,
}

pub fn build_bank(uploads: Vec<Vec<StyleTemplate>>) -> Result<StyleBank> {
    let mut templates: Vec<StyleTemplate> = uploads.into_iter().flatten().collect();
    if templates.is_empty() {
        return Err(Error::EmptyBank);
    }
    let c = templates[0].stats.channels();
    if templates.iter().any(|t| t.stats.channels() != c || t.stats.var.len() != c) {
        return Err(Error::InvalidArgument("templates disagree on channel count".into()));
    }
    templates.sort_by_key(|t| (t.origin_client, t.origin_group));
    Ok(StyleBank { templates })
}

const BANK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BankJson {
    version: u32,
    channels: usize,
    templates: Vec<TemplateJson>,
}

#[derive(Serialize, Deserialize)]
struct TemplateJson {
    client: usize,
    group: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl StyleBank {
    pub fn templates(&self) -> &[StyleTemplate] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.templates[0].stats.channels()
    }

    /// Binary form: `u32` version, `u32` channels, `u32` count, then per
    /// template `u32` client, `u32` group, `channels` mean `f64`s and
    /// `channels` variance `f64`s; all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(BANK_VERSION).u32(self.channels() as u32).u32(self.len() as u32);
        for t in &self.templates {
            w.u32(t.origin_client as u32).u32(t.origin_group as u32).f64s(&t.stats.mean).f64s(&t.stats.var);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let c = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut templates = Vec::with_capacity(n);
        for _ in 0..n {
            let origin_client = r.u32()? as usize;
            let origin_group = r.u32()? as usize;
            let mean = r.f64s(c)?;
            let var = r.f64s(c)?;
            templates.push(StyleTemplate { stats: ChannelStats { mean, var }, origin_client, origin_group });
        }
        r.expect_end()?;
        if templates.is_empty() {
            return Err(Error::EmptyBank);
        }
        Ok(Self { templates })
    }

    /// Human-readable twin of [`Self::to_bytes`].
    pub fn to_json(&self) -> Result<String> {
        let doc = BankJson {
            version: BANK_VERSION,
            channels: self.channels(),
            templates: self
                .templates
                .iter()
                .map(|t| TemplateJson {
                    client: t.origin_client,
                    group: t.origin_group,
                    mean: t.stats.mean.clone(),
                    var: t.stats.var.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: BankJson = serde_json::from_str(text)?;
        build_bank(vec![doc
            .templates
            .into_iter()
            .map(|t| StyleTemplate {
                stats: ChannelStats { mean: t.mean, var: t.var },
                origin_client: t.client,
                origin_group: t.group,
            })
            .collect()])
    }
}

/// Re-normalizes each channel of `x` to the template's mean and variance:
/// `x_hat = (x - mu(x)) / sqrt(var(x) + eps)`, `x' = x_hat * sqrt(var_s) + mu_s`.
pub fn stylize(x: &Tensor, template: &ChannelStats, epsilon: f64) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if template.channels() != c {
        return Err(Error::ShapeMismatch { expected: vec![c], actual: vec![template.channels()] });
    }
    let own = channel_stats(x)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        let denom = (own.var[ch] + epsilon).sqrt();
        let scale = template.var[ch].max(0.0).sqrt();
        for &v in x.channel(ch) {
            let normalized = if denom > 0.0 { (v - own.mean[ch]) / denom } else { 0.0 };
            out.push(normalized * scale + template.mean[ch]);
        }
    }
    debug_assert_eq!(out.len(), c * plane);
    Tensor::new(x.shape().to_vec(), out)
}

/// `own` shifted by `draw.mean` and scaled by `draw.var` per channel.
pub fn perturb_stats(own: &ChannelStats, draw: &ChannelStats) -> ChannelStats {
    ChannelStats {
        mean: own.mean.iter().zip(&draw.mean).map(|(m, d)| m + d).collect(),
        var: own.var.iter().zip(&draw.var).map(|(v, d)| v * d).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingScope {
    Global,
    Local(usize),
    RandomStat { mean_range: [f64; 2], var_range: [f64; 2] },
}

/// Draws one template according to `scope`.
pub fn sample_template<R: Rng>(bank: &StyleBank, rng: &mut R, scope: SamplingScope) -> Result<StyleTemplate> {
    match scope {
        SamplingScope::Global => {
            if bank.is_empty() {
                return Err(Error::EmptyBank);
            }
            Ok(bank.templates[rng.random_range(0..bank.len())].clone())
        }
        SamplingScope::Local(k) => {
            let own: Vec<&StyleTemplate> = bank.templates.iter().filter(|t| t.origin_client == k).collect();
            if own.is_empty() {
                return Err(Error::InvalidArgument(format!("no templates from client {k}")));
            }
            Ok(own[rng.random_range(0..own.len())].clone())
        }
        SamplingScope::RandomStat { mean_range, var_range } => {
            let c = bank.channels();
            let mean = (0..c).map(|_| rng.random_range(mean_range[0]..=mean_range[1])).collect();
            let var = (0..c).map(|_| rng.random_range(var_range[0]..=var_range[1])).collect();
            Ok(StyleTemplate {
                stats: ChannelStats { mean, var },
                origin_client: usize::MAX,
                origin_group: RANDOM_GROUP,
            })
        }
    }
}

/// Re-draws exactly `round(fraction * n)` labels, each to a uniformly chosen
/// camera from `camera_set` other than the original.
pub fn corrupt_camera_ids<R: Rng>(
    cameras: &[usize],
    camera_set: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    let set: Vec<usize> = camera_set.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if set.len() < 2 {
        return Err(Error::InvalidArgument("cannot corrupt camera ids of a single-camera client".into()));
    }
    let n = (fraction * cameras.len() as f64).round() as usize;
    let mut out = cameras.to_vec();
    for i in sample(rng, cameras.len(), n) {
        let others: Vec<usize> = set.iter().copied().filter(|&c| c != cameras[i]).collect();
        out[i] = others[rng.random_range(0..others.len())];
    }
    Ok(out)
}

/// Pseudo-group labels from k-means over per-image `(mean, var)` vectors.
pub fn pseudo_group<T: AsRef<Tensor>, R: Rng>(images: &[T], num_groups: usize, rng: &mut R) -> Result<Vec<usize>> {
    if num_groups == 0 || num_groups > images.len() {
        return Err(Error::InvalidArgument(format!("cannot form {num_groups} groups from {} images", images.len())));
    }
    let features =
        images.iter().map(|x| channel_stats(x.as_ref()).map(|s| s.to_feature())).collect::<Result<Vec<_>>>()?;
    Ok(kmeans(&features, num_groups, rng, 100, 1e-6).labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    type TestRng = rand_chacha::ChaCha8Rng;

    fn t(c: usize, h: usize, w: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], v).unwrap()
    }

    fn stats(mean: Vec<f64>, var: Vec<f64>) -> ChannelStats {
        ChannelStats { mean, var }
    }

    fn template(client: usize, group: usize, m: f64) -> StyleTemplate {
        StyleTemplate { stats: stats(vec![m], vec![1.0]), origin_client: client, origin_group: group }
    }

    #[test]
    fn template_of_constant_image() {
        let img = Tensor::filled(vec![2, 2, 2], 2.0);
        let ts = extract_templates(0, &[img], &[0], &[0]).unwrap();
        assert_eq!(ts[0].stats, stats(vec![2.0; 2], vec![0.0; 2]));
    }

    #[test]
    fn templates_per_group_and_empty_groups_skipped() {
        let imgs = vec![t(1, 1, 1, vec![1.0]), t(1, 1, 1, vec![3.0]), t(1, 1, 1, vec![10.0])];
        let ts = extract_templates(2, &imgs, &[0, 0, 1], &[0, 1, 5]).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].stats, stats(vec![2.0], vec![1.0]));
        assert_eq!(ts[1].stats, stats(vec![10.0], vec![0.0]));
        assert_eq!((ts[1].origin_client, ts[1].origin_group), (2, 1));
    }

    #[test]
    fn bank_counts_sorts_and_keeps_duplicates() {
        let uploads: Vec<Vec<StyleTemplate>> =
            (0..3).rev().map(|k| (0..4).map(|c| template(k, c, 0.5)).collect()).collect();
        let bank = build_bank(uploads).unwrap();
        assert_eq!(bank.len(), 12);
        let keys: Vec<(usize, usize)> = bank.templates().iter().map(|t| (t.origin_client, t.origin_group)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(matches!(build_bank(vec![vec![]]), Err(Error::EmptyBank)));
    }

    #[test]
    fn bank_is_upload_order_invariant() {
        let a = vec![vec![template(0, 0, 1.0), template(0, 1, 2.0)], vec![template(1, 0, 3.0)]];
        let b = vec![vec![template(1, 0, 3.0)], vec![template(0, 1, 2.0), template(0, 0, 1.0)]];
        assert_eq!(build_bank(a).unwrap(), build_bank(b).unwrap());
    }

    #[test]
    fn bank_serialization_round_trips() {
        let bank = build_bank(vec![vec![
            StyleTemplate { stats: stats(vec![0.1, -2.5], vec![1.0 / 3.0, 7.0]), origin_client: 0, origin_group: 3 },
            StyleTemplate { stats: stats(vec![0.1, -2.5], vec![1.0 / 3.0, 7.0]), origin_client: 1, origin_group: 0 },
        ]])
        .unwrap();
        let bytes = bank.to_bytes();
        assert_eq!(bytes.len(), 12 + 2 * (8 + 4 * 8));
        let back = StyleBank::from_bytes(&bytes).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(StyleBank::from_json(&bank.to_json().unwrap()).unwrap(), bank);
        assert!(StyleBank::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn stylize_example() {
        let x = t(1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]);
        let y = stylize(&x, &stats(vec![0.0], vec![1.0]), 0.0).unwrap();
        let expected = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn stylize_identity_and_constant_limit() {
        let x = t(2, 1, 3, vec![0.5, -1.0, 2.0, 4.0, 4.5, 3.0]);
        let same = stylize(&x, &channel_stats(&x).unwrap(), 0.0).unwrap();
        assert!(same.max_abs_diff(&x) < 1e-6);
        let flat = Tensor::filled(vec![2, 2, 2], 3.0);
        let y = stylize(&flat, &stats(vec![-1.0, 5.0], vec![4.0, 9.0]), 1e-5).unwrap();
        assert!(y.channel(0).iter().all(|v| (v + 1.0).abs() < 1e-9));
        assert!(y.channel(1).iter().all(|v| (v - 5.0).abs() < 1e-9));
    }

    #[test]
    fn stylize_rejects_channel_mismatch() {
        let x = Tensor::filled(vec![2, 1, 1], 0.0);
        assert!(stylize(&x, &stats(vec![0.0], vec![1.0]), 0.0).is_err());
    }

    #[test]
    fn singleton_bank_always_returns_it() {
        let bank = build_bank(vec![vec![template(0, 0, 4.0)]]).unwrap();
        let mut rng = TestRng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(sample_template(&bank, &mut rng, SamplingScope::Global).unwrap(), bank.templates()[0]);
        }
    }

    #[test]
    fn global_sampling_is_uniform() {
        let uploads = (0..3).map(|k| (0..4).map(|c| template(k, c, (k * 4 + c) as f64)).collect()).collect();
        let bank = build_bank(uploads).unwrap();
        let mut rng = TestRng::seed_from_u64(5);
        let mut counts = [0usize; 12];
        for _ in 0..12000 {
            let t = sample_template(&bank, &mut rng, SamplingScope::Global).unwrap();
            counts[t.origin_client * 4 + t.origin_group] += 1;
        }
        // Binomial(12000, 1/12): sd ~ 30, so +-150 is a 5-sigma band.
        for c in counts {
            assert!((850..=1150).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn local_and_random_scopes() {
        let bank = build_bank(vec![vec![template(0, 0, 1.0), template(1, 0, 2.0), template(1, 1, 3.0)]]).unwrap();
        let mut rng = TestRng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(sample_template(&bank, &mut rng, SamplingScope::Local(1)).unwrap().origin_client, 1);
        }
        assert!(sample_template(&bank, &mut rng, SamplingScope::Local(7)).is_err());
        let scope = SamplingScope::RandomStat { mean_range: [0.5, 3.5], var_range: [0.5, 1.5] };
        for _ in 0..1000 {
            let t = sample_template(&bank, &mut rng, scope).unwrap();
            assert!(bank.templates().iter().all(|b| b.stats != t.stats));
        }
    }

    #[test]
    fn perturbation_shifts_and_scales() {
        let own = stats(vec![1.0, -2.0], vec![4.0, 0.5]);
        let draw = stats(vec![0.25, 0.0], vec![0.5, 2.0]);
        assert_eq!(perturb_stats(&own, &draw), stats(vec![1.25, -2.0], vec![2.0, 1.0]));
        let x = t(2, 1, 2, vec![0.0, 2.0, -3.0, -1.0]);
        let y =
            stylize(&x, &perturb_stats(&channel_stats(&x).unwrap(), &stats(vec![0.0; 2], vec![1.0; 2])), 0.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn corruption_counts() {
        let mut rng = TestRng::seed_from_u64(2);
        let cams: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let set = [0, 1, 2, 3];
        assert_eq!(corrupt_camera_ids(&cams, &set, 0.0, &mut rng).unwrap(), cams);
        let all = corrupt_camera_ids(&cams, &set, 1.0, &mut rng).unwrap();
        assert!(all.iter().zip(&cams).all(|(a, b)| a != b));
        let some = corrupt_camera_ids(&cams, &set, 0.3, &mut rng).unwrap();
        assert_eq!(some.iter().zip(&cams).filter(|(a, b)| a != b).count(), 30);
        assert!(corrupt_camera_ids(&[0, 0], &[0], 0.5, &mut rng).is_err());
    }

    #[test]
    fn pseudo_groups_recover_cameras() {
        // Two style populations: per-channel offsets 0 and 6, gains 1 and 2.
        let mut rng = TestRng::seed_from_u64(3);
        let mut imgs = Vec::new();
        let mut truth = Vec::new();
        for i in 0..20 {
            let cam = i % 2;
            let (g, b) = if cam == 0 { (1.0, 0.0) } else { (2.0, 6.0) };
            let base: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            imgs.push(t(2, 2, 2, base.iter().map(|v| g * v + b).collect()));
            truth.push(cam);
        }
        let labels = pseudo_group(&imgs, 2, &mut rng).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(labels[i] == labels[j], truth[i] == truth[j]);
            }
        }
        assert!(pseudo_group(&imgs, 1, &mut rng).unwrap().iter().all(|&l| l == 0));
        assert!(pseudo_group(&imgs, 21, &mut rng).is_err());
    }
}
