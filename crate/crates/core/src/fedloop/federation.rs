use std::collections::BTreeMap;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, aggregate_heads, ClientUpdate};
use super::losses::TripletMining;
use super::objective::{local_objective_grad, LocalBatch, LocalModel, ObjectiveConfig, Sgd, ViewLosses};
use crate::config::ExperimentConfig;
use crate::csa::{embed_client, run_csa_phase, train_tokens, CsaOutcome};
use crate::encoders::{
    cache_prototypes, Architecture, ClassifierHead, EncoderParams, PromptTokens, PrototypeSet, TextEncoderSurrogate,
};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_encoder, EvalMetrics, MarginReport};
use crate::gsd::{
    build_bank, corrupt_camera_ids, extract_templates, perturb_stats, pseudo_group, sample_template, stylize,
    MetadataSetting, SamplingScope, ScopeKind, StyleBank, StyleTemplate,
};
use crate::numerics::{channel_stats, Tensor};
use crate::rng::{derive_seed, stream};
use crate::sampling::PkSampler;
use crate::synthdata::{ClientData, FederationDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchoring {
    /// Prototypes cached once after Phase I and never touched again.
    Static,
    /// Tokens keep training against the current global encoder at the start
    /// of every round and prototypes are re-derived from them.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_identities: usize,
    pub batch_instances: usize,
    /// Weight of the alignment term.
    pub lambda_align: f64,
    pub margin: f64,
    pub temperature: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied to `lr` for rounds after `floor(2R/3)`.
    pub lr_decay_factor: f64,
    pub anchoring: Anchoring,
    /// Token epochs per round under dynamic anchoring.
    pub dynamic_token_epochs: usize,
    pub mining: TripletMining,
    /// One head over all source identities, averaged like the encoder.
    pub shared_head: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 40,
            local_epochs: 1,
            batch_identities: 4,
            batch_instances: 4,
            lambda_align: 1.0,
            margin: 0.3,
            temperature: 0.07,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            anchoring: Anchoring::Static,
            dynamic_token_epochs: 5,
            mining: TripletMining::BatchHard,
            shared_head: false,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("fed.{m}")));
        if self.batch_identities < 2 || self.batch_instances < 2 {
            return bad("batch_identities and batch_instances must be at least 2");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be positive");
        }
        if !(self.lambda_align >= 0.0) || !(self.margin >= 0.0) {
            return bad("lambda_align and margin must be non-negative");
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) {
            return bad("temperature and lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.lr_decay_factor > 0.0) {
            return bad("momentum must lie in [0, 1), weight_decay and lr_decay_factor non-negative");
        }
        Ok(())
    }

    /// Learning rate of 1-based round `r`.
    pub fn lr_at(&self, round: usize) -> f64 {
        if round > 2 * self.rounds / 3 {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda_align,
            margin: self.margin,
            temperature: self.temperature,
            mining: self.mining,
        }
    }
}

/// Client-side state that persists across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client: usize,
    /// Camera labels as seen under the metadata setting (possibly corrupted
    /// or pseudo-groups).
    pub groups: Vec<usize>,
    pub templates: Vec<StyleTemplate>,
    pub head: ClassifierHead,
    pub head_targets: Vec<usize>,
    pub csa: Option<CsaOutcome>,
}

/// Everything fixed before the first round.
#[derive(Debug, Clone)]
pub struct PreparedFederation {
    pub initial_encoder: EncoderParams,
    pub surrogate: TextEncoderSurrogate,
    pub clients: Vec<ClientState>,
    pub bank: StyleBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client: usize,
    pub n_samples: usize,
    pub start_fingerprint: u64,
    pub original: ViewLosses,
    pub stylized: Option<ViewLosses>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub lr: f64,
    pub clients: Vec<ClientRoundStats>,
    pub evaluations: Vec<EvalMetrics>,
    /// Mean over evaluation splits.
    pub map: f64,
    pub rank1: f64,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub reports: Vec<RoundReport>,
    pub encoder: EncoderParams,
    pub heads: Vec<ClassifierHead>,
    pub initial_prototypes: Vec<Option<PrototypeSet>>,
    pub final_prototypes: Vec<Option<PrototypeSet>>,
    pub bank: StyleBank,
    pub bank_builds: usize,
    /// Evaluation of the final encoder; present even when `rounds == 0`.
    pub final_metrics: Vec<EvalMetrics>,
    pub final_margins: Vec<MarginReport>,
}

pub fn architecture(ds: &FederationDataset, cfg: &ExperimentConfig) -> Result<Architecture> {
    let first = ds
        .clients
        .first()
        .and_then(|c| c.samples.first())
        .ok_or_else(|| Error::InvalidArgument("federation has no training samples".into()))?;
    Ok(Architecture { input_dim: first.image.len(), hidden: cfg.model.hidden, embed_dim: cfg.model.embed_dim })
}

fn metadata_groups(client: &ClientData, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<usize>> {
    let cameras: Vec<usize> = client.samples.iter().map(|s| s.camera).collect();
    let mut rng = stream(seed, "metadata", &[client.client as u64]);
    match cfg.gsd.metadata {
        MetadataSetting::Clean => Ok(cameras),
        MetadataSetting::Corrupt => {
            corrupt_camera_ids(&cameras, &client.cameras(), cfg.gsd.corruption_fraction, &mut rng)
        }
        MetadataSetting::PseudoGroup => {
            let k = if cfg.gsd.pseudo_groups == 0 { client.cameras().len() } else { cfg.gsd.pseudo_groups };
            let images: Vec<&Tensor> = client.samples.iter().map(|s| &s.image).collect();
            pseudo_group(&images, k.min(images.len()), &mut rng)
        }
    }
}

/// Initialization, Phase I on every client, template upload and the bank.
pub fn prepare_federation(ds: &FederationDataset, cfg: &ExperimentConfig, seed: u64) -> Result<PreparedFederation> {
    cfg.validate()?;
    let arch = architecture(ds, cfg)?;
    let initial_encoder = EncoderParams::init(arch, derive_seed(seed, "encoder", &[]));
    let surrogate =
        TextEncoderSurrogate::new(cfg.model.token_dim, cfg.model.embed_dim, derive_seed(seed, "surrogate", &[]));
    let global_ids: Vec<usize> = {
        let mut v: Vec<usize> = ds.clients.iter().flat_map(|c| c.identities()).collect();
        v.sort_unstable();
        v
    };
    let clients = ds
        .clients
        .par_iter()
        .map(|client| {
            let groups = metadata_groups(client, cfg, seed)?;
            let images: Vec<&Tensor> = client.samples.iter().map(|s| &s.image).collect();
            let templates = extract_templates(client.client, &images, &groups, &groups)?;
            let label_space = if cfg.fed.shared_head { global_ids.clone() } else { client.identities() };
            let index: BTreeMap<usize, usize> = label_space.iter().enumerate().map(|(i, &y)| (y, i)).collect();
            let head_targets = client.samples.iter().map(|s| index[&s.identity]).collect();
            let head_seed = if cfg.fed.shared_head {
                derive_seed(seed, "head", &[])
            } else {
                derive_seed(seed, "head", &[client.client as u64])
            };
            let head = ClassifierHead::init(label_space.len(), arch.embed_dim, head_seed);
            let csa = if cfg.csa.enabled {
                // Phase I sees the same camera metadata as the style bank.
                let mut seen = client.clone();
                for (s, &g) in seen.samples.iter_mut().zip(&groups) {
                    s.camera = g;
                }
                Some(run_csa_phase(&seen, &initial_encoder, &surrogate, &cfg.csa, seed)?)
            } else {
                None
            };
            Ok(ClientState { client: client.client, groups, templates, head, head_targets, csa })
        })
        .collect::<Result<Vec<ClientState>>>()?;
    let bank = build_bank(clients.iter().map(|c| c.templates.clone()).collect())?;
    Ok(PreparedFederation { initial_encoder, surrogate, clients, bank })
}

fn scope_for(cfg: &ExperimentConfig, client: usize) -> SamplingScope {
    match cfg.gsd.scope {
        ScopeKind::Global => SamplingScope::Global,
        ScopeKind::Local => SamplingScope::Local(client),
        ScopeKind::RandomStat => {
            SamplingScope::RandomStat { mean_range: cfg.gsd.random_mean_range, var_range: cfg.gsd.random_var_range }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_client(
    client: &ClientData,
    state: &ClientState,
    head: &ClassifierHead,
    global: &EncoderParams,
    prototypes: Option<&PrototypeSet>,
    bank: &StyleBank,
    cfg: &ExperimentConfig,
    round: usize,
    seed: u64,
) -> Result<ClientUpdate> {
    let mut model = LocalModel { encoder: global.clone(), head: head.clone() };
    let mut opt = Sgd::new(model.num_params(), cfg.fed.momentum, cfg.fed.weight_decay);
    let mut rng = stream(seed, "train", &[round as u64, client.client as u64]);
    let labels: Vec<usize> = client.samples.iter().map(|s| s.identity).collect();
    let sampler = PkSampler::new(&labels, cfg.fed.batch_identities, cfg.fed.batch_instances);
    let objective = cfg.fed.objective();
    let scope = scope_for(cfg, client.client);
    let lr = cfg.fed.lr_at(round);
    let (mut orig, mut styl, mut total, mut steps) = (ViewLosses::default(), ViewLosses::default(), 0.0, 0usize);
    for _ in 0..cfg.fed.local_epochs {
        for batch in sampler.epoch(&mut rng) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &client.samples[i].image).collect();
            let stylized = if cfg.gsd.enabled {
                let mut out = Vec::with_capacity(images.len());
                for x in &images {
                    let t = sample_template(bank, &mut rng, scope)?;
                    let stats = match scope {
                        SamplingScope::RandomStat { .. } if cfg.gsd.random_relative => {
                            perturb_stats(&channel_stats(x)?, &t.stats)
                        }
                        _ => t.stats,
                    };
                    out.push(stylize(x, &stats, cfg.gsd.epsilon)?);
                }
                Some(out)
            } else {
                None
            };
            let lb = LocalBatch {
                images,
                stylized,
                identities: batch.iter().map(|&i| labels[i]).collect(),
                head_targets: batch.iter().map(|&i| state.head_targets[i]).collect(),
            };
            let (value, grad) = local_objective_grad(&model, &lb, prototypes, &objective)?;
            opt.step(model.params_mut(), &grad, lr);
            for (acc, v) in [(&mut orig, Some(value.original)), (&mut styl, value.stylized)] {
                if let Some(v) = v {
                    acc.id += v.id;
                    acc.tri += v.tri;
                    acc.align += v.align;
                }
            }
            total += value.total;
            steps += 1;
        }
    }
    let mean = |v: ViewLosses| {
        let n = steps.max(1) as f64;
        ViewLosses { id: v.id / n, tri: v.tri / n, align: v.align / n }
    };
    Ok(ClientUpdate {
        client: client.client,
        start_fingerprint: global.fingerprint(),
        encoder: model.encoder,
        head: model.head,
        n_samples: client.samples.len(),
        original: mean(orig),
        stylized: cfg.gsd.enabled.then(|| mean(styl)),
        objective: total / steps.max(1) as f64,
    })
}

fn evaluate_all(
    encoder: &EncoderParams,
    ds: &FederationDataset,
    bins: usize,
) -> Result<(Vec<EvalMetrics>, Vec<MarginReport>)> {
    let pairs = ds.evaluations.par_iter().map(|s| evaluate_encoder(encoder, s, bins)).collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

fn mean_of(ms: &[EvalMetrics], f: impl Fn(&EvalMetrics) -> f64) -> f64 {
    ms.iter().map(f).sum::<f64>() / ms.len().max(1) as f64
}

/// Phase I state of client `k` refined against `encoder` for a few epochs.
#[allow(clippy::too_many_arguments)]
fn refresh_anchor(
    client: &ClientData,
    state: &ClientState,
    tokens: &PromptTokens,
    encoder: &EncoderParams,
    surrogate: &TextEncoderSurrogate,
    cfg: &ExperimentConfig,
    round: usize,
    seed: u64,
) -> Result<(PromptTokens, PrototypeSet)> {
    let (embeddings, labels, _) = embed_client(client, encoder)?;
    let mut tokens = tokens.clone();
    let mut rng = stream(seed, "dynamic", &[round as u64, client.client as u64]);
    train_tokens(
        &mut tokens,
        &embeddings,
        &labels,
        &state.groups,
        surrogate,
        &cfg.csa,
        cfg.fed.dynamic_token_epochs,
        &mut rng,
    )?;
    let protos = PrototypeSet::new(cache_prototypes(surrogate, &tokens, &client.identities())?);
    Ok((tokens, protos))
}

/// Rounds `1..=R`: broadcast, local training, weighted aggregation of the
/// encoder, evaluation.
pub fn run_federation(
    ds: &FederationDataset,
    prepared: &PreparedFederation,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<FederationOutcome> {
    let mut global = prepared.initial_encoder.clone();
    let mut heads: Vec<ClassifierHead> = prepared.clients.iter().map(|c| c.head.clone()).collect();
    let initial_prototypes: Vec<Option<PrototypeSet>> =
        prepared.clients.iter().map(|c| c.csa.as_ref().map(|o| o.prototypes.clone())).collect();
    let mut prototypes = initial_prototypes.clone();
    let mut tokens: Vec<Option<PromptTokens>> =
        prepared.clients.iter().map(|c| c.csa.as_ref().map(|o| o.tokens.clone())).collect();
    let mut bank = prepared.bank.clone();
    let mut bank_builds = 1;
    let mut reports = Vec::with_capacity(cfg.fed.rounds);
    let dynamic = cfg.csa.enabled && cfg.fed.anchoring == Anchoring::Dynamic;
    for round in 1..=cfg.fed.rounds {
        if cfg.gsd.refresh_each_round && round > 1 {
            bank = build_bank(prepared.clients.iter().map(|c| c.templates.clone()).collect())?;
            bank_builds += 1;
        }
        if dynamic {
            let refreshed = ds
                .clients
                .par_iter()
                .zip(&prepared.clients)
                .zip(&tokens)
                .map(|((client, state), tok)| match tok {
                    Some(t) => {
                        refresh_anchor(client, state, t, &global, &prepared.surrogate, cfg, round, seed).map(Some)
                    }
                    None => Ok(None),
                })
                .collect::<Result<Vec<_>>>()?;
            for (k, r) in refreshed.into_iter().enumerate() {
                if let Some((t, p)) = r {
                    tokens[k] = Some(t);
                    prototypes[k] = Some(p);
                }
            }
        }
        let updates = ds
            .clients
            .par_iter()
            .enumerate()
            .map(|(k, client)| {
                let protos = if cfg.csa.enabled { prototypes[k].as_ref() } else { None };
                train_client(client, &prepared.clients[k], &heads[k], &global, protos, &bank, cfg, round, seed)
            })
            .collect::<Result<Vec<ClientUpdate>>>()?;
        global = aggregate(&updates)?;
        if cfg.fed.shared_head {
            let h = aggregate_heads(&updates)?;
            heads.iter_mut().for_each(|x| *x = h.clone());
        } else {
            for (h, u) in heads.iter_mut().zip(&updates) {
                *h = u.head.clone();
            }
        }
        let (evaluations, _) = evaluate_all(&global, ds, cfg.eval.margin_bins)?;
        let report = RoundReport {
            round,
            lr: cfg.fed.lr_at(round),
            clients: updates
                .iter()
                .map(|u| ClientRoundStats {
                    client: u.client,
                    n_samples: u.n_samples,
                    start_fingerprint: u.start_fingerprint,
                    original: u.original,
                    stylized: u.stylized,
                    objective: u.objective,
                })
                .collect(),
            map: mean_of(&evaluations, |m| m.map),
            rank1: mean_of(&evaluations, |m| m.rank1),
            evaluations,
        };
        debug!("round {round}: mAP {:.4} rank1 {:.4}", report.map, report.rank1);
        reports.push(report);
    }
    let (final_metrics, final_margins) = evaluate_all(&global, ds, cfg.eval.margin_bins)?;
    info!("final mAP {:.4}", mean_of(&final_metrics, |m| m.map));
    Ok(FederationOutcome {
        reports,
        encoder: global,
        heads,
        initial_prototypes,
        final_prototypes: prototypes,
        bank,
        bank_builds,
        final_metrics,
        final_margins,
    })
}

/// Prepare, then federate.
pub fn run_pipeline(
    ds: &FederationDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(PreparedFederation, FederationOutcome)> {
    let prepared = prepare_federation(ds, cfg, seed)?;
    let outcome = run_federation(ds, &prepared, cfg, seed)?;
    Ok((prepared, outcome))
}
