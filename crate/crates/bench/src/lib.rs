//! Workloads shared by the kernel benchmarks.

use fedreid_core::csa::CsaConfig;
use fedreid_core::encoders::{Architecture, ClassifierHead, EncoderParams, PromptTokens, TextEncoderSurrogate};
use fedreid_core::fedloop::{LocalModel, ObjectiveConfig, TripletMining};
use fedreid_core::synthdata::{generate_federation, DataConfig, FederationDataset, Protocol};

/// The default desk-scale federation.
pub fn federation(seed: u64) -> FederationDataset {
    generate_federation(&DataConfig::default(), Protocol::LeaveOneOut, seed).expect("default config is valid")
}

/// Default-sized encoder and a head over `classes` identities.
pub fn model(classes: usize, seed: u64) -> LocalModel {
    let arch = Architecture { input_dim: 256, hidden: 64, embed_dim: 32 };
    LocalModel { encoder: EncoderParams::init(arch, seed), head: ClassifierHead::init(classes, 32, seed) }
}

pub fn objective() -> ObjectiveConfig {
    ObjectiveConfig { lambda: 1.0, margin: 0.3, temperature: 0.07, mining: TripletMining::BatchHard }
}

/// Tokens and surrogate for `identities` at default sizes.
pub fn anchors(identities: &[usize], seed: u64) -> (PromptTokens, TextEncoderSurrogate, CsaConfig) {
    let cfg = CsaConfig::default();
    let tokens = PromptTokens::init(identities, cfg.tokens, 16, cfg.init_scale, seed).expect("valid token shape");
    (tokens, TextEncoderSurrogate::new(16, 32, seed), cfg)
}
