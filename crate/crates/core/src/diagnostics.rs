//! Finite-difference audit of every analytic gradient in the crate.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::csa::{csa_objective, loss_c3_grad, loss_i2t_grad, loss_t2i_grad, BatchIndex, CsaConfig};
use crate::encoders::{
    encode_prompt, Architecture, ClassifierHead, EncoderParams, PromptTokens, PrototypeSet, TextEncoderSurrogate,
    TextPrototype,
};
use crate::error::Result;
use crate::fedloop::{
    local_objective_grad, loss_align_grad, loss_id_grad, loss_tri_grad, LocalBatch, LocalModel, ObjectiveConfig,
    TripletMining,
};
use crate::numerics::{dot, grad_check, softmax_cross_entropy_grad, Tensor};
use crate::rng::{derive_seed, stream, SimRng};

/// Finite-difference step used by the suite.
pub const EPSILON: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub target: String,
    pub seed: u64,
    pub parameters: usize,
    pub max_rel_error: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Names of the audited functions, in suite order.
pub const TARGETS: [&str; 12] = [
    "softmax_cross_entropy",
    "loss_i2t",
    "loss_t2i",
    "loss_c3",
    "csa_objective",
    "encode_prompt",
    "encode_image",
    "loss_id",
    "loss_tri_batch_hard",
    "loss_tri_batch_all",
    "loss_align",
    "local_objective",
];

fn normal(rng: &mut SimRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn matrix(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(|c| c.to_vec()).collect()
}

fn flatten(m: Vec<Vec<f64>>) -> Vec<f64> {
    m.into_iter().flatten().collect()
}

/// Runs one target at one seed.
pub fn check_target(target: &str, seed: u64) -> Result<GradCheckEntry> {
    let mut rng = stream(seed, "gradcheck", &[]);
    let rng = &mut rng;
    let labels = [0usize, 0, 1, 1, 2, 2];
    let cameras = [0usize, 1, 0, 1, 1, 1];
    let index = BatchIndex::new(&labels, &cameras)?;
    let report = match target {
        "softmax_cross_entropy" => {
            let x = normal(rng, 5);
            let t = rng.random_range(0..5);
            grad_check(|w| softmax_cross_entropy_grad(w, t), &x, EPSILON)?
        }
        "loss_i2t" => {
            // Narrow range keeps the tau = 0.07 softmax out of saturation, where
            // entries fall below the finite-difference noise floor.
            let x: Vec<f64> = (0..18).map(|_| rng.random_range(-0.15..0.15)).collect();
            let targets = [0, 0, 1, 1, 2, 2];
            grad_check(|w| loss_i2t_grad(&matrix(w, 3), &targets, 0.07).map(|(l, g)| (l, flatten(g))), &x, EPSILON)?
        }
        "loss_t2i" => {
            let x: Vec<f64> = (0..18).map(|_| rng.random_range(-0.15..0.15)).collect();
            grad_check(|w| loss_t2i_grad(&matrix(w, 3), &index, 0.07).map(|(l, g)| (l, flatten(g))), &x, EPSILON)?
        }
        "loss_c3" => {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            grad_check(|w| Ok(loss_c3_grad(w, &index)), &x, EPSILON)?
        }
        "csa_objective" | "encode_prompt" => {
            let sur = TextEncoderSurrogate::new(6, 5, derive_seed(seed, "sur", &[]));
            let tok = PromptTokens::init(&[0, 1, 2], 3, 6, 0.5, derive_seed(seed, "tok", &[]))?;
            if target == "encode_prompt" {
                let probe = normal(rng, 5);
                let f = |w: &[f64]| {
                    let mut t = tok.clone();
                    t.values_mut().copy_from_slice(w);
                    let out = encode_prompt(&sur, &t, 1)?;
                    let mut g = vec![0.0; w.len()];
                    let p = t.position(1)?;
                    let block = t.length() * t.token_dim();
                    g[p * block..(p + 1) * block].copy_from_slice(&sur.backward(
                        t.tokens_of(1)?,
                        t.length(),
                        &probe,
                    )?);
                    Ok((dot(out.data(), &probe), g))
                };
                grad_check(f, tok.values(), EPSILON)?
            } else {
                let emb: Vec<Vec<f64>> = (0..6).map(|_| normal(rng, 5)).collect();
                let refs: Vec<&[f64]> = emb.iter().map(|v| v.as_slice()).collect();
                let cfg = CsaConfig { lambda_c3: 0.1, temperature: 0.07, ..CsaConfig::default() };
                let f = |w: &[f64]| {
                    let mut t = tok.clone();
                    t.values_mut().copy_from_slice(w);
                    csa_objective(&refs, &labels, &cameras, &t, &sur, &cfg).map(|(l, g)| (l.total, g))
                };
                grad_check(f, tok.values(), EPSILON)?
            }
        }
        "encode_image" => {
            let arch = Architecture { input_dim: 12, hidden: 6, embed_dim: 4 };
            let enc = EncoderParams::init(arch, seed);
            let x = normal(rng, 12);
            let probe = normal(rng, 4);
            let f = |w: &[f64]| {
                let e = EncoderParams::from_values(arch, w.to_vec())?;
                let cache = e.forward(&x)?;
                let mut g = vec![0.0; w.len()];
                e.backward(&x, &cache, &probe, &mut g);
                Ok((dot(&cache.embedding, &probe), g))
            };
            grad_check(f, enc.values(), EPSILON)?
        }
        "loss_id" => {
            let x = normal(rng, 6 * 4);
            let targets = [0, 1, 2, 3, 1, 0];
            grad_check(|w| loss_id_grad(&matrix(w, 4), &targets).map(|(l, g)| (l, flatten(g))), &x, EPSILON)?
        }
        "loss_tri_batch_hard" | "loss_tri_batch_all" => {
            let mining = if target.ends_with("hard") { TripletMining::BatchHard } else { TripletMining::BatchAll };
            let x = normal(rng, 6 * 4);
            let f = |w: &[f64]| {
                let refs: Vec<&[f64]> = w.chunks(4).collect();
                loss_tri_grad(&refs, &labels, 1.0, mining).map(|(l, g)| (l, flatten(g)))
            };
            grad_check(f, &x, EPSILON)?
        }
        "loss_align" => {
            let protos = random_prototypes(rng, 5, 6);
            let v = normal(rng, 6);
            let y = rng.random_range(0..5);
            grad_check(|w| loss_align_grad(w, &protos, y, 0.07), &v, EPSILON)?
        }
        "local_objective" => {
            let arch = Architecture { input_dim: 8, hidden: 5, embed_dim: 4 };
            let model = LocalModel {
                encoder: EncoderParams::init(arch, derive_seed(seed, "enc", &[])),
                head: ClassifierHead::init(2, 4, derive_seed(seed, "head", &[])),
            };
            let mut img = || Tensor::new(vec![2, 2, 2], normal(rng, 8));
            let xs = (0..4).map(|_| img()).collect::<Result<Vec<_>>>()?;
            let ys = (0..4).map(|_| img()).collect::<Result<Vec<_>>>()?;
            let protos = random_prototypes(rng, 2, 4);
            let batch = LocalBatch {
                images: xs.iter().collect(),
                stylized: Some(ys),
                identities: vec![0, 0, 1, 1],
                head_targets: vec![0, 0, 1, 1],
            };
            let cfg = ObjectiveConfig { lambda: 1.0, margin: 0.3, temperature: 0.07, mining: TripletMining::BatchHard };
            let f = |w: &[f64]| {
                let mut m = model.clone();
                m.set_flat(w)?;
                local_objective_grad(&m, &batch, Some(&protos), &cfg).map(|(v, g)| (v.total, g))
            };
            grad_check(f, &model.to_flat(), EPSILON)?
        }
        other => return Err(crate::Error::InvalidArgument(format!("unknown gradient target `{other}`"))),
    };
    Ok(GradCheckEntry {
        target: target.to_string(),
        seed,
        parameters: report.per_parameter_errors.len(),
        max_rel_error: report.max_rel_error,
    })
}

fn random_prototypes(rng: &mut SimRng, n: usize, dim: usize) -> PrototypeSet {
    PrototypeSet::new((0..n).map(|identity| TextPrototype { identity, vector: normal(rng, dim) }).collect())
}

/// Every target at every seed.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::with_capacity(TARGETS.len() * seeds.len());
    for target in TARGETS {
        for &seed in seeds {
            out.push(check_target(target, seed)?);
        }
    }
    Ok(out)
}
