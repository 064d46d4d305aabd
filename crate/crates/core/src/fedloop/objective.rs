use serde::{Deserialize, Serialize};

use super::losses::{loss_align_grad, loss_id_grad, loss_tri_grad, TripletMining};
use crate::encoders::{ClassifierHead, EncoderCache, EncoderParams, PrototypeSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Encoder plus the client's identity head; the unit of local optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
}

impl LocalModel {
    pub fn num_params(&self) -> usize {
        self.encoder.values().len() + self.head.values().len()
    }

    /// Encoder values followed by head values.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.encoder.values().to_vec();
        v.extend_from_slice(self.head.values());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch { expected: vec![self.num_params()], actual: vec![flat.len()] });
        }
        let n = self.encoder.values().len();
        self.encoder.values_mut().copy_from_slice(&flat[..n]);
        self.head.values_mut().copy_from_slice(&flat[n..]);
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.encoder.values_mut().iter_mut().chain(self.head.values_mut().iter_mut())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    /// Weight of the anchor-alignment term.
    pub lambda: f64,
    pub margin: f64,
    pub temperature: f64,
    pub mining: TripletMining,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewLosses {
    pub id: f64,
    pub tri: f64,
    pub align: f64,
}

impl ViewLosses {
    pub fn weighted(&self, lambda: f64) -> f64 {
        self.id + self.tri + lambda * self.align
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub original: ViewLosses,
    pub stylized: Option<ViewLosses>,
}

/// One local mini-batch: original images, their optional stylized twins,
/// identity labels, and each sample's row in the client's head.
#[derive(Debug, Clone)]
pub struct LocalBatch<'a> {
    pub images: Vec<&'a Tensor>,
    pub stylized: Option<Vec<Tensor>>,
    pub identities: Vec<usize>,
    pub head_targets: Vec<usize>,
}

fn view_loss(
    model: &LocalModel,
    images: &[&Tensor],
    batch: &LocalBatch<'_>,
    prototypes: Option<&PrototypeSet>,
    cfg: &ObjectiveConfig,
    grad: Option<&mut [f64]>,
) -> Result<ViewLosses> {
    let caches: Vec<EncoderCache> = images.iter().map(|x| model.encoder.forward(x.data())).collect::<Result<_>>()?;
    let emb: Vec<&[f64]> = caches.iter().map(|c| c.embedding.as_slice()).collect();
    let logits: Vec<Vec<f64>> = emb.iter().map(|v| model.head.logits(v)).collect();
    let (id, d_logits) = loss_id_grad(&logits, &batch.head_targets)?;
    let (tri, d_tri) = loss_tri_grad(&emb, &batch.identities, cfg.margin, cfg.mining)?;
    let b = images.len() as f64;
    let mut align = 0.0;
    let mut d_align = Vec::new();
    if let Some(protos) = prototypes {
        for (v, &y) in emb.iter().zip(&batch.identities) {
            let (l, g) = loss_align_grad(v, protos, y, cfg.temperature)?;
            align += l / b;
            d_align.push(g);
        }
    }
    if let Some(grad) = grad {
        let n_enc = model.encoder.values().len();
        let (g_enc, g_head) = grad.split_at_mut(n_enc);
        for i in 0..images.len() {
            let mut dv = model.head.backward(emb[i], &d_logits[i], g_head);
            for (d, t) in dv.iter_mut().zip(&d_tri[i]) {
                *d += t;
            }
            if let Some(ga) = d_align.get(i) {
                for (d, a) in dv.iter_mut().zip(ga) {
                    *d += cfg.lambda * a / b;
                }
            }
            model.encoder.backward(images[i].data(), &caches[i], &dv, g_enc);
        }
    }
    Ok(ViewLosses { id, tri, align })
}

fn evaluate(
    model: &LocalModel,
    batch: &LocalBatch<'_>,
    prototypes: Option<&PrototypeSet>,
    cfg: &ObjectiveConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<ObjectiveValue> {
    if batch.images.len() != batch.identities.len() || batch.images.len() != batch.head_targets.len() {
        return Err(Error::InvalidArgument("batch label lengths differ".into()));
    }
    let original = view_loss(model, &batch.images, batch, prototypes, cfg, grad.as_deref_mut())?;
    let stylized = match &batch.stylized {
        Some(xs) => {
            if xs.len() != batch.images.len() {
                return Err(Error::InvalidArgument("one stylized view per image required".into()));
            }
            let refs: Vec<&Tensor> = xs.iter().collect();
            Some(view_loss(model, &refs, batch, prototypes, cfg, grad)?)
        }
        None => None,
    };
    let lambda = if prototypes.is_some() { cfg.lambda } else { 0.0 };
    let total = original.weighted(lambda) + stylized.map_or(0.0, |s| s.weighted(lambda));
    Ok(ObjectiveValue { total, original, stylized })
}

/// Sum over available views of `L_id + L_tri + lambda * L_align`. With no
/// prototypes the alignment term is skipped.
pub fn local_objective(
    model: &LocalModel,
    batch: &LocalBatch<'_>,
    prototypes: Option<&PrototypeSet>,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveValue> {
    evaluate(model, batch, prototypes, cfg, None)
}

/// [`local_objective`] plus its gradient over [`LocalModel::to_flat`]
/// coordinates. Prototypes are constants.
pub fn local_objective_grad(
    model: &LocalModel,
    batch: &LocalBatch<'_>,
    prototypes: Option<&PrototypeSet>,
    cfg: &ObjectiveConfig,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    let mut grad = vec![0.0; model.num_params()];
    let value = evaluate(model, batch, prototypes, cfg, Some(&mut grad))?;
    Ok((value, grad))
}

/// SGD with momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: vec![0.0; num_params] }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grad: &[f64], lr: f64) {
        for ((p, g), v) in params.zip(grad).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}
