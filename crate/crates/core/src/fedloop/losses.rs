use log::warn;
use serde::{Deserialize, Serialize};

use crate::encoders::PrototypeSet;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_grad, softmax_cross_entropy_grad};

/// Mean identity cross-entropy and `d loss / d logits`.
pub fn loss_id_grad(logits: &[Vec<f64>], targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::InvalidArgument("one target per logit row required".into()));
    }
    let b = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &t) in logits.iter().zip(targets) {
        let (l, g) = softmax_cross_entropy_grad(row, t)?;
        total += l;
        grads.push(g.into_iter().map(|x| x / b).collect());
    }
    Ok((total / b, grads))
}

pub fn loss_id(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    loss_id_grad(logits, targets).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMining {
    /// Farthest positive and nearest negative per anchor.
    BatchHard,
    /// Every valid (anchor, positive, negative) triple.
    BatchAll,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Adds `scale * d||a-b|| / da` to `ga` and the opposite to `gb`.
fn push_distance_grad(emb: &[&[f64]], grads: &mut [Vec<f64>], a: usize, b: usize, scale: f64) {
    let d = distance(emb[a], emb[b]);
    if d == 0.0 {
        return;
    }
    for j in 0..emb[a].len() {
        let g = scale * (emb[a][j] - emb[b][j]) / d;
        grads[a][j] += g;
        grads[b][j] -= g;
    }
}

/// Triplet loss on Euclidean distances with its gradient w.r.t. embeddings.
///
/// Anchors lacking a positive or a negative are excluded with a warning; the
/// loss is the mean over the remaining anchors (batch-hard) or triples
/// (batch-all).
pub fn loss_tri_grad(
    embeddings: &[&[f64]],
    identities: &[usize],
    margin: f64,
    mining: TripletMining,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = embeddings.len();
    if identities.len() != n {
        return Err(Error::ShapeMismatch { expected: vec![n], actual: vec![identities.len()] });
    }
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut grads = vec![vec![0.0; dim]; n];
    let dist: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| distance(embeddings[i], embeddings[j])).collect()).collect();
    let mut excluded = 0;
    let mut terms: Vec<(usize, usize, usize)> = Vec::new();
    for a in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != a && identities[j] == identities[a]).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| identities[j] != identities[a]).collect();
        if pos.is_empty() || neg.is_empty() {
            excluded += 1;
            continue;
        }
        match mining {
            TripletMining::BatchHard => {
                // Ties resolve to the lowest index.
                let p = pos.iter().copied().fold(pos[0], |best, j| if dist[a][j] > dist[a][best] { j } else { best });
                let q = neg.iter().copied().fold(neg[0], |best, j| if dist[a][j] < dist[a][best] { j } else { best });
                terms.push((a, p, q));
            }
            TripletMining::BatchAll => {
                for &p in &pos {
                    for &q in &neg {
                        terms.push((a, p, q));
                    }
                }
            }
        }
    }
    if excluded > 0 {
        warn!("triplet loss: {excluded} anchors lack a positive or negative");
    }
    if terms.is_empty() {
        return Err(Error::NothingToEvaluate("triplet anchors"));
    }
    let count = terms.len() as f64;
    let mut total = 0.0;
    for &(a, p, q) in &terms {
        let hinge = dist[a][p] - dist[a][q] + margin;
        if hinge > 0.0 {
            total += hinge;
            push_distance_grad(embeddings, &mut grads, a, p, 1.0 / count);
            push_distance_grad(embeddings, &mut grads, a, q, -1.0 / count);
        }
    }
    Ok((total / count, grads))
}

pub fn loss_tri(embeddings: &[&[f64]], identities: &[usize], margin: f64, mining: TripletMining) -> Result<f64> {
    loss_tri_grad(embeddings, identities, margin, mining).map(|(l, _)| l)
}

/// Alignment of one embedding to its identity's anchor against all anchors
/// of the client, with `d loss / d v`.
pub fn loss_align_grad(v: &[f64], prototypes: &PrototypeSet, y: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let target = prototypes.position(y)?;
    let mut logits = Vec::with_capacity(prototypes.len());
    let mut dlogit_dv = Vec::with_capacity(prototypes.len());
    for p in prototypes.iter() {
        let (s, g) = cosine_similarity_grad(v, &p.vector)?;
        logits.push(s / tau);
        dlogit_dv.push(g);
    }
    let (loss, dl) = softmax_cross_entropy_grad(&logits, target)?;
    let mut dv = vec![0.0; v.len()];
    for (d, g) in dl.iter().zip(&dlogit_dv) {
        for (o, gi) in dv.iter_mut().zip(g) {
            *o += d * gi / tau;
        }
    }
    Ok((loss, dv))
}

pub fn loss_align(v: &[f64], prototypes: &PrototypeSet, y: usize, tau: f64) -> Result<f64> {
    loss_align_grad(v, prototypes, y, tau).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TextPrototype;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};

    fn set(vectors: Vec<Vec<f64>>) -> PrototypeSet {
        PrototypeSet::new(
            vectors.into_iter().enumerate().map(|(identity, vector)| TextPrototype { identity, vector }).collect(),
        )
    }

    fn onehot(i: usize, n: usize) -> Vec<f64> {
        (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn id_examples() {
        assert_eq!(loss_id(&[vec![2.0]], &[0]).unwrap(), 0.0);
        let u = loss_id(&[vec![0.5; 20], vec![-1.0; 20]], &[3, 19]).unwrap();
        assert!((u - 20f64.ln()).abs() < 1e-12);
        assert!((u - 2.9957).abs() < 1e-4);
        let l = loss_id(&[vec![1.0, 0.0]], &[0]).unwrap();
        assert!((l - 0.3133).abs() < 1e-4);
        assert!(loss_id(&[vec![1.0, 0.0]], &[2]).is_err());
    }

    fn refs(e: &[Vec<f64>]) -> Vec<&[f64]> {
        e.iter().map(|v| v.as_slice()).collect()
    }

    #[test]
    fn tri_hinge_cases() {
        // Anchor at 0 with positive at 0.2 and negative at 0.9: 0.2 - 0.9 + 0.3 < 0.
        // The positive (d_p 0.2, d_n 0.7) is inactive too; the negative has no positive.
        let e = vec![vec![0.0], vec![0.2], vec![0.9]];
        assert_eq!(loss_tri(&refs(&e), &[0, 0, 1], 0.3, TripletMining::BatchHard).unwrap(), 0.0);

        // Anchor at 0 is equidistant (1) from its positive and its negative, so it
        // contributes exactly the margin; the anchor at 1 contributes 0.
        let e = vec![vec![0.0], vec![1.0], vec![-1.0]];
        let l = loss_tri(&refs(&e), &[0, 0, 1], 0.25, TripletMining::BatchHard).unwrap();
        assert!((l - 0.25 / 2.0).abs() < 1e-12);

        // Four points on the unit circle: d_p = 2, d_n = sqrt 2 for every anchor.
        let e = vec![vec![0.0, 1.0], vec![0.0, -1.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        let l = loss_tri(&refs(&e), &[0, 0, 1, 1], 0.5, TripletMining::BatchHard).unwrap();
        assert!((l - (2.0 - 2f64.sqrt() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn tri_zero_for_collapsed_separated_identities() {
        let e = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![5.0, 5.0], vec![5.0, 5.0]];
        for mining in [TripletMining::BatchHard, TripletMining::BatchAll] {
            assert_eq!(loss_tri(&refs(&e), &[0, 0, 1, 1], 0.3, mining).unwrap(), 0.0);
        }
    }

    #[test]
    fn tri_excludes_and_errors() {
        let e = vec![vec![0.0], vec![1.0]];
        assert!(loss_tri(&refs(&e), &[0, 1], 0.3, TripletMining::BatchHard).is_err());
        assert!(loss_tri(&refs(&e), &[0, 0], 0.3, TripletMining::BatchHard).is_err());
    }

    #[test]
    fn align_examples() {
        assert_eq!(loss_align(&[0.3, 0.4], &set(vec![vec![1.0, 0.0]]), 0, 0.07).unwrap(), 0.0);
        // own anchor at similarity 1, 19 orthogonal anchors at similarity 0
        let protos: Vec<Vec<f64>> = (0..20).map(|i| onehot(i, 20)).collect();
        let l = loss_align(&onehot(0, 20), &set(protos), 0, 0.07).unwrap();
        let expected = (19.0 * (-1.0f64 / 0.07).exp()).ln_1p();
        assert!((l - expected).abs() < 1e-12 * expected, "{l} vs {expected}");
        assert!((l - 1.2e-5).abs() < 0.05e-5);
        // all anchors identical -> uniform
        let l = loss_align(&[0.1, 0.9], &set(vec![vec![0.5, 0.5]; 20]), 7, 0.07).unwrap();
        assert!((l - 20f64.ln()).abs() < 1e-12);
        assert!(matches!(loss_align(&[1.0], &set(vec![vec![1.0]]), 3, 0.07), Err(Error::UnknownIdentity(3))));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for seed in 0..10 {
            let dim = 4;
            let ids = [0, 0, 1, 1, 2, 2];
            let point: Vec<f64> = (0..ids.len() * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            for mining in [TripletMining::BatchHard, TripletMining::BatchAll] {
                let f = |w: &[f64]| {
                    let r: Vec<&[f64]> = w.chunks(dim).collect();
                    loss_tri_grad(&r, &ids, 0.3, mining).map(|(l, g)| (l, g.concat()))
                };
                let rep = grad_check(f, &point, 1e-5).unwrap();
                assert!(rep.max_rel_error < 1e-4, "seed {seed}: {}", rep.max_rel_error);
            }
            let protos = set((0..5).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect());
            let f = |w: &[f64]| loss_align_grad(w, &protos, 2, 0.07);
            let rep = grad_check(f, &point[..dim], 1e-5).unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {}", rep.max_rel_error);
        }
    }
}
