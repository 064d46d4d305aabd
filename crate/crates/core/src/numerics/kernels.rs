use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Per-channel mean and population variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `mean` followed by `var`; the feature vector used for pseudo-grouping.
    pub fn to_feature(&self) -> Vec<f64> {
        self.mean.iter().chain(&self.var).copied().collect()
    }
}

/// Channel statistics of a `[C, H, W]` tensor, variance divided by `H*W`.
pub fn channel_stats(x: &Tensor) -> Result<ChannelStats> {
    pooled_channel_stats(std::slice::from_ref(&x))
}

/// Channel statistics pooled over every pixel of every image in `images`.
pub fn pooled_channel_stats<T: AsRef<Tensor>>(images: &[T]) -> Result<ChannelStats> {
    let first = images.first().ok_or_else(|| Error::DegenerateInput("no images".into()))?.as_ref();
    let (c, h, w) = first.dims3()?;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::DegenerateInput(format!("shape {:?}", first.shape())));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let count = (images.len() * h * w) as f64;
    for img in images {
        let img = img.as_ref();
        if img.shape() != first.shape() {
            return Err(Error::ShapeMismatch { expected: first.shape().to_vec(), actual: img.shape().to_vec() });
        }
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += img.channel(ch).iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    // Two-pass variance for accuracy on offset data.
    for img in images {
        let img = img.as_ref();
        for (ch, v) in var.iter_mut().enumerate() {
            let m = mean[ch];
            *v += img.channel(ch).iter().map(|p| (p - m) * (p - m)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= count;
    }
    Ok(ChannelStats { mean, var })
}

impl AsRef<Tensor> for Tensor {
    fn as_ref(&self) -> &Tensor {
        self
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a.b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: vec![a.len()], actual: vec![b.len()] });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity and its gradient with respect to `a`.
pub fn cosine_similarity_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: vec![a.len()], actual: vec![b.len()] });
    }
    // Unclamped here so the value matches its derivative exactly.
    let s = dot(a, b) / (na * nb);
    let grad = a.iter().zip(b).map(|(&ai, &bi)| bi / (na * nb) - s * ai / (na * na)).collect();
    Ok((s, grad))
}

/// Log-softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let Some(top) = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])) else {
        return Vec::new();
    };
    let max = logits[top];
    // ln_1p over the non-maximal terms keeps small losses accurate.
    let rest: f64 = logits.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, l)| (l - max).exp()).sum();
    let log_z = rest.ln_1p();
    logits.iter().map(|l| (l - max) - log_z).collect()
}

pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange { index: target, len: logits.len() });
    }
    Ok((-log_softmax(logits)[target]).max(0.0))
}

/// Loss and its gradient `softmax(logits) - onehot(target)`.
pub fn softmax_cross_entropy_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange { index: target, len: logits.len() });
    }
    let logp = log_softmax(logits);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    Ok((-logp[target], grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t3(c: usize, h: usize, w: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], v).unwrap()
    }

    #[test]
    fn stats_of_small_plane() {
        // mean (1+3+5+7)/4 = 4; var (9+1+1+9)/4 = 5
        let s = channel_stats(&t3(1, 2, 2, vec![1.0, 3.0, 5.0, 7.0])).unwrap();
        assert_eq!(s.mean, vec![4.0]);
        assert_eq!(s.var, vec![5.0]);
    }

    #[test]
    fn stats_of_constant() {
        let s = channel_stats(&Tensor::filled(vec![3, 4, 5], 2.0)).unwrap();
        assert_eq!(s.mean, vec![2.0; 3]);
        assert_eq!(s.var, vec![0.0; 3]);
    }

    #[test]
    fn stats_two_channels() {
        let s = channel_stats(&t3(2, 1, 2, vec![0.0, 0.0, 1.0, -1.0])).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert_eq!(s.var, vec![0.0, 1.0]);
    }

    #[test]
    fn stats_reject_empty() {
        let err = channel_stats(&Tensor::zeros(vec![1, 0, 2])).unwrap_err();
        assert!(err.to_string().contains("degenerate input"));
    }

    #[test]
    fn pooled_stats_over_two_images() {
        let a = t3(1, 1, 1, vec![1.0]);
        let b = t3(1, 1, 1, vec![3.0]);
        let s = pooled_channel_stats(&[a, b]).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.var, vec![1.0]);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(softmax_cross_entropy(&[3.7], 0).unwrap(), 0.0);
        let l = softmax_cross_entropy(&[1.0, 0.0], 0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        let u = softmax_cross_entropy(&[0.0, 0.0, 0.0], 2).unwrap();
        assert!((u - 3f64.ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn cross_entropy_stable_for_large_logits() {
        let l = softmax_cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            prop_assume!(l2_norm(&a) > 1e-3 && l2_norm(&b) > 1e-3);
            let s = cosine_similarity(&a, &b).unwrap();
            prop_assert!((s - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
            let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * beta).collect();
            prop_assert!((s - cosine_similarity(&sa, &sb).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn cross_entropy_non_negative(
            logits in prop::collection::vec(-50.0f64..50.0, 1..8),
            t in 0usize..8,
        ) {
            let t = t % logits.len();
            prop_assert!(softmax_cross_entropy(&logits, t).unwrap() >= 0.0);
            let uniform = vec![logits[0]; logits.len()];
            let u = softmax_cross_entropy(&uniform, t).unwrap();
            prop_assert!((u - (logits.len() as f64).ln()).abs() < 1e-9);
        }
    }
}
