use serde::{Deserialize, Serialize};

use super::objective::ViewLosses;
use crate::encoders::{ClassifierHead, EncoderParams};
use crate::error::{Error, Result};

/// Per-round upload from one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client: usize,
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub n_samples: usize,
    /// Fingerprint of the broadcast parameters the client started from.
    pub start_fingerprint: u64,
    pub original: ViewLosses,
    pub stylized: Option<ViewLosses>,
    pub objective: f64,
}

fn weights(updates: &[&ClientUpdate]) -> Result<Vec<f64>> {
    let total: usize = updates.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("aggregation needs a positive sample count".into()));
    }
    Ok(updates.iter().map(|u| u.n_samples as f64 / total as f64).collect())
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no client updates".into()));
    }
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    // Fixed summation order keeps the result bitwise permutation-invariant.
    v.sort_by_key(|u| u.client);
    Ok(v)
}

fn weighted_sum<'a>(arrays: impl Iterator<Item = &'a [f64]>, weights: &[f64], len: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len];
    for (a, w) in arrays.zip(weights) {
        if a.len() != len {
            return Err(Error::ShapeMismatch { expected: vec![len], actual: vec![a.len()] });
        }
        for (o, x) in out.iter_mut().zip(a) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Sample-weighted average `sum_k (n_k / N) theta_k` of client encoders.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<EncoderParams> {
    let ups = sorted(updates)?;
    let w = weights(&ups)?;
    let arch = ups[0].encoder.arch();
    if ups.iter().any(|u| u.encoder.arch() != arch) {
        return Err(Error::InvalidArgument("client encoders differ in architecture".into()));
    }
    let values = weighted_sum(ups.iter().map(|u| u.encoder.values()), &w, arch.num_params())?;
    EncoderParams::from_values(arch, values)
}

/// Same weighting applied to identity heads; only valid when every client
/// shares one label space.
pub fn aggregate_heads(updates: &[ClientUpdate]) -> Result<ClassifierHead> {
    let ups = sorted(updates)?;
    let w = weights(&ups)?;
    let (c, d) = (ups[0].head.classes(), ups[0].head.embed_dim());
    if ups.iter().any(|u| u.head.classes() != c || u.head.embed_dim() != d) {
        return Err(Error::InvalidArgument("client heads differ in shape".into()));
    }
    let values = weighted_sum(ups.iter().map(|u| u.head.values()), &w, ups[0].head.values().len())?;
    ClassifierHead::from_values(c, d, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Architecture;
    use proptest::prelude::*;

    const ARCH: Architecture = Architecture { input_dim: 1, hidden: 1, embed_dim: 1 };

    fn update(client: usize, n: usize, value: f64) -> ClientUpdate {
        ClientUpdate {
            client,
            encoder: EncoderParams::from_values(ARCH, vec![value; ARCH.num_params()]).unwrap(),
            head: ClassifierHead::from_values(1, 1, vec![value; 2]).unwrap(),
            n_samples: n,
            start_fingerprint: 0,
            original: ViewLosses::default(),
            stylized: None,
            objective: 0.0,
        }
    }

    #[test]
    fn midpoint_and_weighted() {
        let mid = aggregate(&[update(0, 5, 2.0), update(1, 5, 4.0)]).unwrap();
        assert!(mid.values().iter().all(|&v| v == 3.0));
        let w = aggregate(&[update(0, 1, 0.0), update(1, 3, 4.0)]).unwrap();
        assert!(w.values().iter().all(|&v| v == 3.0));
        assert!(aggregate_heads(&[update(0, 1, 0.0), update(1, 3, 4.0)]).unwrap().values().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn fixed_point_on_identical_inputs() {
        let v = 0.123_456_789;
        let out = aggregate(&[update(0, 7, v), update(1, 13, v), update(2, 1, v)]).unwrap();
        assert!(out.values().iter().all(|&x| (x - v).abs() < 1e-15));
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(aggregate(&[]).is_err());
        let mut odd = update(1, 1, 0.0);
        odd.encoder = EncoderParams::zeros(Architecture { input_dim: 2, hidden: 1, embed_dim: 1 });
        assert!(aggregate(&[update(0, 1, 0.0), odd]).is_err());
        assert!(aggregate(&[update(0, 0, 1.0)]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(vals in prop::collection::vec((1usize..50, -10.0f64..10.0), 1..6), rot in 0usize..6) {
            let ups: Vec<ClientUpdate> = vals.iter().enumerate().map(|(k, &(n, v))| update(k, n, v)).collect();
            let mut shuffled = ups.clone();
            let len = shuffled.len();
            shuffled.rotate_left(rot % len);
            prop_assert_eq!(aggregate(&ups).unwrap(), aggregate(&shuffled).unwrap());
        }
    }
}
