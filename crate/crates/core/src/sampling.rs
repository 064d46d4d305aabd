//! Identity-balanced ("PK") mini-batch sampling.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

/// Draws batches of `p` distinct identities with `k` instances each.
#[derive(Debug, Clone)]
pub struct PkSampler {
    groups: Vec<Vec<usize>>,
    p: usize,
    k: usize,
    total: usize,
}

impl PkSampler {
    pub fn new(labels: &[usize], p: usize, k: usize) -> Self {
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            by_id.entry(y).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = by_id.into_values().collect();
        let p = p.clamp(1, groups.len().max(1));
        Self { groups, p, k: k.max(1), total: labels.len() }
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// One epoch: `max(1, n / (p*k))` batches. Every identity is visited
    /// before any repeats; instances are drawn without replacement when the
    /// identity has at least `k` of them.
    pub fn epoch<R: Rng>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let n_batches = (self.total / self.batch_size()).max(1);
        let mut queue: Vec<usize> = Vec::new();
        let mut out = Vec::with_capacity(n_batches);
        for _ in 0..n_batches {
            let mut chosen: Vec<usize> = Vec::with_capacity(self.p);
            while chosen.len() < self.p {
                if queue.is_empty() {
                    queue = (0..self.groups.len()).collect();
                    queue.shuffle(rng);
                }
                let g = queue.pop().unwrap();
                if !chosen.contains(&g) {
                    chosen.push(g);
                }
            }
            let mut batch = Vec::with_capacity(self.batch_size());
            for g in chosen {
                let members = &self.groups[g];
                if members.len() >= self.k {
                    batch.extend(members.choose_multiple(rng, self.k).copied());
                } else {
                    batch.extend((0..self.k).map(|_| members[rng.random_range(0..members.len())]));
                }
            }
            out.push(batch);
        }
        out
    }
}
