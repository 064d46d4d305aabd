//! Lloyd's k-means with seeded distinct-point initialization.

use log::warn;
use rand::seq::index::sample;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster of each point, renumbered by first appearance.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Clusters `points` into at most `k` groups.
///
/// Stops after `max_iter` updates or once no centroid moves more than `tol`.
/// An empty cluster is re-seeded at the point farthest from its own centroid.
/// If fewer than `k` distinct points exist, `k` is reduced to that count.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R, max_iter: usize, tol: f64) -> KMeansResult {
    let mut distinct: Vec<usize> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if !distinct.iter().any(|&j| points[j] == *p) {
            distinct.push(i);
        }
    }
    let k = if distinct.len() < k {
        warn!("only {} distinct points; reducing k from {k}", distinct.len());
        distinct.len()
    } else {
        k
    };
    if k == 0 {
        return KMeansResult { labels: Vec::new(), centroids: Vec::new(), iterations: 0 };
    }
    let mut centroids: Vec<Vec<f64>> =
        sample(rng, distinct.len(), k).into_iter().map(|i| points[distinct[i]].clone()).collect();
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| if n > 0 { s.into_iter().map(|x| x / n as f64).collect() } else { Vec::new() })
            .collect();
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[labels[a]]);
                        let db = sq_dist(&points[b], &centroids[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                next[j] = points[far].clone();
                labels[far] = j;
            }
        }
        let moved = centroids.iter().zip(&next).map(|(a, b)| sq_dist(a, b).sqrt()).fold(0.0, f64::max);
        centroids = next;
        if moved < tol {
            break;
        }
    }
    for (l, p) in labels.iter_mut().zip(points) {
        *l = nearest(p, &centroids);
    }
    // Canonical numbering: clusters ordered by first member.
    let mut order: Vec<usize> = Vec::new();
    for &l in &labels {
        if !order.contains(&l) {
            order.push(l);
        }
    }
    let remap = |l: usize| order.iter().position(|&o| o == l).unwrap();
    let centroids = order.iter().map(|&o| centroids[o].clone()).collect();
    let labels = labels.into_iter().map(remap).collect();
    KMeansResult { labels, centroids, iterations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn separates_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(vec![0.0 + 0.01 * i as f64, 0.0]);
            pts.push(vec![10.0, 10.0 + 0.01 * i as f64]);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let r = kmeans(&pts, 2, &mut rng, 100, 1e-6);
        for (i, &l) in r.labels.iter().enumerate() {
            assert_eq!(l, i % 2);
        }
    }

    #[test]
    fn identical_points_single_cluster() {
        let pts = vec![vec![1.5, -2.0]; 5];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let r = kmeans(&pts, 1, &mut rng, 100, 1e-6);
        assert_eq!(r.centroids, vec![vec![1.5, -2.0]]);
        assert!(r.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn degrades_k_for_duplicates() {
        let pts = vec![vec![0.0], vec![0.0], vec![1.0]];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let r = kmeans(&pts, 3, &mut rng, 100, 1e-6);
        assert_eq!(r.centroids.len(), 2);
        assert_eq!(r.labels, vec![0, 0, 1]);
    }
}
