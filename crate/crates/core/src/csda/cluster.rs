use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::mix_seed;

/// Fitted centroids for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub stage: usize,
    pub num_clusters: usize,
    pub centroids: Vec<Vec<f64>>,
    pub silhouette: f64,
    /// Silhouette per candidate cluster count, empty when no search ran.
    pub scores: Vec<(usize, f64)>,
    /// Too few vectors for the search; `num_clusters` fell back to 2.
    pub fallback: bool,
    /// All vectors coincide.
    pub zero_variance: bool,
}

/// Search settings for [`fit_clusters`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSearch {
    pub min: usize,
    pub max: usize,
    pub iters: usize,
    pub restarts: usize,
}

impl Default for ClusterSearch {
    fn default() -> Self {
        Self { min: 2, max: 10, iters: 50, restarts: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
pub fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().expect("pushed")));
        }
    }
    centroids
}

/// Lloyd iterations from a k-means++ start; best of `restarts` by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, restarts: usize, seed: u64) -> KMeans {
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &format!("kmeans/{k}/{r}")));
        let mut centroids = plus_plus(points, k, &mut rng);
        let mut labels = vec![0usize; points.len()];
        for it in 0..iters.max(1) {
            let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
            let changed = next != labels;
            labels = next;
            let dim = points[0].len();
            let mut sums = vec![vec![0f64; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &l) in points.iter().zip(&labels) {
                counts[l] += 1;
                for (s, v) in sums[l].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            if !changed && it > 0 {
                break;
            }
        }
        labels = points.iter().map(|p| nearest(&centroids, p)).collect();
        let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeans { centroids, labels, inertia });
        }
    }
    best.expect("at least one restart")
}

/// Euclidean distance matrix, row-major.
pub fn distance_matrix(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(&points[i], &points[j]).sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Mean silhouette coefficient from a precomputed distance matrix. Members
/// of singleton clusters score 0.
pub fn silhouette_from_distances(dist: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0f64; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[labels[j]] += dist[i * n + j];
        }
        let own = labels[i];
        if counts[own] <= 1 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / n as f64
}

pub fn silhouette(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    silhouette_from_distances(&distance_matrix(points), labels, k)
}

/// Fits a model with a fixed cluster count.
pub fn fit_k(points: &[Vec<f64>], stage: usize, k: usize, search: &ClusterSearch, seed: u64) -> ClusterModel {
    let zero_variance = points.windows(2).all(|w| w[0] == w[1]);
    let km = kmeans(points, k, search.iters, search.restarts, seed);
    let sil = if zero_variance { 0.0 } else { silhouette(points, &km.labels, k) };
    ClusterModel {
        stage,
        num_clusters: k,
        centroids: km.centroids,
        silhouette: sil,
        scores: Vec::new(),
        fallback: false,
        zero_variance,
    }
}

/// Runs k-means for every cluster count in the search range and keeps the
/// one with the highest mean silhouette (smaller count on ties).
pub fn fit_clusters(points: &[Vec<f64>], stage: usize, search: &ClusterSearch, seed: u64) -> ClusterModel {
    let zero_variance = points.windows(2).all(|w| w[0] == w[1]);
    if points.len() < 2 * search.max || zero_variance || points.len() < 2 {
        log::warn!(
            "stage {stage}: {} vectors{}, falling back to 2 clusters",
            points.len(),
            if zero_variance { " with zero variance" } else { "" }
        );
        let k = 2.min(points.len().max(1));
        let mut m = fit_k(points, stage, k, search, seed);
        m.num_clusters = 2;
        while m.centroids.len() < 2 {
            m.centroids.push(m.centroids[0].clone());
        }
        m.fallback = true;
        m.zero_variance = zero_variance;
        return m;
    }
    let dist = distance_matrix(points);
    let mut best: Option<(f64, KMeans, usize)> = None;
    let mut scores = Vec::new();
    for k in search.min..=search.max {
        let km = kmeans(points, k, search.iters, search.restarts, seed);
        let s = silhouette_from_distances(&dist, &km.labels, k);
        scores.push((k, s));
        if best.as_ref().is_none_or(|(bs, _, _)| s > *bs) {
            best = Some((s, km, k));
        }
    }
    let (s, km, k) = best.expect("non-empty range");
    ClusterModel {
        stage,
        num_clusters: k,
        centroids: km.centroids,
        silhouette: s,
        scores,
        fallback: false,
        zero_variance: false,
    }
}

pub fn assign_labels(model: &ClusterModel, vectors: &[Vec<f64>]) -> Vec<usize> {
    vectors.iter().map(|v| nearest(&model.centroids, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(k: usize, n: usize, sep: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::new();
        for c in 0..k {
            let center = [sep * c as f64, 0.0];
            for _ in 0..n {
                out.push(vec![center[0] + g.sample(&mut rng), center[1] + g.sample(&mut rng)]);
            }
        }
        out
    }

    /// Silhouette by the textbook double loop.
    fn oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
        let d = |a: &[f64], b: &[f64]| sq_dist(a, b).sqrt();
        let k = labels.iter().max().unwrap() + 1;
        let mut s = 0.0;
        for i in 0..points.len() {
            let mine: Vec<usize> = (0..points.len()).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if mine.is_empty() {
                continue;
            }
            let a = mine.iter().map(|&j| d(&points[i], &points[j])).sum::<f64>() / mine.len() as f64;
            let mut b = f64::INFINITY;
            for c in 0..k {
                if c == labels[i] {
                    continue;
                }
                let other: Vec<usize> = (0..points.len()).filter(|&j| labels[j] == c).collect();
                if other.is_empty() {
                    continue;
                }
                b = b.min(other.iter().map(|&j| d(&points[i], &points[j])).sum::<f64>() / other.len() as f64);
            }
            s += (b - a) / a.max(b);
        }
        s / points.len() as f64
    }

    #[test]
    fn silhouette_matches_double_loop() {
        let pts = blobs(3, 20, 4.0, 7);
        let km = kmeans(&pts, 3, 50, 3, 1);
        assert!((silhouette(&pts, &km.labels, 3) - oracle(&pts, &km.labels)).abs() < 1e-9);
        let km = kmeans(&pts, 5, 50, 3, 1);
        assert!((silhouette(&pts, &km.labels, 5) - oracle(&pts, &km.labels)).abs() < 1e-9);
    }

    #[test]
    fn recovers_two_and_four_blobs() {
        let s = ClusterSearch::default();
        for (k, seed) in [(2, 1), (4, 2)] {
            let pts = blobs(k, 100, 8.0, seed);
            assert_eq!(fit_clusters(&pts, 4, &s, seed).num_clusters, k);
        }
    }

    #[test]
    fn identical_points_fall_back() {
        let pts = vec![vec![1.0, 2.0]; 40];
        let m = fit_clusters(&pts, 4, &ClusterSearch::default(), 0);
        assert_eq!(m.num_clusters, 2);
        assert!(m.fallback && m.zero_variance);
        let few = blobs(2, 3, 8.0, 0);
        let m = fit_clusters(&few, 4, &ClusterSearch::default(), 0);
        assert!(m.fallback && !m.zero_variance);
    }

    #[test]
    fn assignment_rules() {
        let m = ClusterModel {
            stage: 4,
            num_clusters: 2,
            centroids: vec![vec![0.0, 0.0], vec![2.0, 0.0]],
            silhouette: 0.0,
            scores: vec![],
            fallback: false,
            zero_variance: false,
        };
        assert_eq!(assign_labels(&m, &[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]]), vec![0, 1, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-1.0..3.0), rng.random_range(-1.0..1.0)]).collect();
        for (p, l) in pts.iter().zip(assign_labels(&m, &pts)) {
            let d0 = (p[0].powi(2) + p[1].powi(2)).sqrt();
            let d1 = ((p[0] - 2.0).powi(2) + p[1].powi(2)).sqrt();
            assert_eq!(l, if d1 < d0 { 1 } else { 0 });
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_deterministic() {
        let pts = blobs(3, 30, 5.0, 9);
        let a = fit_clusters(&pts, 4, &ClusterSearch::default(), 42);
        let b = fit_clusters(&pts, 4, &ClusterSearch::default(), 42);
        assert_eq!(a, b);
    }
}
