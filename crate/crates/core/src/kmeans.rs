//! K-Means clustering with k-means++ seeding, Lloyd iterations and a
//! Hartigan single-point refinement pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Lloyd stops once inertia improves by less than this fraction.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iterations: 300,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Cluster of each point, numbered in order of first appearance.
    pub labels: Vec<usize>,
    /// `k × dim` centroids, following the label numbering.
    pub centroids: Vec<f64>,
    pub inertia: f64,
}

/// Clusters the `n = data.len() / dim` row vectors of `data` into at most `k`
/// groups. Deterministic for a given seed.
pub fn kmeans(data: &[f64], dim: usize, k: usize, options: &KMeansOptions) -> Result<KMeansResult> {
    if k == 0 || dim == 0 || data.len() % dim != 0 {
        return Err(Error::InvalidValue(format!(
            "cannot cluster {} values of dimension {dim} into {k} groups",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if n == 0 {
        return Ok(KMeansResult {
            labels: vec![],
            centroids: vec![],
            inertia: 0.0,
        });
    }
    let restarts = options.restarts.max(1);
    let runs: Vec<(Vec<usize>, f64)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(r as u64));
            single_run(data, dim, k, options, &mut rng)
        })
        .collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.1 < runs[best].1 {
            best = i;
        }
    }
    let labels = canonical_labels(&runs[best].0);
    let clusters = labels.iter().max().map_or(0, |m| m + 1);
    let centroids = centroids_of(data, dim, clusters, &labels).0;
    Ok(KMeansResult {
        inertia: objective(data, dim, &labels),
        labels,
        centroids,
    })
}

/// Sum of squared distances of each point to the mean of its cluster.
pub fn objective(data: &[f64], dim: usize, labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let (centroids, _) = centroids_of(data, dim, k, labels);
    data.chunks_exact(dim)
        .zip(labels)
        .map(|(x, &l)| sq_dist(x, &centroids[l * dim..(l + 1) * dim]))
        .sum()
}

fn single_run(
    data: &[f64],
    dim: usize,
    k: usize,
    options: &KMeansOptions,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, f64) {
    let n = data.len() / dim;
    let mut centroids = seed_plus_plus(data, dim, k, rng);
    let mut labels = vec![0; n];
    let mut previous = f64::INFINITY;
    for _ in 0..options.max_iterations.max(1) {
        let inertia = assign(data, dim, &centroids, &mut labels);
        let (mut next, counts) = centroids_of(data, dim, k, &labels);
        // An empty cluster takes over the point farthest from its centroid.
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = farthest_point(data, dim, &centroids, &labels);
            next[c * dim..(c + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
            labels[far] = c;
        }
        centroids = next;
        if previous.is_finite() && previous - inertia <= options.tolerance * previous {
            break;
        }
        previous = inertia;
    }
    assign(data, dim, &centroids, &mut labels);
    hartigan(data, dim, k, &mut labels, options.max_iterations);
    let inertia = objective(data, dim, &labels);
    (labels, inertia)
}

fn seed_plus_plus(data: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(point(i), &centroids[..dim]))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = point(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn assign(data: &[f64], dim: usize, centroids: &[f64], labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (x, label) in data.chunks_exact(dim).zip(labels.iter_mut()) {
        let (best, d) = centroids
            .chunks_exact(dim)
            .map(|c| sq_dist(x, c))
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, d)| if d < acc.1 { (i, d) } else { acc },
            );
        *label = best;
        inertia += d;
    }
    inertia
}

fn farthest_point(data: &[f64], dim: usize, centroids: &[f64], labels: &[usize]) -> usize {
    data.chunks_exact(dim)
        .zip(labels)
        .map(|(x, &l)| sq_dist(x, &centroids[l * dim..(l + 1) * dim]))
        .enumerate()
        .fold(
            (0, -1.0),
            |acc, (i, d)| if d > acc.1 { (i, d) } else { acc },
        )
        .0
}

fn centroids_of(data: &[f64], dim: usize, k: usize, labels: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &l) in data.chunks_exact(dim).zip(labels) {
        counts[l] += 1;
        sums[l * dim..(l + 1) * dim]
            .iter_mut()
            .zip(x)
            .for_each(|(s, v)| *s += v);
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .for_each(|s| *s /= count as f64);
        }
    }
    (sums, counts)
}

/// Moves single points between clusters while that lowers the objective,
/// accounting for the centroid shift each move causes.
fn hartigan(data: &[f64], dim: usize, k: usize, labels: &mut [usize], max_passes: usize) {
    let (mut centroids, mut counts) = centroids_of(data, dim, k, labels);
    for _ in 0..max_passes {
        let mut moved = false;
        for (i, x) in data.chunks_exact(dim).enumerate() {
            let a = labels[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let removal = na / (na - 1.0) * sq_dist(x, &centroids[a * dim..(a + 1) * dim]);
            let mut best = (a, removal);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let cost = nb / (nb + 1.0) * sq_dist(x, &centroids[b * dim..(b + 1) * dim]);
                if cost < best.1 {
                    best = (b, cost);
                }
            }
            let b = best.0;
            if b == a || removal - best.1 <= 1e-12 * removal {
                continue;
            }
            let nb = counts[b] as f64;
            for d in 0..dim {
                let ca = &mut centroids[a * dim + d];
                *ca = (*ca * na - x[d]) / (na - 1.0);
                let cb = &mut centroids[b * dim + d];
                *cb = (*cb * nb + x[d]) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            labels[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
    }
}

fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<Option<usize>> = vec![None; labels.iter().max().map_or(0, |m| m + 1)];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            *map[l].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
