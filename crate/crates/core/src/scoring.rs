//! Prototype banks and cosine-distance anomaly scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, dim_err, Error, Result};

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-9;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Unit-norm copy of `v`; errors on a zero or non-finite vector.
pub fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize a vector of norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding; centres are returned unnormalized.
///
/// With `points.len() <= k` the points themselves are the centres, repeated
/// cyclically up to `k`. A cluster that loses all members keeps its centre.
pub fn kmeans_raw(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if points.is_empty() || k == 0 {
        return Err(arg_err!("kmeans needs points and k > 0"));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(dim_err!("kmeans points must share a positive dimension"));
    }
    if points.len() <= k {
        return Ok((0..k).map(|i| points[i % points.len()].clone()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[idx].clone());
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let (j, _) = nearest(p, &centers);
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut moved: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            moved = moved.max(sq_dist(&c, &centers[j]).sqrt());
            centers[j] = c;
        }
        if moved < KMEANS_TOL {
            break;
        }
    }
    Ok(centers)
}

/// [`kmeans_raw`] followed by L2 normalization of every centre.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    kmeans_raw(points, k, seed)?.iter().map(|c| unit(c)).collect()
}

/// Within-cluster sum of squares of `points` against their nearest centre.
pub fn inertia(points: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| nearest(p, centers).1).sum()
}

/// Unit-norm prototypes of normal sound for one machine type.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub machine_type: String,
    pub prototypes: Vec<Vec<f64>>,
}

impl PrototypeBank {
    /// `k` k-means centres of the normalized source embeddings plus the first
    /// `n_target` normalized target embeddings.
    pub fn build(
        machine_type: &str,
        source: &[Vec<f64>],
        target: &[Vec<f64>],
        k: usize,
        n_target: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut prototypes = Vec::new();
        if !source.is_empty() {
            let pts = source.iter().map(|v| unit(v)).collect::<Result<Vec<_>>>()?;
            prototypes.extend(kmeans(&pts, k, seed)?);
        }
        for t in target.iter().take(n_target) {
            prototypes.push(unit(t)?);
        }
        if prototypes.is_empty() {
            return Err(arg_err!("no normal training embeddings for machine {machine_type}"));
        }
        Ok(Self {
            machine_type: machine_type.to_string(),
            prototypes,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }
}

/// Minimum cosine distance `1 − cos` from `embedding` to the bank, in `[0, 2]`.
pub fn anomaly_score(embedding: &[f64], bank: &PrototypeBank) -> Result<f64> {
    if embedding.len() != bank.dim() {
        return Err(dim_err!(
            "embedding of length {} against bank of dim {}",
            embedding.len(),
            bank.dim()
        ));
    }
    let e = unit(embedding)?;
    let best = bank
        .prototypes
        .iter()
        .map(|p| 1.0 - p.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(best.clamp(0.0, 2.0))
}
