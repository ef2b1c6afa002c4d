//! k-means++ seeding followed by Lloyd iterations.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use super::codebook::Codebook;
use super::distance::{nearest_row, sq_dist};
use crate::error::{ensure_finite, Error, Result};
use crate::par::Execution;
use crate::rng::stream;

const ASSIGN_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative distortion improvement drops below this.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Mean squared distance of the inputs to the returned entries.
    pub distortion: f64,
    /// Mean distortion after every assignment step.
    pub history: Vec<f64>,
}

pub fn fit_kmeans(vectors: &[f32], dim: usize, config: &KMeansConfig) -> Result<KMeansFit> {
    fit_kmeans_with(Execution::default(), vectors, dim, config)
}

pub fn fit_kmeans_with(
    exec: Execution,
    vectors: &[f32],
    dim: usize,
    config: &KMeansConfig,
) -> Result<KMeansFit> {
    if dim == 0 || vectors.len() % dim != 0 {
        return Err(Error::InvalidParameter(format!(
            "vector buffer of length {} is not a multiple of dim {dim}",
            vectors.len()
        )));
    }
    if config.k == 0 {
        return Err(Error::InvalidParameter("k-means needs K >= 1".into()));
    }
    let n = vectors.len() / dim;
    if n < config.k {
        return Err(Error::InsufficientData {
            needed: config.k,
            got: n,
        });
    }
    ensure_finite(vectors)?;

    let mut rng = stream(config.seed, "kmeans++", 0);
    let mut centers = plus_plus(vectors, dim, config.k, &mut rng);
    let mut history = Vec::new();
    let mut iters = 0;
    loop {
        let assigned = assign(exec, vectors, dim, &centers);
        let total: f64 = assigned.iter().map(|&(_, d)| d as f64).sum();
        let mean = total / n as f64;
        let converged = match history.last() {
            Some(&prev) if prev > 0.0 => (prev - mean) / prev < config.tol,
            Some(_) => true,
            None => mean == 0.0,
        };
        history.push(mean);
        if converged || iters >= config.max_iters {
            break;
        }
        update_centers(vectors, dim, config.k, &assigned, &mut centers);
        iters += 1;
    }
    let distortion = *history.last().expect("at least one assignment pass");
    Ok(KMeansFit {
        codebook: Codebook::new(centers, config.k, dim)?,
        distortion,
        history,
    })
}

fn plus_plus<R: Rng>(vectors: &[f32], dim: usize, k: usize, rng: &mut R) -> Vec<f32> {
    let n = vectors.len() / dim;
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first)) as f64).collect();
    for _ in 1..k {
        let pick = match WeightedIndex::new(&min_d) {
            Ok(w) => w.sample(rng),
            // every point coincides with a chosen center
            Err(_) => rng.random_range(0..n),
        };
        let c = row(pick).to_vec();
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = sq_dist(row(i), &c) as f64;
            if nd < *d {
                *d = nd;
            }
        }
        centers.extend_from_slice(&c);
    }
    centers
}

fn assign(exec: Execution, vectors: &[f32], dim: usize, centers: &[f32]) -> Vec<(u32, f32)> {
    exec.map_chunks(vectors, dim * ASSIGN_CHUNK, |chunk| {
        chunk
            .chunks_exact(dim)
            .map(|v| {
                let (i, d) = nearest_row(centers, dim, v);
                (i as u32, d)
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

fn update_centers(
    vectors: &[f32],
    dim: usize,
    k: usize,
    assigned: &[(u32, f32)],
    centers: &mut [f32],
) {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (v, &(c, _)) in vectors.chunks_exact(dim).zip(assigned) {
        let c = c as usize;
        counts[c] += 1;
        for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        for (dst, &s) in centers[c * dim..(c + 1) * dim]
            .iter_mut()
            .zip(&sums[c * dim..(c + 1) * dim])
        {
            *dst = (s * inv) as f32;
        }
    }
    if !empty.is_empty() {
        // farthest points first; index order breaks ties
        let mut order: Vec<usize> = (0..assigned.len()).collect();
        order.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
        for (&c, &p) in empty.iter().zip(&order) {
            centers[c * dim..(c + 1) * dim].copy_from_slice(&vectors[p * dim..(p + 1) * dim]);
        }
    }
}
