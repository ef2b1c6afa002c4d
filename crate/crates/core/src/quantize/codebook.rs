use log::warn;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use super::distance::nearest_row;
use crate::error::{ensure_dim, ensure_finite, Error, Result};

/// Additive constant in the EMA entry update.
pub const EMA_EPSILON: f32 = 1e-5;

/// A bank of `K` code vectors of dimension `c`, with usage counters and
/// exponential-moving-average accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    entries: Vec<f32>,
    usage_counts: Vec<u64>,
    ema_cluster_size: Vec<f32>,
    ema_embed_sum: Vec<f32>,
}

/// Per-entry assignment totals for one batch: how many vectors each entry
/// received and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignments {
    dim: usize,
    counts: Vec<f64>,
    sums: Vec<f64>,
}

impl Assignments {
    pub fn new(size: usize, dim: usize) -> Self {
        Self {
            dim,
            counts: vec![0.0; size],
            sums: vec![0.0; size * dim],
        }
    }

    /// Builds totals from explicit per-entry vector lists.
    pub fn from_lists(dim: usize, lists: &[Vec<Vec<f32>>]) -> Result<Self> {
        let mut a = Self::new(lists.len(), dim);
        for (i, list) in lists.iter().enumerate() {
            for v in list {
                a.add(i, v)?;
            }
        }
        Ok(a)
    }

    pub fn add(&mut self, entry: usize, vector: &[f32]) -> Result<()> {
        ensure_dim(self.dim, vector.len())?;
        if entry >= self.counts.len() {
            return Err(Error::InvalidParameter(format!(
                "assignment to entry {entry} of a {}-entry codebook",
                self.counts.len()
            )));
        }
        self.counts[entry] += 1.0;
        let row = &mut self.sums[entry * self.dim..(entry + 1) * self.dim];
        for (s, &v) in row.iter_mut().zip(vector) {
            *s += v as f64;
        }
        Ok(())
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }
}

/// Histogram-derived health metrics of a codebook.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodebookStats {
    pub histogram: Vec<u64>,
    pub utilization: f64,
    pub perplexity: f64,
}

impl CodebookStats {
    pub fn from_counts(counts: &[u64]) -> Self {
        let total: u64 = counts.iter().sum();
        let used = counts.iter().filter(|&&c| c > 0).count();
        let (utilization, perplexity) = if total == 0 {
            (0.0, 1.0)
        } else {
            let entropy: f64 = counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum();
            (used as f64 / counts.len() as f64, entropy.exp())
        };
        Self {
            histogram: counts.to_vec(),
            utilization,
            perplexity,
        }
    }
}

/// What a revival pass did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Revival {
    /// Entries that were relocated (possibly none).
    Revived(Vec<usize>),
    /// The batch was empty; nothing was touched.
    EmptyBatch,
}

impl Codebook {
    /// Creates a codebook from `size` row-major entries of width `dim`.
    pub fn new(entries: Vec<f32>, size: usize, dim: usize) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "codebook needs K >= 1 and c >= 1, got K={size}, c={dim}"
            )));
        }
        ensure_dim(size * dim, entries.len())?;
        ensure_finite(&entries)?;
        Ok(Self {
            size,
            dim,
            entries,
            usage_counts: vec![0; size],
            ema_cluster_size: vec![0.0; size],
            ema_embed_sum: vec![0.0; size * dim],
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            ensure_dim(dim, r.len())?;
            flat.extend_from_slice(r);
        }
        Self::new(flat, rows.len(), dim)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &[f32] {
        &self.entries[index * self.dim..(index + 1) * self.dim]
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn ema_cluster_size(&self) -> &[f32] {
        &self.ema_cluster_size
    }

    pub fn ema_embed_sum(&self) -> &[f32] {
        &self.ema_embed_sum
    }

    /// Replaces entries wholesale (gradient-trained codebooks).
    pub fn set_entries(&mut self, entries: &[f32]) -> Result<()> {
        ensure_dim(self.entries.len(), entries.len())?;
        ensure_finite(entries)?;
        self.entries.copy_from_slice(entries);
        Ok(())
    }

    /// Restores EMA accumulators and counters (checkpoint loading).
    pub fn set_state(
        &mut self,
        usage_counts: Vec<u64>,
        ema_cluster_size: Vec<f32>,
        ema_embed_sum: Vec<f32>,
    ) -> Result<()> {
        ensure_dim(self.size, usage_counts.len())?;
        ensure_dim(self.size, ema_cluster_size.len())?;
        ensure_dim(self.size * self.dim, ema_embed_sum.len())?;
        if ema_cluster_size.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Corrupt("negative EMA cluster size".into()));
        }
        self.usage_counts = usage_counts;
        self.ema_cluster_size = ema_cluster_size;
        self.ema_embed_sum = ema_embed_sum;
        Ok(())
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn total_lookups(&self) -> u64 {
        self.usage_counts.iter().sum()
    }

    /// Nearest entry without touching the counters.
    pub fn nearest(&self, query: &[f32]) -> Result<(usize, f32)> {
        ensure_dim(self.dim, query.len())?;
        ensure_finite(query)?;
        Ok(nearest_row(&self.entries, self.dim, query))
    }

    /// Nearest entry; increments its usage counter.
    pub fn lookup(&mut self, query: &[f32]) -> Result<(usize, &[f32])> {
        let (index, _) = self.nearest(query)?;
        self.usage_counts[index] += 1;
        Ok((index, self.entry(index)))
    }

    pub(crate) fn record_usage(&mut self, index: usize) {
        self.usage_counts[index] += 1;
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [f32] {
        &mut self.entries
    }

    /// One EMA step from a batch's assignment totals.
    ///
    /// Entries whose accumulators are still exactly zero (never assigned)
    /// keep their current value.
    pub fn ema_update(&mut self, assignments: &Assignments, decay: f32) -> Result<()> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "EMA decay must lie in (0, 1), got {decay}"
            )));
        }
        ensure_dim(self.size, assignments.counts.len())?;
        ensure_dim(self.dim, assignments.dim)?;
        let keep = 1.0 - decay;
        for i in 0..self.size {
            let n = assignments.counts[i] as f32;
            self.ema_cluster_size[i] = decay * self.ema_cluster_size[i] + keep * n;
            let sums = &assignments.sums[i * self.dim..(i + 1) * self.dim];
            let acc = &mut self.ema_embed_sum[i * self.dim..(i + 1) * self.dim];
            for (a, &s) in acc.iter_mut().zip(sums) {
                *a = decay * *a + keep * s as f32;
            }
            let size = self.ema_cluster_size[i];
            if size == 0.0 && acc.iter().all(|&a| a == 0.0) {
                continue;
            }
            let denom = size + EMA_EPSILON;
            let row = &mut self.entries[i * self.dim..(i + 1) * self.dim];
            for (e, &a) in row.iter_mut().zip(acc.iter()) {
                *e = a / denom;
            }
        }
        Ok(())
    }

    /// Relocates every entry whose EMA cluster size is below `threshold` to
    /// a batch vector drawn with probability proportional to its current
    /// quantization error (without replacement while positive weight
    /// remains). `batch` holds row-major vectors of width `c`.
    pub fn revive_dead_codes<R: Rng>(
        &mut self,
        batch: &[f32],
        threshold: f32,
        rng: &mut R,
    ) -> Result<Revival> {
        if batch.is_empty() {
            warn!("revive_dead_codes called with an empty batch; skipping");
            return Ok(Revival::EmptyBatch);
        }
        if batch.len() % self.dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: batch.len() % self.dim,
            });
        }
        ensure_finite(batch)?;
        let dead: Vec<usize> = (0..self.size)
            .filter(|&i| self.ema_cluster_size[i] < threshold)
            .collect();
        if dead.is_empty() {
            return Ok(Revival::Revived(Vec::new()));
        }
        let mut weights: Vec<f64> = batch
            .chunks_exact(self.dim)
            .map(|v| nearest_row(&self.entries, self.dim, v).1 as f64)
            .collect();
        for &i in &dead {
            let pick = if weights.iter().any(|&w| w > 0.0) {
                let dist = WeightedIndex::new(&weights)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                dist.sample(rng)
            } else {
                rng.random_range(0..weights.len())
            };
            weights[pick] = 0.0;
            let v = &batch[pick * self.dim..(pick + 1) * self.dim];
            self.entries[i * self.dim..(i + 1) * self.dim].copy_from_slice(v);
            self.ema_cluster_size[i] = threshold;
            for (a, &x) in self.ema_embed_sum[i * self.dim..(i + 1) * self.dim]
                .iter_mut()
                .zip(v)
            {
                *a = x * threshold;
            }
        }
        Ok(Revival::Revived(dead))
    }

    pub fn stats(&self) -> CodebookStats {
        CodebookStats::from_counts(&self.usage_counts)
    }

    /// Mean squared quantization error of `batch` against the entries.
    pub fn mean_error(&self, batch: &[f32]) -> f64 {
        let n = batch.len() / self.dim;
        if n == 0 {
            return 0.0;
        }
        batch
            .chunks_exact(self.dim)
            .map(|v| nearest_row(&self.entries, self.dim, v).1 as f64)
            .sum::<f64>()
            / n as f64
    }
}
