//! Codebooks and the three quantization schemes: plain VQ, multi-codebook
//! (MCQ) and residual (RQ).

mod codebook;
mod distance;
pub mod io;
mod kmeans;
mod mcq;
mod rq;

pub use codebook::{Assignments, Codebook, CodebookStats, Revival, EMA_EPSILON};
pub use distance::{nearest_row, sq_dist, sq_dist_f64};
pub use kmeans::{fit_kmeans, fit_kmeans_with, KMeansConfig, KMeansFit};
pub use mcq::MultiCodebookQuantizer;
pub use rq::ResidualQuantizer;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::par::Execution;
use crate::rng::{mix64, stream};

/// Result of quantizing one token.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedToken {
    /// One index per sub-codebook (MCQ) or level (RQ).
    pub indices: Vec<usize>,
    pub quantized: Vec<f32>,
    /// `||token - quantized||²`.
    pub error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Vq,
    Mcq,
    Rq,
}

impl Scheme {
    pub fn code(self) -> u32 {
        match self {
            Scheme::Vq => 0,
            Scheme::Mcq => 1,
            Scheme::Rq => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Scheme::Vq),
            1 => Some(Scheme::Mcq),
            2 => Some(Scheme::Rq),
            _ => None,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Vq => "vq",
            Scheme::Mcq => "mcq",
            Scheme::Rq => "rq",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vq" => Ok(Scheme::Vq),
            "mcq" => Ok(Scheme::Mcq),
            "rq" => Ok(Scheme::Rq),
            other => Err(Error::InvalidParameter(format!("unknown scheme {other:?}"))),
        }
    }
}

/// `Σ log2(K_i)`: bits needed to address one token's code combination.
pub fn vocab_bits(sub_codebook_sizes: &[usize]) -> f64 {
    sub_codebook_sizes.iter().map(|&k| (k as f64).log2()).sum()
}

/// Any of the three schemes behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Quantizer {
    Vq(Codebook),
    Mcq(MultiCodebookQuantizer),
    Rq(ResidualQuantizer),
}

impl Quantizer {
    pub fn scheme(&self) -> Scheme {
        match self {
            Quantizer::Vq(_) => Scheme::Vq,
            Quantizer::Mcq(_) => Scheme::Mcq,
            Quantizer::Rq(_) => Scheme::Rq,
        }
    }

    pub fn token_dim(&self) -> usize {
        match self {
            Quantizer::Vq(cb) => cb.dim(),
            Quantizer::Mcq(q) => q.token_dim(),
            Quantizer::Rq(q) => q.token_dim(),
        }
    }

    /// Codes emitted per token.
    pub fn num_codes(&self) -> usize {
        match self {
            Quantizer::Vq(_) => 1,
            Quantizer::Mcq(q) => q.num_sub_codebooks(),
            Quantizer::Rq(q) => q.num_levels(),
        }
    }

    /// Sizes of the codebook consulted for each emitted code.
    pub fn code_sizes(&self) -> Vec<usize> {
        match self {
            Quantizer::Vq(cb) => vec![cb.size()],
            Quantizer::Mcq(q) => q.sub_codebooks().iter().map(Codebook::size).collect(),
            Quantizer::Rq(q) => (0..q.num_levels()).map(|l| q.level(l).size()).collect(),
        }
    }

    pub fn vocab_bits(&self) -> f64 {
        vocab_bits(&self.code_sizes())
    }

    /// Distinct codebooks (a shared RQ codebook appears once).
    pub fn codebooks(&self) -> &[Codebook] {
        match self {
            Quantizer::Vq(cb) => std::slice::from_ref(cb),
            Quantizer::Mcq(q) => q.sub_codebooks(),
            Quantizer::Rq(q) => q.codebooks(),
        }
    }

    pub fn codebooks_mut(&mut self) -> &mut [Codebook] {
        match self {
            Quantizer::Vq(cb) => std::slice::from_mut(cb),
            Quantizer::Mcq(q) => q.sub_codebooks_mut(),
            Quantizer::Rq(q) => q.codebooks_mut(),
        }
    }

    /// Which entry of [`Self::codebooks`] serves code position `j`.
    pub fn slot(&self, j: usize) -> usize {
        match self {
            Quantizer::Vq(_) => 0,
            Quantizer::Mcq(_) => j,
            Quantizer::Rq(q) => q.slot(j),
        }
    }

    /// Quantizes without touching usage counters.
    pub fn encode(&self, token: &[f32]) -> Result<QuantizedToken> {
        match self {
            Quantizer::Vq(cb) => {
                let (i, _) = cb.nearest(token)?;
                let quantized = cb.entry(i).to_vec();
                let error = sq_dist_f64(token, &quantized);
                Ok(QuantizedToken {
                    indices: vec![i],
                    quantized,
                    error,
                })
            }
            Quantizer::Mcq(q) => q.encode(token),
            Quantizer::Rq(q) => q.encode(token),
        }
    }

    pub fn quantize(&mut self, token: &[f32]) -> Result<QuantizedToken> {
        let q = self.encode(token)?;
        self.record(&q.indices);
        Ok(q)
    }

    pub(crate) fn record(&mut self, indices: &[usize]) {
        match self {
            Quantizer::Vq(cb) => cb.record_usage(indices[0]),
            Quantizer::Mcq(q) => q.record(indices),
            Quantizer::Rq(q) => q.record(indices),
        }
    }

    /// Encodes row-major `tokens` (pure, possibly in parallel).
    pub fn encode_batch(&self, exec: Execution, tokens: &[f32]) -> Result<Vec<QuantizedToken>> {
        let d = self.token_dim();
        if tokens.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: tokens.len() % d,
            });
        }
        exec.map_chunks(tokens, d * 64, |chunk| {
            chunk
                .chunks_exact(d)
                .map(|t| self.encode(t))
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
    }

    /// Encodes a batch and then records usage sequentially.
    pub fn quantize_batch(
        &mut self,
        exec: Execution,
        tokens: &[f32],
    ) -> Result<Vec<QuantizedToken>> {
        let out = self.encode_batch(exec, tokens)?;
        for q in &out {
            self.record(&q.indices);
        }
        Ok(out)
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<f32>> {
        match self {
            Quantizer::Vq(cb) => {
                ensure_dim(1, indices.len())?;
                if indices[0] >= cb.size() {
                    return Err(Error::InvalidParameter(format!(
                        "code index {} out of range for K={}",
                        indices[0],
                        cb.size()
                    )));
                }
                Ok(cb.entry(indices[0]).to_vec())
            }
            Quantizer::Mcq(q) => q.decode(indices),
            Quantizer::Rq(q) => q.decode(indices),
        }
    }

    /// Vectors each codebook quantized for these tokens, one row-major
    /// buffer per entry of [`Self::codebooks`], with the chosen entry for
    /// every row.
    pub fn codebook_inputs(
        &self,
        tokens: &[f32],
        results: &[QuantizedToken],
    ) -> Vec<(Vec<f32>, Vec<usize>)> {
        let d = self.token_dim();
        let mut out: Vec<(Vec<f32>, Vec<usize>)> =
            vec![(Vec::new(), Vec::new()); self.codebooks().len()];
        for (t, q) in tokens.chunks_exact(d).zip(results) {
            match self {
                Quantizer::Vq(_) => {
                    out[0].0.extend_from_slice(t);
                    out[0].1.push(q.indices[0]);
                }
                Quantizer::Mcq(m) => {
                    for (j, chunk) in t.chunks_exact(m.chunk_dim()).enumerate() {
                        out[j].0.extend_from_slice(chunk);
                        out[j].1.push(q.indices[j]);
                    }
                }
                Quantizer::Rq(r) => {
                    for (level, input) in r.level_inputs(t, &q.indices).into_iter().enumerate() {
                        let slot = r.slot(level);
                        out[slot].0.extend_from_slice(&input);
                        out[slot].1.push(q.indices[level]);
                    }
                }
            }
        }
        out
    }

    /// Per-codebook assignment totals for an EMA update.
    pub fn assignments(&self, tokens: &[f32], results: &[QuantizedToken]) -> Vec<Assignments> {
        self.codebook_inputs(tokens, results)
            .into_iter()
            .zip(self.codebooks())
            .map(|((vectors, chosen), cb)| {
                let mut a = Assignments::new(cb.size(), cb.dim());
                for (v, &i) in vectors.chunks_exact(cb.dim()).zip(&chosen) {
                    a.add(i, v).expect("dimensions checked by construction");
                }
                a
            })
            .collect()
    }

    pub fn reset_usage(&mut self) {
        self.codebooks_mut()
            .iter_mut()
            .for_each(Codebook::reset_usage);
    }

    pub fn stats(&self) -> Vec<CodebookStats> {
        self.codebooks().iter().map(Codebook::stats).collect()
    }
}

/// How a quantizer should be shaped and fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub scheme: Scheme,
    /// Sub-codebooks (MCQ) or levels (RQ); 1 for VQ.
    pub n: usize,
    /// Entries per codebook.
    pub k: usize,
    /// RQ only: one codebook reused across levels.
    pub shared: bool,
}

impl QuantizerSpec {
    pub fn new(scheme: Scheme, n: usize, k: usize) -> Self {
        Self {
            scheme,
            n,
            k,
            shared: true,
        }
    }

    pub fn label(&self) -> String {
        match (self.scheme, self.shared) {
            (Scheme::Rq, false) => format!("rq-perlevel:{}x{}", self.n, self.k),
            (s, _) => format!("{s}:{}x{}", self.n, self.k),
        }
    }
}

impl std::str::FromStr for QuantizerSpec {
    type Err = Error;

    /// Parses `scheme:NxK`, e.g. `mcq:8x256`; `rq-perlevel:4x64` selects
    /// per-level RQ codebooks.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("bad quantizer spec {s:?}, want scheme:NxK"));
        let (scheme, shape) = s.trim().split_once(':').ok_or_else(bad)?;
        let (n, k) = shape.split_once(['x', 'X']).ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        let k: usize = k.parse().map_err(|_| bad())?;
        let (scheme, shared) = match scheme {
            "rq-perlevel" => (Scheme::Rq, false),
            other => (other.parse()?, true),
        };
        if n == 0 || k == 0 || (scheme == Scheme::Vq && n != 1) {
            return Err(bad());
        }
        Ok(Self {
            scheme,
            n,
            k,
            shared,
        })
    }
}

/// Fits a quantizer of the given shape to row-major `vectors` of width `dim`.
///
/// MCQ sub-codebook `j` is a k-means fit of chunk `j`; VQ is the `n = 1`
/// case of the same procedure. Per-level RQ fits each level greedily to the
/// previous residuals; shared RQ starts from a k-means fit of the data and
/// then alternates residual encoding with a pooled centroid update.
pub fn fit_quantizer(
    exec: Execution,
    vectors: &[f32],
    dim: usize,
    spec: &QuantizerSpec,
    base: &KMeansConfig,
) -> Result<Quantizer> {
    if dim == 0 || vectors.len() % dim != 0 {
        return Err(Error::InvalidParameter(format!(
            "vector buffer of length {} is not a multiple of dim {dim}",
            vectors.len()
        )));
    }
    let n_vec = vectors.len() / dim;
    let cfg_for = |j: usize| KMeansConfig {
        k: spec.k,
        seed: mix64(base.seed ^ (j as u64).wrapping_mul(0x9E37_79B9)),
        ..base.clone()
    };
    match spec.scheme {
        Scheme::Vq | Scheme::Mcq => {
            let n = if spec.scheme == Scheme::Vq { 1 } else { spec.n };
            if n == 0 || dim % n != 0 {
                return Err(Error::InvalidParameter(format!(
                    "token dim {dim} is not divisible into {n} chunks"
                )));
            }
            let c = dim / n;
            let mut books = Vec::with_capacity(n);
            for j in 0..n {
                let mut chunk = Vec::with_capacity(n_vec * c);
                for v in vectors.chunks_exact(dim) {
                    chunk.extend_from_slice(&v[j * c..(j + 1) * c]);
                }
                books.push(fit_kmeans_with(exec, &chunk, c, &cfg_for(j))?.codebook);
            }
            if spec.scheme == Scheme::Vq {
                Ok(Quantizer::Vq(books.pop().expect("one codebook")))
            } else {
                Ok(Quantizer::Mcq(MultiCodebookQuantizer::new(books)?))
            }
        }
        Scheme::Rq if !spec.shared => {
            let mut residual = vectors.to_vec();
            let mut levels = Vec::with_capacity(spec.n);
            for level in 0..spec.n {
                let cb = fit_kmeans_with(exec, &residual, dim, &cfg_for(level))?.codebook;
                let assigned = exec.map_chunks(&residual, dim * 256, |chunk| {
                    chunk
                        .chunks_exact(dim)
                        .map(|r| nearest_row(cb.entries(), dim, r).0)
                        .collect::<Vec<_>>()
                });
                for (r, i) in residual
                    .chunks_exact_mut(dim)
                    .zip(assigned.into_iter().flatten())
                {
                    for (x, &e) in r.iter_mut().zip(cb.entry(i)) {
                        *x -= e;
                    }
                }
                levels.push(cb);
            }
            Ok(Quantizer::Rq(ResidualQuantizer::per_level(levels)?))
        }
        Scheme::Rq => fit_shared_rq(exec, vectors, dim, spec, &cfg_for(0)),
    }
}

/// A quantizer of the given shape with standard-normal entries, drawn from
/// a stream keyed by `seed`.
pub fn random_quantizer(spec: &QuantizerSpec, dim: usize, seed: u64) -> Result<Quantizer> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream(seed, "codebook-init", 0);
    let mut book = |k: usize, c: usize| -> Result<Codebook> {
        let entries = (0..k * c)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect::<Vec<f32>>();
        Codebook::new(entries, k, c)
    };
    if spec.n == 0 {
        return Err(Error::InvalidParameter(
            "quantizer needs at least one codebook".into(),
        ));
    }
    match spec.scheme {
        Scheme::Vq => Ok(Quantizer::Vq(book(spec.k, dim)?)),
        Scheme::Mcq => {
            if dim % spec.n != 0 {
                return Err(Error::InvalidParameter(format!(
                    "token dim {dim} is not divisible into {} chunks",
                    spec.n
                )));
            }
            let books = (0..spec.n)
                .map(|_| book(spec.k, dim / spec.n))
                .collect::<Result<Vec<_>>>()?;
            Ok(Quantizer::Mcq(MultiCodebookQuantizer::new(books)?))
        }
        Scheme::Rq if spec.shared => Ok(Quantizer::Rq(ResidualQuantizer::shared(
            book(spec.k, dim)?,
            spec.n,
        )?)),
        Scheme::Rq => {
            let books = (0..spec.n)
                .map(|_| book(spec.k, dim))
                .collect::<Result<Vec<_>>>()?;
            Ok(Quantizer::Rq(ResidualQuantizer::per_level(books)?))
        }
    }
}

fn fit_shared_rq(
    exec: Execution,
    vectors: &[f32],
    dim: usize,
    spec: &QuantizerSpec,
    cfg: &KMeansConfig,
) -> Result<Quantizer> {
    const ROUNDS: usize = 8;
    let init = fit_kmeans_with(exec, vectors, dim, cfg)?.codebook;
    let mut q = Quantizer::Rq(ResidualQuantizer::shared(init, spec.n)?);
    let mut best: Option<(f64, Quantizer)> = None;
    for round in 0..=ROUNDS {
        let results = q.encode_batch(exec, vectors)?;
        let err = results.iter().map(|r| r.error).sum::<f64>() / results.len() as f64;
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, q.clone()));
        }
        if round == ROUNDS {
            break;
        }
        // pooled Lloyd step over every level's input
        let a = q.assignments(vectors, &results).swap_remove(0);
        let entries = q.codebooks_mut()[0].entries_mut();
        for (i, &count) in a.counts().iter().enumerate() {
            if count > 0.0 {
                for (e, &s) in entries[i * dim..(i + 1) * dim]
                    .iter_mut()
                    .zip(&a.sums()[i * dim..(i + 1) * dim])
                {
                    *e = (s / count) as f32;
                }
            }
        }
    }
    Ok(best.expect("at least one round").1)
}
