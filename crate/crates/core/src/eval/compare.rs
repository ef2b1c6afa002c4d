use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::quantize::{fit_quantizer, io::VectorSet, KMeansConfig, QuantizerSpec};

pub const COMPARE_HEADER: [&str; 10] = [
    "config",
    "scheme",
    "n",
    "k",
    "seed",
    "error_mean",
    "error_std",
    "utilization",
    "perplexity",
    "vocab_bits",
];

/// One fitted configuration measured on held-out vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub config: String,
    pub scheme: String,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    /// Mean squared quantization error per held-out vector.
    pub error_mean: f64,
    pub error_std: f64,
    /// Mean over codebooks.
    pub utilization: f64,
    pub perplexity: f64,
    pub vocab_bits: f64,
}

/// Fits `spec` to `train` by k-means with `seed` and measures it on `test`.
pub fn fit_and_measure(
    exec: Execution,
    train: &VectorSet,
    test: &VectorSet,
    spec: &QuantizerSpec,
    seed: u64,
) -> Result<CompareRow> {
    if train.dim != test.dim {
        return Err(Error::DimensionMismatch {
            expected: train.dim,
            got: test.dim,
        });
    }
    let mut q = fit_quantizer(
        exec,
        &train.data,
        train.dim,
        spec,
        &KMeansConfig::new(spec.k, seed),
    )?;
    q.reset_usage();
    let codes = q.quantize_batch(exec, &test.data)?;
    let n = codes.len().max(1) as f64;
    let mean = codes.iter().map(|c| c.error).sum::<f64>() / n;
    let var = codes.iter().map(|c| (c.error - mean).powi(2)).sum::<f64>() / n;
    let stats = q.stats();
    let books = stats.len() as f64;
    Ok(CompareRow {
        config: spec.label(),
        scheme: spec.scheme.to_string(),
        n: spec.n,
        k: spec.k,
        seed,
        error_mean: mean,
        error_std: var.sqrt(),
        utilization: stats.iter().map(|s| s.utilization).sum::<f64>() / books,
        perplexity: stats.iter().map(|s| s.perplexity).sum::<f64>() / books,
        vocab_bits: q.vocab_bits(),
    })
}

/// Every `spec` x `seed` pair, config-major, each fitted independently.
pub fn compare_quantizers(
    exec: Execution,
    train: &VectorSet,
    test: &VectorSet,
    specs: &[QuantizerSpec],
    seeds: &[u64],
) -> Result<Vec<CompareRow>> {
    for spec in specs {
        if spec.scheme == crate::quantize::Scheme::Mcq && train.dim % spec.n != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} does not divide dim {}",
                spec.label(),
                train.dim
            )));
        }
    }
    let jobs: Vec<(QuantizerSpec, u64)> = specs
        .iter()
        .flat_map(|s| seeds.iter().map(move |&seed| (*s, seed)))
        .collect();
    exec.map(&jobs, |(spec, seed)| {
        fit_and_measure(exec, train, test, spec, *seed)
    })
    .into_iter()
    .collect()
}

pub fn compare_csv(rows: &[CompareRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(COMPARE_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
